//! Upper bounds on model calls for a given configuration.

use std::collections::BTreeMap;
use std::ops::{Add, Mul};

use serde::Serialize;

use crate::gateway::ModelRole;
use crate::types::PipelineConfig;

/// Maximum calls per role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CallCeiling {
    pub solver: u64,
    pub processor: u64,
    pub grader: u64,
    pub extractor: u64,
    pub parser: u64,
    pub judge: u64,
}

impl CallCeiling {
    /// One solver branch: draft, optional redraft, refine; one censor; two grades.
    pub const BRANCH: CallCeiling = CallCeiling {
        solver: 3,
        processor: 1,
        grader: 2,
        extractor: 0,
        parser: 0,
        judge: 0,
    };

    pub fn get(&self, role: ModelRole) -> u64 {
        match role {
            ModelRole::Solver => self.solver,
            ModelRole::Processor => self.processor,
            ModelRole::Grader => self.grader,
            ModelRole::Extractor => self.extractor,
            ModelRole::Parser => self.parser,
            ModelRole::Judge => self.judge,
        }
    }

    pub fn total(&self) -> u64 {
        ModelRole::ALL.iter().map(|r| self.get(*r)).sum()
    }

    pub fn by_role(&self) -> BTreeMap<ModelRole, u64> {
        ModelRole::ALL.iter().map(|r| (*r, self.get(*r))).collect()
    }

    fn grades(n: u64) -> CallCeiling {
        CallCeiling {
            grader: n,
            ..CallCeiling::default()
        }
    }

    /// Extractor, parser with one retry, both sides of every pair.
    fn extraction(pairs: u64) -> CallCeiling {
        CallCeiling {
            extractor: 1,
            parser: 2,
            ..CallCeiling::default()
        } + CallCeiling::BRANCH * (2 * pairs)
    }
}

impl Add for CallCeiling {
    type Output = CallCeiling;
    fn add(self, o: CallCeiling) -> CallCeiling {
        CallCeiling {
            solver: self.solver + o.solver,
            processor: self.processor + o.processor,
            grader: self.grader + o.grader,
            extractor: self.extractor + o.extractor,
            parser: self.parser + o.parser,
            judge: self.judge + o.judge,
        }
    }
}

impl Mul<u64> for CallCeiling {
    type Output = CallCeiling;
    fn mul(self, n: u64) -> CallCeiling {
        CallCeiling {
            solver: self.solver * n,
            processor: self.processor * n,
            grader: self.grader * n,
            extractor: self.extractor * n,
            parser: self.parser * n,
            judge: self.judge * n,
        }
    }
}

/// The most calls one run can make.
pub fn run_ceiling(config: &PipelineConfig) -> CallCeiling {
    let k = config.k as u64;
    let n = config.verify_repeats as u64;
    let pairs = config.extraction_budget as u64;
    let phase1 = (CallCeiling::BRANCH * k + CallCeiling::grades(n)) * config.l0 as u64;
    let conjecture = (CallCeiling::extraction(pairs) + CallCeiling::BRANCH * k + CallCeiling::grades(n)) * config.l as u64;
    let phase4 = CallCeiling::grades(n)
        + CallCeiling::extraction(pairs) * 2
        + CallCeiling::BRANCH * k
        + CallCeiling::grades(n);
    phase1 + conjecture + phase4
}

/// The most calls a whole solve can make: every run plus the judge ladder
/// (one re-prompt per comparison).
pub fn call_ceiling(config: &PipelineConfig) -> CallCeiling {
    let runs = config.parallel_runs.max(1) as u64;
    run_ceiling(config) * runs
        + CallCeiling {
            judge: 2 * (runs - 1),
            ..CallCeiling::default()
        }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_small_config() {
        let config = PipelineConfig {
            l0: 1,
            l: 1,
            k: 2,
            extraction_budget: 1,
            parallel_runs: 1,
            ..PipelineConfig::pb_adv()
        };
        // Phase 1: 2 branches (6 solver), 3 verify grades.
        // Conjecture iteration: 2 pair branches + 2 guided (12 solver).
        // Phase 4: 2 sessions x 2 pair branches + 2 branches (18 solver).
        let c = call_ceiling(&config);
        assert_eq!(c.solver, 6 + 12 + 18);
        assert_eq!(c.processor, 2 + 4 + 6);
        assert_eq!(c.grader, (4 + 3) + (8 + 3) + (3 + 8 + 4 + 3));
        assert_eq!(c.extractor, 1 + 2);
        assert_eq!(c.parser, 2 + 4);
        assert_eq!(c.judge, 0);
    }

    #[test]
    fn runs_scale_and_judge_adds() {
        let one = PipelineConfig {
            parallel_runs: 1,
            ..PipelineConfig::pb_adv()
        };
        let three = PipelineConfig {
            parallel_runs: 3,
            ..PipelineConfig::pb_adv()
        };
        let (a, b) = (call_ceiling(&one), call_ceiling(&three));
        assert_eq!(b.solver, 3 * a.solver);
        assert_eq!(b.judge, 4);
    }
}
