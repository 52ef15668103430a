//! Ready-made scripted scenarios for demos, docs and tests.
//!
//! Each scenario pairs a problem with a [`Script`] whose rules key on
//! marker words in the prompts, so the pipeline's behaviour under it can
//! be worked out by hand.

use std::sync::Arc;

use rust_decimal::Decimal;

use crate::gateway::ledger::{Price, PriceTable};
use crate::gateway::scripted::{Reply, Rule, Script, ScriptedBackend};
use crate::gateway::{Gateway, ModelRole};
use crate::types::Problem;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub problem: Problem,
    pub script: Script,
}

impl Scenario {
    /// A gateway serving this script with [`demo_prices`].
    pub fn gateway(&self, budget: u64) -> Gateway {
        Gateway::builder(demo_prices(), budget)
            .backend("scripted", Arc::new(ScriptedBackend::new(self.script.clone())))
            .default_backend("scripted")
            .build()
            .expect("scripted gateway is valid")
    }
}

/// $2 per million input tokens, $8 per million output and thinking tokens.
pub fn demo_prices() -> PriceTable {
    PriceTable::new().with("scripted", Price::new(Decimal::from(2), Decimal::from(8)).expect("valid price"))
}

/// A grader transcript with the given score and issues (`"Slip"` or
/// `"Fallacy"` tags).
pub fn grader_reply(score: u8, issues: &[(&str, &str)]) -> String {
    let mut out = String::from("**Strengths:**\n- The argument is organised clearly.\n\n**Areas for Improvement:**\n");
    if issues.is_empty() {
        out.push_str("- None\n");
    }
    for (tag, text) in issues {
        out.push_str(&format!("- [{tag}] {text}\n"));
    }
    out.push_str("\n**Scaffolding Questions:**\n- None\n\n");
    out.push_str(&format!("**Final Grade:** {score}/7\n"));
    out
}

fn reply(text: impl Into<String>, input: u64, output: u64) -> Reply {
    Reply::text(text).usage(input, output)
}

fn conjecture_json(conjecture: &str, negation: &str) -> String {
    serde_json::json!({
        "conjectures": [conjecture],
        "negations": [negation],
        "proof": "Assuming the conjecture, the claim follows in one line.",
    })
    .to_string()
}

pub const WELL_CONJECTURE: &str = "CONJ-C: every fixed point of the map is stable.";
pub const WELL_NEGATION: &str = "CONJ-NOT: some fixed point of the map is unstable.";
pub const GAP_CONJECTURE: &str = "IDENTITY-C: the identity map has a stable fixed point.";
pub const GAP_NEGATION: &str = "IDENTITY-NOT: the identity map has no stable fixed point.";

/// A cognitive well: every direct attempt produces the same wrong proof,
/// which the grader scores 6 with one slip. The proof relies on a false
/// conjecture; once its negation is a lemma, the solver escapes to a
/// correct proof graded 7 with no issues.
///
/// With conjecture iterations the run is verified in Phase 3. Without
/// them, Phase 4 only proves an irrelevant gap lemma and the run ends at 6.
pub fn cognitive_well() -> Scenario {
    let problem = Problem::new(
        "well",
        "WELLPROBLEM: Show that the map f(x) = x^3 - x has a fixed point that is not stable.",
    )
    .expect("valid problem");
    let script = Script::new()
        .rule(
            Rule::role(ModelRole::Solver)
                .named("solver-escape")
                .contains("WELLPROBLEM")
                .contains("CONJ-NOT")
                .reply(reply("ANSWER-ESCAPE: the fixed point 0 has f'(0) = -1 ...", 900, 400)),
        )
        .rule(
            Rule::role(ModelRole::Solver)
                .named("solver-well")
                .contains("WELLPROBLEM")
                .reply(reply("ANSWER-WELL: every fixed point is stable, so ...", 800, 400)),
        )
        .rule(
            Rule::role(ModelRole::Solver)
                .named("solver-negation")
                .contains("CONJ-NOT")
                .reply(reply("ANSWER-NEG: at x = 0 the derivative has modulus 1 ...", 300, 200)),
        )
        .rule(
            Rule::role(ModelRole::Solver)
                .named("solver-conjecture")
                .contains("CONJ-C")
                .reply(reply("ANSWER-POS: stability holds because ...", 300, 200)),
        )
        .rule(
            Rule::role(ModelRole::Solver)
                .named("solver-gap")
                .contains("IDENTITY-C")
                .reply(reply("ANSWER-ID-POS: every point is fixed by the identity ...", 300, 200)),
        )
        .rule(
            Rule::role(ModelRole::Solver)
                .named("solver-gap-negation")
                .contains("IDENTITY-NOT")
                .reply(reply("ANSWER-ID-NEG: suppose no point is stable ...", 300, 200)),
        )
        .rule(
            Rule::role(ModelRole::Grader)
                .named("grade-escape")
                .contains("ANSWER-ESCAPE")
                .reply(reply(grader_reply(7, &[]), 1200, 150)),
        )
        .rule(
            Rule::role(ModelRole::Grader)
                .named("grade-well")
                .contains("ANSWER-WELL")
                .reply(reply(
                    grader_reply(6, &[("Slip", "The stability check at the last step omits the constant.")]),
                    1100,
                    150,
                )),
        )
        .rule(
            Rule::role(ModelRole::Grader)
                .named("grade-negation")
                .contains("ANSWER-NEG")
                .reply(reply(grader_reply(7, &[]), 500, 120)),
        )
        .rule(
            Rule::role(ModelRole::Grader)
                .named("grade-conjecture")
                .contains("ANSWER-POS")
                .reply(reply(
                    grader_reply(3, &[("Fallacy", "Stability is asserted, not proven.")]),
                    500,
                    120,
                )),
        )
        .rule(
            Rule::role(ModelRole::Grader)
                .named("grade-gap")
                .contains("ANSWER-ID-POS")
                .reply(reply(grader_reply(7, &[]), 500, 120)),
        )
        .rule(
            Rule::role(ModelRole::Grader)
                .named("grade-gap-negation")
                .contains("ANSWER-ID-NEG")
                .reply(reply(
                    grader_reply(2, &[("Fallacy", "The contradiction is not derived.")]),
                    500,
                    120,
                )),
        )
        .rule(Rule::role(ModelRole::Processor).named("processor").reply(reply("NO_ISSUES", 400, 5)))
        .rule(
            Rule::role(ModelRole::Extractor)
                .named("extract-gaps")
                .contains("Independent grading reports")
                .reply(reply(format!("{GAP_CONJECTURE}\nNegation: {GAP_NEGATION}"), 1500, 300)),
        )
        .rule(
            Rule::role(ModelRole::Extractor)
                .named("extract")
                .contains("WELLPROBLEM")
                .reply(reply(format!("{WELL_CONJECTURE}\nNegation: {WELL_NEGATION}"), 1500, 300)),
        )
        .rule(
            Rule::role(ModelRole::Parser)
                .named("parse-gaps")
                .contains("IDENTITY")
                .reply(reply(conjecture_json(GAP_CONJECTURE, GAP_NEGATION), 400, 150)),
        )
        .rule(
            Rule::role(ModelRole::Parser)
                .named("parse")
                .contains("CONJ-C")
                .reply(reply(conjecture_json(WELL_CONJECTURE, WELL_NEGATION), 400, 150)),
        )
        .rule(
            Rule::role(ModelRole::Judge)
                .named("judge")
                .reply(reply("**Justification:** A is complete.\n\n<decision>A</decision>", 2000, 100)),
        );
    Scenario { problem, script }
}

/// Every solve is graded 7 with no issues.
pub fn instant_success() -> Scenario {
    let problem = Problem::new("easy", "EASYPROBLEM: Show that 1 + 1 = 2.").expect("valid problem");
    let script = Script::new()
        .rule(Rule::role(ModelRole::Solver).reply(reply("ANSWER-GOOD: by the successor axioms ...", 200, 100)))
        .rule(Rule::role(ModelRole::Grader).reply(reply(grader_reply(7, &[]), 300, 80)))
        .rule(Rule::role(ModelRole::Processor).reply(reply("NO_ISSUES", 100, 5)))
        .rule(Rule::role(ModelRole::Judge).reply(reply("<decision>A</decision>", 500, 20)));
    Scenario { problem, script }
}

/// Every solve is graded `score` with one fallacy; every extraction finds
/// one conjecture whose sides both grade `score`.
pub fn plateau(score: u8) -> Scenario {
    let problem = Problem::new("plateau", "PLATEAUPROBLEM: Show that the sequence converges.").expect("valid problem");
    let issues: &[(&str, &str)] = if score == 7 { &[] } else { &[("Fallacy", "The key estimate is missing.")] };
    let script = Script::new()
        .rule(Rule::role(ModelRole::Solver).reply(reply("ANSWER-PLAIN: the terms decrease ...", 400, 200)))
        .rule(Rule::role(ModelRole::Grader).reply(reply(grader_reply(score, issues), 600, 100)))
        .rule(Rule::role(ModelRole::Processor).reply(reply("NO_ISSUES", 200, 5)))
        .rule(Rule::role(ModelRole::Extractor).reply(reply("C: the terms are bounded.\nNegation: they are not.", 800, 100)))
        .rule(Rule::role(ModelRole::Parser).reply(reply(
            conjecture_json("The terms of the sequence are bounded.", "The terms of the sequence are unbounded."),
            300,
            100,
        )))
        .rule(Rule::role(ModelRole::Judge).reply(reply("<decision>B</decision>", 500, 20)));
    Scenario { problem, script }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialectic::grading::parse_grade;

    #[test]
    fn grader_replies_parse_as_scripted() {
        let r = parse_grade(&grader_reply(6, &[("Slip", "x")])).unwrap();
        assert_eq!(r.score().value(), 6);
        assert_eq!(r.issues().len(), 1);
        assert!(parse_grade(&grader_reply(7, &[])).unwrap().is_perfect());
        assert_eq!(parse_grade(&grader_reply(3, &[("Fallacy", "y")])).unwrap().score().value(), 3);
    }

    #[test]
    fn scripts_round_trip_through_toml() {
        for s in [cognitive_well(), instant_success(), plateau(2)] {
            let text = toml::to_string(&s.script).unwrap();
            assert_eq!(Script::parse(&text, "toml").unwrap(), s.script);
        }
    }
}
