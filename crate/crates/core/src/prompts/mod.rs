//! Prompt templates and slot rendering.
//!
//! Templates ship inside the crate (see `templates/`) and are listed in a
//! manifest naming each template's required and optional slots. A slot is
//! written `{{@name}}` in the template body.
//!
//! ```
//! use proofloop::prompts::{Registry, TemplateId};
//!
//! let registry = Registry::builtin();
//! let prompt = registry
//!     .render(TemplateId::Solver, &[("problem", "Show that 1 + 1 = 2.")])
//!     .unwrap();
//! assert!(prompt.contains("Show that 1 + 1 = 2."));
//! assert!(prompt.contains("(none provided)"));
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Text substituted for optional slots that are absent or empty.
pub const NONE_PROVIDED: &str = "(none provided)";

const OPEN: &str = "{{@";
const CLOSE: &str = "}}";

const MANIFEST: &str = include_str!("../../templates/manifest.toml");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("missing required slot {0:?}")]
    MissingSlot(String),
    #[error("unknown slot {0:?}")]
    UnknownSlot(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Solver,
    SolverEngineered,
    GraderCouncil,
    GraderSimplified,
    ConjectureExtractor,
    SolutionParser,
    AnswerProcessor,
    ConjectureParser,
    AnswerCombiner,
}

impl TemplateId {
    pub const ALL: [TemplateId; 9] = [
        TemplateId::Solver,
        TemplateId::SolverEngineered,
        TemplateId::GraderCouncil,
        TemplateId::GraderSimplified,
        TemplateId::ConjectureExtractor,
        TemplateId::SolutionParser,
        TemplateId::AnswerProcessor,
        TemplateId::ConjectureParser,
        TemplateId::AnswerCombiner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Solver => "solver",
            TemplateId::SolverEngineered => "solver_engineered",
            TemplateId::GraderCouncil => "grader_council",
            TemplateId::GraderSimplified => "grader_simplified",
            TemplateId::ConjectureExtractor => "conjecture_extractor",
            TemplateId::SolutionParser => "solution_parser",
            TemplateId::AnswerProcessor => "answer_processor",
            TemplateId::ConjectureParser => "conjecture_parser",
            TemplateId::AnswerCombiner => "answer_combiner",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateId::Solver => include_str!("../../templates/solver.md"),
            TemplateId::SolverEngineered => include_str!("../../templates/solver_engineered.md"),
            TemplateId::GraderCouncil => include_str!("../../templates/grader_council.md"),
            TemplateId::GraderSimplified => include_str!("../../templates/grader_simplified.md"),
            TemplateId::ConjectureExtractor => include_str!("../../templates/conjecture_extractor.md"),
            TemplateId::SolutionParser => include_str!("../../templates/solution_parser.md"),
            TemplateId::AnswerProcessor => include_str!("../../templates/answer_processor.md"),
            TemplateId::ConjectureParser => include_str!("../../templates/conjecture_parser.md"),
            TemplateId::AnswerCombiner => include_str!("../../templates/answer_combiner.md"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, Deserialize)]
struct ManifestEntry {
    file: String,
    required: Vec<String>,
    #[serde(default)]
    optional: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
struct Manifest {
    version: String,
    #[serde(flatten)]
    entries: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    id: TemplateId,
    body: String,
    required: BTreeSet<String>,
    optional: BTreeSet<String>,
}

impl Template {
    /// Checks that every declared slot occurs in the body and every slot in
    /// the body is declared.
    pub fn new(
        id: TemplateId,
        body: impl Into<String>,
        required: impl IntoIterator<Item = impl Into<String>>,
        optional: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, PromptError> {
        let template = Template {
            id,
            body: body.into(),
            required: required.into_iter().map(Into::into).collect(),
            optional: optional.into_iter().map(Into::into).collect(),
        };
        let invalid = |message: String| PromptError::Invalid {
            id: id.to_string(),
            message,
        };
        let used: BTreeSet<String> = slot_names(&template.body).map(str::to_string).collect();
        for name in template.required.iter().chain(&template.optional) {
            if !used.contains(name) {
                return Err(invalid(format!("declared slot {name:?} does not appear in the body")));
            }
        }
        for name in &used {
            if !template.required.contains(name) && !template.optional.contains(name) {
                return Err(invalid(format!("slot {name:?} appears in the body but is not declared")));
            }
        }
        if let Some(both) = template.required.intersection(&template.optional).next() {
            return Err(invalid(format!("slot {both:?} is both required and optional")));
        }
        Ok(template)
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn required(&self) -> &BTreeSet<String> {
        &self.required
    }

    pub fn optional(&self) -> &BTreeSet<String> {
        &self.optional
    }

    /// Substitutes slots in one pass; substituted text is never rescanned.
    pub fn render(&self, slots: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut values: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, value) in slots {
            if !self.required.contains(*name) && !self.optional.contains(*name) {
                return Err(PromptError::UnknownSlot(name.to_string()));
            }
            values.insert(name, value);
        }
        if let Some(missing) = self.required.iter().find(|n| !values.contains_key(n.as_str())) {
            return Err(PromptError::MissingSlot(missing.clone()));
        }

        let mut out = String::with_capacity(self.body.len() + slots.iter().map(|s| s.1.len()).sum::<usize>());
        let mut rest = self.body.as_str();
        while let Some((before, name, after)) = next_slot(rest) {
            out.push_str(before);
            let value = values.get(name).copied().unwrap_or("");
            if value.is_empty() && self.optional.contains(name) {
                out.push_str(NONE_PROVIDED);
            } else {
                out.push_str(value);
            }
            rest = after;
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// Splits at the first well-formed slot marker.
fn next_slot(text: &str) -> Option<(&str, &str, &str)> {
    let mut offset = 0;
    while let Some(start) = text[offset..].find(OPEN) {
        let start = offset + start;
        let name_start = start + OPEN.len();
        if let Some(len) = text[name_start..].find(CLOSE) {
            let name = &text[name_start..name_start + len];
            if !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
                return Some((&text[..start], name, &text[name_start + len + CLOSE.len()..]));
            }
        }
        offset = name_start;
    }
    None
}

fn slot_names(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        let (_, name, after) = next_slot(rest)?;
        rest = after;
        Some(name)
    })
}

/// The set of templates used by a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    version: String,
    templates: BTreeMap<TemplateId, Template>,
    overridden: BTreeSet<TemplateId>,
}

impl Registry {
    /// The templates shipped with the crate.
    pub fn builtin() -> Self {
        let manifest: Manifest = toml::from_str(MANIFEST).expect("bundled manifest parses");
        let mut templates = BTreeMap::new();
        for id in TemplateId::ALL {
            let entry = manifest
                .entries
                .get(id.as_str())
                .unwrap_or_else(|| panic!("bundled manifest lacks {id}"));
            assert_eq!(entry.file, format!("{id}.md"), "bundled manifest file name");
            let template = Template::new(id, id.builtin_body(), entry.required.clone(), entry.optional.clone())
                .unwrap_or_else(|e| panic!("bundled template {id} is invalid: {e}"));
            templates.insert(id, template);
        }
        Registry {
            version: manifest.version,
            templates,
            overridden: BTreeSet::new(),
        }
    }

    /// Replaces one template's body. Its slot declarations stay as in the
    /// manifest, so the new body must use exactly the same slots.
    pub fn override_body(&mut self, id: TemplateId, body: impl Into<String>) -> Result<(), PromptError> {
        let current = &self.templates[&id];
        let template = Template::new(id, body, current.required.clone(), current.optional.clone())?;
        self.templates.insert(id, template);
        self.overridden.insert(id);
        Ok(())
    }

    /// Applies every `<template_id>.md` found in `dir` as an override.
    pub fn with_overrides_from(mut self, dir: &Path) -> Result<Self, PromptError> {
        for id in TemplateId::ALL {
            let path = dir.join(format!("{id}.md"));
            if !path.exists() {
                continue;
            }
            let body = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            self.override_body(id, body)?;
        }
        Ok(self)
    }

    /// Manifest version, suffixed with a digest of any overridden bodies.
    pub fn version(&self) -> String {
        if self.overridden.is_empty() {
            return self.version.clone();
        }
        let bodies: String = self
            .overridden
            .iter()
            .map(|id| format!("{id}\n{}\n", self.templates[id].body))
            .collect();
        format!("{}+custom.{}", self.version, crate::types::digest(&bodies))
    }

    pub fn get(&self, id: TemplateId) -> &Template {
        &self.templates[&id]
    }

    pub fn render(&self, id: TemplateId, slots: &[(&str, &str)]) -> Result<String, PromptError> {
        self.get(id).render(slots)
    }
}

impl Default for Registry {
    fn default() -> Self {
        Registry::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtin_templates_load() {
        let r = Registry::builtin();
        assert_eq!(r.version(), "2025.12-v4");
        for id in TemplateId::ALL {
            assert!(!r.get(id).body().is_empty());
            assert_eq!(id.as_str().parse::<TemplateId>().unwrap(), id);
        }
    }

    #[test]
    fn solver_with_empty_materials() {
        let out = Registry::builtin()
            .render(TemplateId::Solver, &[("problem", "P"), ("additional_materials", "")])
            .unwrap();
        assert!(out.contains("**The Problem:** P\n"));
        assert!(out.contains("**Additional Materials:** (none provided)"));
        assert!(!out.contains(OPEN));
    }

    #[test]
    fn combiner_takes_all_four() {
        let out = Registry::builtin()
            .render(
                TemplateId::AnswerCombiner,
                &[
                    ("problem", "PROBLEM-TEXT"),
                    ("solution_a", "FIRST-SOLUTION"),
                    ("solution_b", "SECOND-SOLUTION"),
                    ("additional_materials", "HISTORY"),
                ],
            )
            .unwrap();
        for s in ["PROBLEM-TEXT", "FIRST-SOLUTION", "SECOND-SOLUTION", "HISTORY"] {
            assert_eq!(out.matches(s).count(), 1, "{s}");
        }
        assert!(out.find("FIRST-SOLUTION") < out.find("SECOND-SOLUTION"));
    }

    #[test]
    fn missing_and_unknown_slots() {
        let r = Registry::builtin();
        assert_eq!(
            r.render(TemplateId::GraderSimplified, &[]),
            Err(PromptError::MissingSlot("problem".into()))
        );
        assert_eq!(
            r.render(TemplateId::Solver, &[("problem", "p"), ("config_overrides", "x")]),
            Err(PromptError::UnknownSlot("config_overrides".into()))
        );
    }

    #[test]
    fn values_are_not_rescanned() {
        let out = Registry::builtin()
            .render(TemplateId::AnswerProcessor, &[("solution", "uses {{@problem}} literally")])
            .unwrap();
        assert!(out.contains("uses {{@problem}} literally"));
    }

    #[test]
    fn overrides_must_keep_slots() {
        let mut r = Registry::builtin();
        assert!(r.override_body(TemplateId::AnswerProcessor, "no slot here").is_err());
        r.override_body(TemplateId::AnswerProcessor, "Check:\n{{@solution}}").unwrap();
        assert_eq!(r.render(TemplateId::AnswerProcessor, &[("solution", "s")]).unwrap(), "Check:\ns");
        assert!(r.version().starts_with("2025.12-v4+custom."));
    }

    #[test]
    fn overrides_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("answer_processor.md"), "Look at {{@solution}} now").unwrap();
        let r = Registry::builtin().with_overrides_from(dir.path()).unwrap();
        assert_eq!(r.render(TemplateId::AnswerProcessor, &[("solution", "x")]).unwrap(), "Look at x now");
        assert_eq!(r.get(TemplateId::Solver), Registry::builtin().get(TemplateId::Solver));
    }

    #[test]
    fn undeclared_body_slot_is_rejected() {
        assert!(Template::new(TemplateId::Solver, "{{@problem}} {{@extra}}", ["problem"], Vec::<String>::new()).is_err());
    }

    proptest! {
        #[test]
        fn rendered_values_are_recoverable(problem in "[^{}]{1,40}", solution in "[^{}]{1,40}") {
            let r = Registry::builtin();
            let out = r
                .render(TemplateId::GraderSimplified, &[("problem", &problem), ("solution", &solution)])
                .unwrap();
            let body = r.get(TemplateId::GraderSimplified).body();
            let (pre, rest) = body.split_once("{{@problem}}").unwrap();
            let (mid, _) = rest.split_once("{{@solution}}").unwrap();
            prop_assert!(out.starts_with(pre));
            let after_pre = &out[pre.len()..];
            prop_assert!(after_pre.starts_with(problem.as_str()));
            let after_problem = &after_pre[problem.len()..];
            prop_assert!(after_problem.starts_with(mid));
            prop_assert!(after_problem[mid.len()..].starts_with(solution.as_str()));
            prop_assert_eq!(&out, &r.render(TemplateId::GraderSimplified, &[("problem", &problem), ("solution", &solution)]).unwrap());
        }
    }
}
