//! Deterministic scripted backend.
//!
//! A [`Script`] is an ordered list of [`Rule`]s. For each request the first
//! rule whose filters all match answers it, with the reply under that rule's
//! cursor; the cursor then advances. Matching depends only on the request
//! and the cursor state, so the same script fed the same request sequence
//! always yields the same replies.
//!
//! Scripts can be loaded from JSON or TOML:
//!
//! ```toml
//! [[rules]]
//! role = "grader"
//! contains = ["ESCAPE"]
//! replies = [{ text = "Final Grade: 7/7", input_tokens = 100, output_tokens = 50 }]
//! ```

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{estimate_tokens, Backend, BackendError, BackendReply, ModelRequest, ModelRole, Usage};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exhausted {
    /// Keep answering with the last reply.
    #[default]
    RepeatLast,
    Cycle,
    /// Fail with a fatal error once the replies run out.
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailKind {
    Transient,
    Fatal,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    #[serde(default)]
    pub text: String,
    /// Defaults to an estimate from the prompt length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    /// Defaults to an estimate from the reply length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
    #[serde(default)]
    pub thinking_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<FailKind>,
}

impl Reply {
    pub fn text(text: impl Into<String>) -> Self {
        Reply {
            text: text.into(),
            ..Reply::default()
        }
    }

    pub fn transient(message: impl Into<String>) -> Self {
        Reply {
            text: message.into(),
            fail: Some(FailKind::Transient),
            ..Reply::default()
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Reply {
            text: message.into(),
            fail: Some(FailKind::Fatal),
            ..Reply::default()
        }
    }

    pub fn usage(mut self, input: u64, output: u64) -> Self {
        self.input_tokens = Some(input);
        self.output_tokens = Some(output);
        self
    }

    pub fn thinking(mut self, tokens: u64) -> Self {
        self.thinking_tokens = tokens;
        self
    }

    fn input_for(&self, request: &ModelRequest) -> u64 {
        self.input_tokens.unwrap_or_else(|| estimate_tokens(&request.prompt))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<ModelRole>,
    /// Every string must occur in the prompt.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// None of these may occur in the prompt.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub not_contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane_prefix: Option<String>,
    pub replies: Vec<Reply>,
    #[serde(default)]
    pub on_exhausted: Exhausted,
}

impl Rule {
    pub fn any() -> Self {
        Rule::default()
    }

    pub fn role(role: ModelRole) -> Self {
        Rule {
            role: Some(role),
            ..Rule::default()
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn contains(mut self, needle: impl Into<String>) -> Self {
        self.contains.push(needle.into());
        self
    }

    pub fn not_contains(mut self, needle: impl Into<String>) -> Self {
        self.not_contains.push(needle.into());
        self
    }

    pub fn lane(mut self, prefix: impl Into<String>) -> Self {
        self.lane_prefix = Some(prefix.into());
        self
    }

    pub fn reply(mut self, reply: Reply) -> Self {
        self.replies.push(reply);
        self
    }

    pub fn replies(mut self, replies: impl IntoIterator<Item = Reply>) -> Self {
        self.replies.extend(replies);
        self
    }

    pub fn on_exhausted(mut self, mode: Exhausted) -> Self {
        self.on_exhausted = mode;
        self
    }

    fn matches(&self, request: &ModelRequest) -> bool {
        self.role.is_none_or(|r| r == request.role)
            && self.lane_prefix.as_deref().is_none_or(|p| request.lane.starts_with(p))
            && self.contains.iter().all(|c| request.prompt.contains(c.as_str()))
            && !self.not_contains.iter().any(|c| request.prompt.contains(c.as_str()))
    }

    fn pick(&self, cursor: usize) -> Option<&Reply> {
        if self.replies.is_empty() {
            return None;
        }
        if cursor < self.replies.len() {
            return self.replies.get(cursor);
        }
        match self.on_exhausted {
            Exhausted::RepeatLast => self.replies.last(),
            Exhausted::Cycle => self.replies.get(cursor % self.replies.len()),
            Exhausted::Fail => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default = "default_backend_id")]
    pub backend_id: String,
    #[serde(default)]
    pub rules: Vec<Rule>,
}

fn default_backend_id() -> String {
    "scripted".to_string()
}

impl Default for Script {
    fn default() -> Self {
        Script::new()
    }
}

impl Script {
    pub fn new() -> Self {
        Script {
            backend_id: default_backend_id(),
            rules: Vec::new(),
        }
    }

    pub fn with_backend_id(mut self, id: impl Into<String>) -> Self {
        self.backend_id = id.into();
        self
    }

    pub fn rule(mut self, rule: Rule) -> Self {
        self.rules.push(rule);
        self
    }

    /// Loads a script from a `.json` or `.toml` file.
    pub fn load(path: &Path) -> Result<Script, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Fatal(format!("reading script {}: {e}", path.display())))?;
        Script::parse(&text, path.extension().and_then(|e| e.to_str()).unwrap_or("json"))
    }

    pub fn parse(text: &str, format: &str) -> Result<Script, BackendError> {
        let script: Script = match format {
            "toml" => toml::from_str(text).map_err(|e| BackendError::Fatal(format!("script: {e}")))?,
            _ => serde_json::from_str(text).map_err(|e| BackendError::Fatal(format!("script: {e}")))?,
        };
        for (i, rule) in script.rules.iter().enumerate() {
            if rule.replies.is_empty() {
                return Err(BackendError::Fatal(format!("script rule {i} has no replies")));
            }
        }
        Ok(script)
    }

    /// Stable digest of the script, recorded in run traces.
    pub fn digest(&self) -> String {
        crate::types::digest(&serde_json::to_string(self).expect("script serializes"))
    }
}

#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    cursors: Mutex<Vec<usize>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let cursors = vec![0; script.rules.len()];
        ScriptedBackend {
            script,
            cursors: Mutex::new(cursors),
        }
    }

    pub fn script(&self) -> &Script {
        &self.script
    }

    fn lookup(&self, request: &ModelRequest, cursors: &[usize]) -> Option<(usize, Option<&Reply>)> {
        self.script
            .rules
            .iter()
            .enumerate()
            .find(|(_, rule)| rule.matches(request))
            .map(|(i, rule)| (i, rule.pick(cursors[i])))
    }

    fn cursors(&self) -> std::sync::MutexGuard<'_, Vec<usize>> {
        self.cursors.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.script.backend_id
    }

    fn complete(&self, request: &ModelRequest) -> Result<BackendReply, BackendError> {
        let mut cursors = self.cursors();
        let (index, reply) = self.lookup(request, &cursors).ok_or_else(|| {
            BackendError::Fatal(format!(
                "no scripted rule matches {} request on lane {}",
                request.role, request.lane
            ))
        })?;
        cursors[index] += 1;
        let reply = reply.ok_or_else(|| {
            BackendError::Fatal(format!("scripted rule {index} has no replies left"))
        })?;
        match reply.fail {
            Some(FailKind::Transient) => return Err(BackendError::Transient(reply.text.clone())),
            Some(FailKind::Fatal) => return Err(BackendError::Fatal(reply.text.clone())),
            None => {}
        }
        let output = reply
            .output_tokens
            .unwrap_or_else(|| estimate_tokens(&reply.text))
            .min(request.max_output_tokens);
        Ok(BackendReply {
            text: reply.text.clone(),
            usage: Usage {
                input_tokens: reply.input_for(request),
                output_tokens: output,
                thinking_tokens: reply.thinking_tokens,
            },
        })
    }

    fn estimate_input_tokens(&self, request: &ModelRequest) -> u64 {
        let cursors = self.cursors();
        match self.lookup(request, &cursors) {
            Some((_, Some(reply))) => reply.input_for(request),
            _ => estimate_tokens(&request.prompt),
        }
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn snapshot(&self) -> Option<serde_json::Value> {
        Some(serde_json::json!({ "cursors": *self.cursors() }))
    }

    fn restore(&self, state: &serde_json::Value) -> Result<(), BackendError> {
        let restored: Vec<usize> = state
            .get("cursors")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| BackendError::Fatal(format!("bad cursor snapshot: {e}")))?
            .ok_or_else(|| BackendError::Fatal("cursor snapshot missing".into()))?;
        if restored.len() != self.script.rules.len() {
            return Err(BackendError::Fatal(format!(
                "cursor snapshot has {} entries, script has {} rules",
                restored.len(),
                self.script.rules.len()
            )));
        }
        *self.cursors() = restored;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(role: ModelRole, prompt: &str, lane: &str) -> ModelRequest {
        ModelRequest {
            role,
            prompt: prompt.into(),
            temperature: 0.1,
            max_output_tokens: 100,
            run_id: "r".into(),
            lane: lane.into(),
        }
    }

    #[test]
    fn first_matching_rule_wins() {
        let backend = ScriptedBackend::new(
            Script::new()
                .rule(Rule::role(ModelRole::Grader).contains("GOOD").reply(Reply::text("7")))
                .rule(Rule::role(ModelRole::Grader).reply(Reply::text("2"))),
        );
        assert_eq!(backend.complete(&req(ModelRole::Grader, "a GOOD proof", "x")).unwrap().text, "7");
        assert_eq!(backend.complete(&req(ModelRole::Grader, "a bad proof", "x")).unwrap().text, "2");
        assert!(backend.complete(&req(ModelRole::Solver, "a", "x")).is_err());
    }

    #[test]
    fn not_contains_and_lane_filters() {
        let backend = ScriptedBackend::new(
            Script::new()
                .rule(Rule::any().lane("r1/").reply(Reply::text("lane one")))
                .rule(Rule::any().not_contains("skip").reply(Reply::text("plain")))
                .rule(Rule::any().reply(Reply::text("fallback"))),
        );
        assert_eq!(backend.complete(&req(ModelRole::Solver, "skip", "r1/b0")).unwrap().text, "lane one");
        assert_eq!(backend.complete(&req(ModelRole::Solver, "go", "r0/b0")).unwrap().text, "plain");
        assert_eq!(backend.complete(&req(ModelRole::Solver, "skip", "r0/b0")).unwrap().text, "fallback");
    }

    #[test]
    fn exhaustion_modes() {
        let rule = |mode| {
            ScriptedBackend::new(Script::new().rule(
                Rule::any().reply(Reply::text("a")).reply(Reply::text("b")).on_exhausted(mode),
            ))
        };
        let r = req(ModelRole::Solver, "p", "l");
        let texts = |b: &ScriptedBackend| -> Vec<String> {
            (0..4).map(|_| b.complete(&r).map(|x| x.text).unwrap_or_else(|_| "ERR".into())).collect()
        };
        assert_eq!(texts(&rule(Exhausted::RepeatLast)), ["a", "b", "b", "b"]);
        assert_eq!(texts(&rule(Exhausted::Cycle)), ["a", "b", "a", "b"]);
        assert_eq!(texts(&rule(Exhausted::Fail)), ["a", "b", "ERR", "ERR"]);
    }

    #[test]
    fn snapshot_restores_cursors() {
        let script = Script::new().rule(Rule::any().replies((0..5).map(|i| Reply::text(i.to_string()))));
        let backend = ScriptedBackend::new(script);
        let r = req(ModelRole::Solver, "p", "l");
        backend.complete(&r).unwrap();
        let snap = backend.snapshot().unwrap();
        let after: Vec<_> = (0..3).map(|_| backend.complete(&r).unwrap().text).collect();
        backend.restore(&snap).unwrap();
        let again: Vec<_> = (0..3).map(|_| backend.complete(&r).unwrap().text).collect();
        assert_eq!(after, again);
        assert!(backend.restore(&serde_json::json!({"cursors": [0, 0]})).is_err());
    }

    #[test]
    fn scripts_load_from_toml_and_json() {
        let toml_text = r#"
            [[rules]]
            role = "grader"
            contains = ["ESCAPE"]
            replies = [{ text = "Final Grade: 7/7", input_tokens = 100, output_tokens = 50 }]
        "#;
        let script = Script::parse(toml_text, "toml").unwrap();
        assert_eq!(script.rules[0].role, Some(ModelRole::Grader));
        let json = serde_json::to_string(&script).unwrap();
        assert_eq!(Script::parse(&json, "json").unwrap(), script);
        assert!(Script::parse("[[rules]]\nreplies = []\n", "toml").is_err());
    }

    #[test]
    fn output_tokens_are_capped_at_request_max() {
        let backend = ScriptedBackend::new(Script::new().rule(Rule::any().reply(Reply::text("x").usage(1, 10_000))));
        let reply = backend.complete(&req(ModelRole::Solver, "p", "l")).unwrap();
        assert_eq!(reply.usage.output_tokens, 100);
    }
}
