//! Problem and configuration files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use proofloop::gateway::http::{HttpBackend, HttpConfig};
use proofloop::gateway::ledger::PriceTable;
use proofloop::gateway::scripted::{Script, ScriptedBackend};
use proofloop::gateway::{Backend, Gateway, RetryPolicy};
use proofloop::prompts::Registry;
use proofloop::scenarios::demo_prices;
use proofloop::types::{PipelineConfig, Problem};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Script path, relative to the config file.
    Scripted { script: PathBuf },
    Http(HttpConfig),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub backend: Option<BackendSpec>,
    #[serde(default)]
    pub prices: Option<PriceTable>,
    /// Directory of template overrides, relative to the config file.
    pub templates: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub retries: Option<u32>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn relative_to(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(path)
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<CliConfig, CliError> {
        let mut config: CliConfig = toml::from_str(&read(path)?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if let Some(BackendSpec::Scripted { script }) = &mut config.backend {
            *script = relative_to(path, script);
        }
        if let Some(dir) = &mut config.templates {
            *dir = relative_to(path, dir);
        }
        if let Some(dir) = &mut config.output_dir {
            *dir = relative_to(path, dir);
        }
        Ok(config)
    }

    pub fn registry(&self) -> Result<Registry, CliError> {
        match &self.templates {
            Some(dir) => Registry::builtin()
                .with_overrides_from(dir)
                .map_err(|e| CliError::Usage(e.to_string())),
            None => Ok(Registry::builtin()),
        }
    }
}

pub fn load_problem(path: &Path) -> Result<Problem, CliError> {
    let problem: Problem =
        toml::from_str(&read(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    problem
        .validate()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(problem)
}

/// A backend ready to use plus what the trace header records about it.
pub struct BuiltBackend {
    pub backend: Arc<dyn Backend>,
    pub setup: serde_json::Value,
    pub prices: PriceTable,
}

pub fn load_script(path: &Path) -> Result<Script, CliError> {
    Script::load(path).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn scripted(script: Script, prices: Option<PriceTable>) -> BuiltBackend {
    let setup = serde_json::json!({ "kind": "scripted", "script": script, "digest": script.digest() });
    BuiltBackend {
        backend: Arc::new(ScriptedBackend::new(script)),
        setup,
        prices: prices.unwrap_or_else(demo_prices),
    }
}

pub fn http(config: HttpConfig, prices: Option<PriceTable>) -> Result<BuiltBackend, CliError> {
    let prices = prices.ok_or_else(|| CliError::Usage("an http backend needs a [prices] table".into()))?;
    let setup = serde_json::json!({ "kind": "http", "config": config });
    let backend = HttpBackend::new(config).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(BuiltBackend {
        backend: Arc::new(backend),
        setup,
        prices,
    })
}

pub fn build_backend(spec: &BackendSpec, prices: Option<PriceTable>) -> Result<BuiltBackend, CliError> {
    match spec {
        BackendSpec::Scripted { script } => Ok(scripted(load_script(script)?, prices)),
        BackendSpec::Http(config) => http(config.clone(), prices),
    }
}

/// Rebuilds the backend recorded in a trace header.
pub fn backend_from_setup(setup: &serde_json::Value, prices: PriceTable) -> Result<BuiltBackend, CliError> {
    match setup["kind"].as_str() {
        Some("scripted") => {
            let script: Script = serde_json::from_value(setup["script"].clone())
                .map_err(|e| CliError::Usage(format!("trace header script: {e}")))?;
            Ok(scripted(script, Some(prices)))
        }
        Some("http") => {
            let config: HttpConfig = serde_json::from_value(setup["config"].clone())
                .map_err(|e| CliError::Usage(format!("trace header backend: {e}")))?;
            http(config, Some(prices))
        }
        other => Err(CliError::Usage(format!("trace header names unknown backend kind {other:?}"))),
    }
}

pub fn gateway(built: &BuiltBackend, config: &PipelineConfig, retries: u32) -> Result<Gateway, CliError> {
    let id = built.backend.id().to_string();
    Gateway::builder(built.prices.clone(), config.token_budget)
        .backend(id.clone(), built.backend.clone())
        .default_backend(id)
        .retry(RetryPolicy::immediate(retries))
        .strict(config.strict_budget)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))
}
