//! Run configuration: a JSON or TOML file merged with command-line flags.
//! Flags win over the file, the file over built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use irake_core::model::{EngineConfig, GuidancePayload};
use serde::{Deserialize, Serialize};

use crate::ExitError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backends {
    pub chat_endpoint: Option<String>,
    pub chat_model: Option<String>,
    pub embed_endpoint: Option<String>,
    pub embed_model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env_var: Option<String>,
    /// Scripted replies used instead of a chat endpoint.
    pub script: Option<PathBuf>,
    pub timeout_secs: Option<u64>,
    pub offline: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub case_library: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub engine: EngineConfig,
    pub backends: Backends,
    pub paths: Paths,
    pub seed: Option<u64>,
    pub parallel: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PayloadArg {
    Question,
    Fact,
}

/// Flags that override the config file. Every engine field has one.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON or TOML run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Case-similarity threshold for the case library
    #[arg(long, global = true)]
    pub theta: Option<f64>,
    /// Precise-retrieval threshold for edited facts
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Candidates pre-retrieved for the judge
    #[arg(long, global = true)]
    pub pre_n: Option<usize>,
    #[arg(long, global = true)]
    pub max_hops: Option<usize>,
    #[arg(long, global = true)]
    pub max_backtracks: Option<usize>,
    #[arg(long, global = true)]
    pub no_fact_guidance: bool,
    #[arg(long, global = true)]
    pub no_case_guidance: bool,
    #[arg(long, global = true)]
    pub no_backtrack: bool,
    #[arg(long, global = true, value_enum)]
    pub guidance_payload: Option<PayloadArg>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub max_tokens: Option<u32>,
    #[arg(long, global = true)]
    pub repetition_penalty: Option<f64>,
    /// Never touch the network; requires a script
    #[arg(long, global = true)]
    pub offline: bool,
    /// Scripted backend rules (JSON)
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
    #[arg(long, global = true)]
    pub chat_endpoint: Option<String>,
    #[arg(long, global = true)]
    pub chat_model: Option<String>,
    #[arg(long, global = true)]
    pub embed_endpoint: Option<String>,
    #[arg(long, global = true)]
    pub embed_model: Option<String>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub prompts_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub case_library: Option<PathBuf>,
    /// Report (eval) or trace (solve) output path
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
}

fn config_error(message: impl Into<String>) -> anyhow::Error {
    ExitError::config(message).into()
}

/// Reads a config file, resolving its relative paths against the file's
/// directory.
pub fn load_file(path: &Path) -> anyhow::Result<RunConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let mut file: RunConfigFile = if is_toml {
        toml::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?
    };
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut Option<PathBuf>| {
        if let Some(inner) = p.as_mut() {
            if inner.is_relative() {
                *inner = base.join(&*inner);
            }
        }
    };
    resolve(&mut file.backends.script);
    resolve(&mut file.paths.dataset);
    resolve(&mut file.paths.prompts_dir);
    resolve(&mut file.paths.case_library);
    resolve(&mut file.paths.report_out);
    Ok(file)
}

impl ConfigArgs {
    /// The effective configuration: defaults, then the file, then flags.
    pub fn resolve(&self) -> anyhow::Result<RunConfigFile> {
        let mut cfg = match &self.config {
            Some(path) => load_file(path)?,
            None => RunConfigFile::default(),
        };
        let engine = &mut cfg.engine;
        if let Some(v) = self.theta {
            engine.case_similarity_threshold = v;
        }
        if let Some(v) = self.tau {
            engine.precise_retrieval_threshold = v;
        }
        if let Some(v) = self.pre_n {
            engine.pre_retrieval_n = v;
        }
        if let Some(v) = self.max_hops {
            engine.max_hops = v;
        }
        if let Some(v) = self.max_backtracks {
            engine.max_backtracks = v;
        }
        if self.no_fact_guidance {
            engine.fact_guidance_enabled = false;
        }
        if self.no_case_guidance {
            engine.case_guidance_enabled = false;
        }
        if self.no_backtrack {
            engine.backtracking_enabled = false;
        }
        if let Some(p) = self.guidance_payload {
            engine.guidance_payload = match p {
                PayloadArg::Question => GuidancePayload::Question,
                PayloadArg::Fact => GuidancePayload::FactStatement,
            };
        }
        if let Some(v) = self.temperature {
            engine.llm_temperature = v;
        }
        if let Some(v) = self.max_tokens {
            engine.llm_max_tokens = v;
        }
        if self.repetition_penalty.is_some() {
            engine.repetition_penalty = self.repetition_penalty;
        }
        engine
            .validate()
            .map_err(|e| config_error(format!("invalid engine config: {e}")))?;

        let b = &mut cfg.backends;
        b.offline |= self.offline;
        overlay(&mut b.script, &self.script);
        overlay(&mut b.chat_endpoint, &self.chat_endpoint);
        overlay(&mut b.chat_model, &self.chat_model);
        overlay(&mut b.embed_endpoint, &self.embed_endpoint);
        overlay(&mut b.embed_model, &self.embed_model);
        let p = &mut cfg.paths;
        overlay(&mut p.dataset, &self.dataset);
        overlay(&mut p.prompts_dir, &self.prompts_dir);
        overlay(&mut p.case_library, &self.case_library);
        overlay(&mut p.report_out, &self.report);
        overlay(&mut cfg.seed, &self.seed);
        overlay(&mut cfg.parallel, &self.parallel);
        Ok(cfg)
    }
}

fn overlay<T: Clone>(target: &mut Option<T>, flag: &Option<T>) {
    if flag.is_some() {
        target.clone_from(flag);
    }
}

/// `paths.dataset`, or a config error naming the field.
pub fn require_dataset(cfg: &RunConfigFile) -> anyhow::Result<&Path> {
    cfg.paths
        .dataset
        .as_deref()
        .ok_or_else(|| config_error("missing dataset path: set paths.dataset in the config or pass --dataset"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[engine]\ncase_similarity_threshold = 0.7\npre_retrieval_n = 5\n\n[paths]\ndataset = \"data/cases.json\"\n",
        )
        .unwrap();
        let args = ConfigArgs {
            config: Some(path.clone()),
            theta: Some(0.9),
            ..ConfigArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.engine.case_similarity_threshold, 0.9);
        assert_eq!(cfg.engine.pre_retrieval_n, 5);
        assert_eq!(cfg.engine.max_hops, EngineConfig::default().max_hops);
        assert_eq!(cfg.paths.dataset, Some(dir.path().join("data/cases.json")));
    }

    #[test]
    fn json_config_and_ablation_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"engine": {"backtracking_enabled": true}, "backends": {"offline": true}}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            no_backtrack: true,
            guidance_payload: Some(PayloadArg::Fact),
            ..ConfigArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert!(!cfg.engine.backtracking_enabled);
        assert!(cfg.backends.offline);
        assert_eq!(cfg.engine.guidance_payload, GuidancePayload::FactStatement);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let args = ConfigArgs {
            tau: Some(1.5),
            ..ConfigArgs::default()
        };
        let err = args.resolve().unwrap_err();
        assert_eq!(err.downcast_ref::<ExitError>().unwrap().code, 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[engine]\nno_such_field = 1\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            ..ConfigArgs::default()
        };
        assert_eq!(args.resolve().unwrap_err().downcast_ref::<ExitError>().unwrap().code, 2);
    }
}
