//! Run configuration: one JSON file, overridden field by field from the command line.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use eecm_core::characterization::FitConfig;
use eecm_core::pipeline::PipelineConfig;
use eecm_core::{Electrode, ParamPack};
use serde::Deserialize;

pub const DEFAULT_OUTPUT_DIR: &str = "eecm-out";

/// Marks failures caused by configuration rather than data (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Relative paths inside a config file are taken relative to that file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Parameter pack JSON; the built-in LG M50 pack when absent.
    pub pack: Option<PathBuf>,
    /// Scenario JSON for synthetic runs (an HPPC schedule for `fit`).
    pub scenario: Option<PathBuf>,
    /// Recorded CSV input.
    pub input: Option<PathBuf>,
    /// Truth sidecar matching `input`, used only for plots.
    pub truth: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub plots: bool,
    pub pipeline: PipelineConfig,
    /// Electrode of a recorded HPPC input.
    pub electrode: Option<Electrode>,
    pub fit: FitConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.pack,
            &mut cfg.scenario,
            &mut cfg.input,
            &mut cfg.truth,
            &mut cfg.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn load_pack(&self) -> Result<ParamPack> {
        match &self.pack {
            Some(p) => ParamPack::load(p).map_err(|e| config_error(e.to_string())),
            None => Ok(ParamPack::lg_m50()),
        }
    }

    /// Checks that exactly one of scenario/input is set (or the allowed
    /// subset) and that every path given exists.
    pub fn require_source(&self, scenario_ok: bool, input_ok: bool) -> Result<Source> {
        let source = match (&self.scenario, &self.input) {
            (Some(_), Some(_)) => {
                return Err(config_error("give either a scenario or an input, not both"))
            }
            (Some(s), None) if scenario_ok => Source::Scenario(s.clone()),
            (None, Some(i)) if input_ok => Source::Input(i.clone()),
            (Some(_), None) => return Err(config_error("this command does not take a scenario")),
            (None, Some(_)) => {
                return Err(config_error("this command does not take an input file"))
            }
            (None, None) => {
                let what = match (scenario_ok, input_ok) {
                    (true, true) => "a scenario or an input file",
                    (true, false) => "a scenario",
                    _ => "an input file",
                };
                return Err(config_error(format!("missing {what}")));
            }
        };
        for p in [&self.pack, &self.scenario, &self.input, &self.truth]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(config_error(format!("{} does not exist", p.display())));
            }
        }
        Ok(source)
    }

    pub fn create_output_dir(&self) -> Result<PathBuf> {
        let dir = self.output_dir();
        std::fs::create_dir_all(&dir).map_err(|e| {
            config_error(format!(
                "cannot create output directory {}: {e}",
                dir.display()
            ))
        })?;
        Ok(dir)
    }
}

pub enum Source {
    Scenario(PathBuf),
    Input(PathBuf),
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| config_error(format!("invalid {what} {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"scenario": "s.json", "output_dir": "/abs/out", "pipeline": {"min_pairs": 3}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.scenario.unwrap(), dir.path().join("s.json"));
        assert_eq!(cfg.output_dir.unwrap(), PathBuf::from("/abs/out"));
        assert_eq!(cfg.pipeline.min_pairs, 3);
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"senario": "s.json"}"#).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn source_must_be_unique_and_present() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("x.csv");
        std::fs::write(&file, "").unwrap();
        let both = RunConfig {
            scenario: Some(file.clone()),
            input: Some(file.clone()),
            ..Default::default()
        };
        assert!(both.require_source(true, true).is_err());
        assert!(RunConfig::default().require_source(true, true).is_err());
        let missing = RunConfig {
            input: Some(dir.path().join("nope.csv")),
            ..Default::default()
        };
        assert!(missing.require_source(false, true).is_err());
        let ok = RunConfig {
            input: Some(file),
            ..Default::default()
        };
        assert!(matches!(
            ok.require_source(false, true).unwrap(),
            Source::Input(_)
        ));
    }
}
