//! Run configuration: one JSON document holding every hyperparameter, with
//! defaults for missing keys and errors for unknown ones.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::artifact::read_to_string;
use crate::coldstart::ColdStartConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::grpo::RlConfig;
use crate::oracles::{OracleConfig, RemoteJudgeConfig};
use crate::policy::{DecodeConfig, PolicyConfig};
use crate::prefworld::WorldConfig;

/// Artifacts consumed by a stage. Unset entries fall back to the matching
/// file from an earlier stage under `out_dir`, when present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub episodes: Option<PathBuf>,
    pub test_episodes: Option<PathBuf>,
    pub probe_episodes: Option<PathBuf>,
    pub cold: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub eval_report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; `None` uses every core. Results do not depend on it.
    pub workers: Option<usize>,
    pub world: WorldConfig,
    pub policy: PolicyConfig,
    pub decode: DecodeConfig,
    pub coldstart: ColdStartConfig,
    pub rl: RlConfig,
    pub oracle: OracleConfig,
    pub eval: EvalConfig,
    pub judge: RemoteJudgeConfig,
    pub inputs: Inputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            workers: None,
            world: WorldConfig::default(),
            policy: PolicyConfig::default(),
            decode: DecodeConfig::default(),
            coldstart: ColdStartConfig::default(),
            rl: RlConfig::default(),
            oracle: OracleConfig::default(),
            eval: EvalConfig::default(),
            judge: RemoteJudgeConfig::default(),
            inputs: Inputs::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, what: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: what.into(),
            msg: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.policy.validate()?;
        self.decode.validate()?;
        self.coldstart.validate()?;
        self.rl.validate()?;
        self.oracle.validate()?;
        self.eval.validate()?;
        if self.workers == Some(0) {
            return Err(Error::invalid("workers must be positive"));
        }
        if self.judge.timeout_ms == 0 || self.judge.max_in_flight == 0 {
            return Err(Error::invalid("judge.timeout_ms and judge.max_in_flight must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    /// SHA-256 of the experiment-defining part of the configuration: every
    /// key except `out_dir`, `workers` and `inputs`.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        let obj = v.as_object_mut().expect("object");
        for key in ["out_dir", "workers", "inputs"] {
            obj.remove(key);
        }
        let digest = Sha256::digest(serde_json::to_string(&v).expect("value serialises").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every configuration key with its default, one per line.
    pub fn help_text() -> String {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
            match v {
                Value::Object(map) if !map.is_empty() => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                other => out.push(format!("  {prefix} = {other}")),
            }
        }
        let mut lines = Vec::new();
        walk("", &serde_json::to_value(RunConfig::default()).expect("config serialises"), &mut lines);
        format!("Configuration keys (defaults):\n{}\n", lines.join("\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}", "t").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_json(r#"{"rl": {"stpes": 3}}"#, "t").unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("stpes"));
        assert!(RunConfig::from_json(r#"{"sed": 3}"#, "t").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"world": {"dims": 2, "active": 3}}"#, "t").is_err());
        assert!(RunConfig::from_json(r#"{"decode": {"temperature": 0}}"#, "t").is_err());
        assert!(RunConfig::from_json(r#"{"workers": 0}"#, "t").is_err());
    }

    #[test]
    fn round_trip_and_hash() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json(), "t").unwrap();
        assert_eq!(back, c);
        let moved = RunConfig {
            out_dir: "elsewhere".into(),
            workers: Some(2),
            ..c.clone()
        };
        assert_eq!(moved.config_hash(), c.config_hash());
        let reseeded = RunConfig { seed: 8, ..c.clone() };
        assert_ne!(reseeded.config_hash(), c.config_hash());
    }

    #[test]
    fn help_lists_nested_keys() {
        let h = RunConfig::help_text();
        for key in ["seed = 7", "world.dims = 8", "rl.optim.lr", "decode.top_k = 10", "judge.timeout_ms = 5000", "inputs.checkpoint = null"] {
            assert!(h.contains(key), "{key}");
        }
    }
}
