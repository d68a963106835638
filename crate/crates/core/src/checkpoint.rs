//! `checkpoint.json`: parameters plus the configuration and seed state that
//! produced them.
//!
//! Parameter values are written as decimals with 17 significant digits so a
//! reload is bit-identical; the file text is a pure function of the
//! checkpoint, which keeps reruns byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{fmt_f64, read_to_string, write_new};
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, PolicyShape};

pub const VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedState {
    pub master_seed: u64,
    /// Pipeline stage that produced the parameters.
    pub stage: String,
    /// Optimiser steps taken within that stage.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub seed_state: SeedState,
    pub params: PolicyParams,
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse {
        what: "checkpoint".into(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{{\"version\":{VERSION},\"config\":"));
        out.push_str(&serde_json::to_string(&self.config).expect("config serialises"));
        out.push_str(",\"seed_state\":");
        out.push_str(&serde_json::to_string(&self.seed_state).expect("seed state serialises"));
        out.push_str(",\"params\":{");
        for (i, (name, [rows, cols])) in self.params.shape.blocks().iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("\"{name}\":{{\"shape\":[{rows},{cols}],\"data\":["));
            for (k, &v) in self.params.block(name).expect("known block").iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                fmt_f64(&mut out, v);
            }
            out.push_str("]}");
        }
        out.push_str("}}\n");
        out
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let root: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let obj = root.as_object().ok_or_else(|| parse_err("top level is not an object"))?;
        for key in obj.keys() {
            if !["version", "config", "seed_state", "params"].contains(&key.as_str()) {
                return Err(parse_err(format!("unknown key {key:?}")));
            }
        }
        match obj.get("version").and_then(|v| v.as_u64()) {
            Some(VERSION) => {}
            other => return Err(parse_err(format!("unsupported version {other:?}"))),
        }
        let config = obj.get("config").cloned().ok_or_else(|| parse_err("missing config"))?;
        let seed_state: SeedState = serde_json::from_value(
            obj.get("seed_state").cloned().ok_or_else(|| parse_err("missing seed_state"))?,
        )
        .map_err(|e| parse_err(e.to_string()))?;
        let params = obj
            .get("params")
            .and_then(|p| p.as_object())
            .ok_or_else(|| parse_err("missing params"))?;

        let dims = |name: &str| -> Result<[usize; 2]> {
            let shape = params
                .get(name)
                .and_then(|b| b.get("shape"))
                .and_then(|s| s.as_array())
                .ok_or_else(|| parse_err(format!("missing shape for {name}")))?;
            match shape.as_slice() {
                [r, c] => Ok([
                    r.as_u64().ok_or_else(|| parse_err("bad shape"))? as usize,
                    c.as_u64().ok_or_else(|| parse_err("bad shape"))? as usize,
                ]),
                _ => Err(parse_err(format!("shape of {name} must have two entries"))),
            }
        };
        let [vocab, embed] = dims("embed")?;
        let [input, hidden] = dims("w1")?;
        if embed == 0 || input % embed != 0 || input / embed < 2 {
            return Err(parse_err("w1 rows must be a multiple of the embedding width"));
        }
        let shape = PolicyShape {
            vocab,
            embed,
            window: input / embed - 1,
            hidden,
        };
        let mut out = PolicyParams::zeros(shape);
        if params.len() != shape.blocks().len() {
            return Err(parse_err("unexpected parameter blocks"));
        }
        for (name, expected) in shape.blocks() {
            if dims(name)? != expected {
                return Err(parse_err(format!("shape of {name} is inconsistent")));
            }
            let data = params[name]
                .get("data")
                .and_then(|d| d.as_array())
                .ok_or_else(|| parse_err(format!("missing data for {name}")))?;
            let slot = out.block_mut(name).expect("known block");
            if data.len() != slot.len() {
                return Err(parse_err(format!("{name} has {} values, expected {}", data.len(), slot.len())));
            }
            for (dst, v) in slot.iter_mut().zip(data) {
                *dst = v
                    .as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(format!("non-finite or non-numeric value in {name}")))?;
            }
        }
        Ok(Checkpoint {
            config,
            seed_state,
            params: out,
        })
    }

    pub fn save(&self, path: &Path, force: bool) -> Result<()> {
        if !self.params.all_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        write_new(path, self.to_json().as_bytes(), force)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::rng;

    #[test]
    fn reload_is_bit_exact() {
        let shape = PolicyConfig::default().shape(20);
        let mut params = PolicyParams::init(shape, 0.08, &mut rng::stream(1, &[0]));
        params.data[0] = 1.0 / 3.0;
        params.data[1] = -2.5e-300;
        params.data[2] = 0.0;
        let ck = Checkpoint {
            config: serde_json::json!({"policy": {"hidden": 64}}),
            seed_state: SeedState {
                master_seed: 7,
                stage: "sft".into(),
                step: 3,
            },
            params,
        };
        let text = ck.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json(), text);
        assert!(text.starts_with("{\"version\":1,\"config\":"));
    }

    #[test]
    fn rejects_bad_files() {
        assert!(Checkpoint::from_json("{}").is_err());
        assert!(Checkpoint::from_json(r#"{"version":2,"config":{},"seed_state":{"master_seed":1,"stage":"x","step":0},"params":{}}"#).is_err());
    }
}
