//! Training configuration: JSON mirrors the struct field-for-field and
//! unknown keys are rejected everywhere.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::attack::AttackConfig;
use crate::data::SyntheticKind;
use crate::losses::LossSpec;
use crate::optim::{OptimizerConfig, Schedule};
use crate::{Error, Result};

/// Which dataset the run trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum DatasetSelector {
    #[serde(rename = "SYNTHETIC")]
    Synthetic {
        shape: SyntheticKind,
        n: usize,
        data_seed: u64,
    },
    #[serde(rename = "MNIST_IDX")]
    MnistIdx {
        images: String,
        labels: String,
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossSpec,
    /// Attack used to build training-time adversarial examples.
    pub attack: AttackConfig,
    /// Attack used for the per-epoch robust-accuracy metric.
    pub eval_attack: AttackConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetSelector,
    /// Hidden layer widths; input/output dims come from the dataset.
    pub hidden_dims: Vec<usize>,
    /// Epoch cadence for the metrics/diagnostics pass (1 = every epoch).
    #[serde(default = "default_diag_every")]
    pub diag_every: usize,
    /// Diagnostics are computed on a fixed subset of at most this many
    /// examples to keep per-epoch evaluation cheap.
    #[serde(default = "default_diag_subset")]
    pub diag_subset: usize,
    /// Optional curriculum on the training attack: for the first
    /// `attack_ramp_epochs` epochs the attack radius and step size grow
    /// linearly from 1/(ramp+1) of their configured values to full strength.
    /// Large radii trained from scratch otherwise drive small networks into
    /// a constant-prediction collapse. 0 disables the ramp.
    #[serde(default)]
    pub attack_ramp_epochs: usize,
}

fn default_diag_every() -> usize {
    1
}

fn default_diag_subset() -> usize {
    256
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.attack.validate()?;
        self.eval_attack.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.attack.inner_loss != self.loss.required_inner_loss() {
            return Err(Error::Config(format!(
                "training attack inner loss {:?} does not match the objective's required {:?}",
                self.attack.inner_loss,
                self.loss.required_inner_loss()
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.diag_every < 1 {
            return Err(Error::Config("diag_every must be >= 1".into()));
        }
        if self.diag_subset < 1 {
            return Err(Error::Config("diag_subset must be >= 1".into()));
        }
        match &self.dataset {
            DatasetSelector::Synthetic { n, .. } if *n < 2 => {
                Err(Error::Config("synthetic dataset needs n >= 2".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_slice(bytes)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let cfg: TrainConfig = serde_json::from_value(raw.clone())
            .map_err(|e| Error::Config(format!("bad config: {e}")))?;
        // serde cannot enforce deny_unknown_fields inside internally tagged
        // enums, so verify every input key survives a serialize round-trip
        reject_unknown_keys(&raw, &cfg.to_json_value(), "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Every key in `input` must appear at the same path in `echo` (the
/// re-serialized config). Keys serde dropped on the way in are unknown.
fn reject_unknown_keys(input: &serde_json::Value, echo: &serde_json::Value, path: &str) -> Result<()> {
    match (input, echo) {
        (serde_json::Value::Object(i), serde_json::Value::Object(e)) => {
            for (k, v) in i {
                match e.get(k) {
                    Some(ev) => reject_unknown_keys(v, ev, &format!("{path}/{k}"))?,
                    None => {
                        return Err(Error::Config(format!("unknown config key {path}/{k}")));
                    }
                }
            }
            Ok(())
        }
        (serde_json::Value::Array(i), serde_json::Value::Array(e)) if i.len() == e.len() => {
            for (n, (iv, ev)) in i.iter().zip(e).enumerate() {
                reject_unknown_keys(iv, ev, &format!("{path}/{n}"))?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn example_json() -> serde_json::Value {
        serde_json::json!({
            "loss": {"method": "BAT", "beta": 5.0, "bridges_m": 2, "path": "LINEAR"},
            "attack": {
                "epsilon": 0.1, "steps": 10, "step_size": 0.025,
                "restarts": 1, "random_start": true, "inner_loss": "CE"
            },
            "eval_attack": {
                "epsilon": 0.1, "steps": 20, "step_size": 0.0125,
                "restarts": 1, "random_start": true, "inner_loss": "CE"
            },
            "optimizer": {"kind": "ADAM", "lr": 0.001},
            "schedule": {"kind": "CONSTANT"},
            "epochs": 3,
            "batch_size": 32,
            "seed": 7,
            "dataset": {"kind": "SYNTHETIC", "shape": "GAUSS_BLOBS", "n": 200, "data_seed": 1},
            "hidden_dims": [16],
            "diag_every": 1,
            "diag_subset": 128
        })
    }

    #[test]
    fn roundtrip_and_validate() {
        let cfg = TrainConfig::from_json(example_json().to_string().as_bytes()).unwrap();
        assert_eq!(cfg.epochs, 3);
        let echoed = cfg.to_json_value();
        let back = TrainConfig::from_json(echoed.to_string().as_bytes()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for path in [
            "/momentum_flavor",
            "/loss/extra",
            "/attack/extra",
            "/dataset/extra",
            "/optimizer/extra",
            "/schedule/extra",
        ] {
            let mut v = example_json();
            let (parent, key) = path.rsplit_once('/').unwrap();
            let obj = if parent.is_empty() {
                v.as_object_mut().unwrap()
            } else {
                v.pointer_mut(parent).unwrap().as_object_mut().unwrap()
            };
            obj.insert(key.to_string(), serde_json::json!(1));
            let err = TrainConfig::from_json(v.to_string().as_bytes());
            assert!(matches!(err, Err(Error::Config(_))), "{path} accepted");
        }
    }

    #[test]
    fn mismatched_inner_loss_rejected() {
        let mut v = example_json();
        v["attack"]["inner_loss"] = serde_json::json!("KL_FROM_CLEAN");
        assert!(TrainConfig::from_json(v.to_string().as_bytes()).is_err());
    }

    #[test]
    fn invariants_enforced() {
        for (path, bad) in [
            ("/epochs", serde_json::json!(0)),
            ("/batch_size", serde_json::json!(0)),
            ("/attack/epsilon", serde_json::json!(-0.1)),
            ("/optimizer/lr", serde_json::json!(0.0)),
        ] {
            let mut v = example_json();
            *v.pointer_mut(path).unwrap() = bad;
            assert!(
                TrainConfig::from_json(v.to_string().as_bytes()).is_err(),
                "{path} accepted"
            );
        }
    }
}
