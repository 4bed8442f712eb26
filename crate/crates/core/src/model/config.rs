//! JSON problem configuration.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "parameters": ["theta1", "theta2"],
//!   "alphabet_size": 2,
//!   "model": { "kind": "iid", "pmf": [[0.8, 0.2], [0.3, 0.7]] },
//!   "decisions": ["accept1", "accept2"],
//!   "loss": [[0, 1], [1, 0]],
//!   "pi1": [0.5, 0.5],
//!   "pi2": [0.5, 0.5],
//!   "cost": 0.02,
//!   "constraints": { "groups": [["theta1"], ["theta2"]], "bounds": [0.05, 0.05] }
//! }
//! ```
//!
//! `model.kind` is one of `iid` (`pmf` per parameter), `dependent` (`kernel`:
//! one object per parameter mapping comma-separated histories, `""` for the
//! empty one, to next-symbol pmfs) or `markov` (`initial` and `transition`
//! per parameter). `loss` is a matrix indexed `[parameter][decision]` or the
//! string `"zero_one"`. `decisions` defaults to the parameter labels.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    ConstraintSpec, KernelTable, LossSpec, MarkovKernel, ObservationModel, ParameterSpace, Priors,
    Problem, ProblemSpec,
};
use crate::error::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "default_version")]
    pub schema_version: u32,
    pub parameters: Vec<String>,
    pub alphabet_size: usize,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decisions: Option<Vec<String>>,
    pub loss: LossConfig,
    pub pi1: Vec<f64>,
    pub pi2: Vec<f64>,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<ConstraintsConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Iid {
        pmf: Vec<Vec<f64>>,
    },
    Dependent {
        kernel: Vec<BTreeMap<String, Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        horizon: Option<usize>,
    },
    Markov {
        initial: Vec<Vec<f64>>,
        transition: Vec<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        horizon: Option<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossConfig {
    Matrix(Vec<Vec<f64>>),
    Named(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsConfig {
    pub groups: Vec<Vec<String>>,
    pub bounds: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multipliers: Option<Vec<f64>>,
}

/// Parses a comma-separated history key; the empty string is the empty history.
pub(crate) fn parse_history(key: &str) -> Result<Vec<usize>> {
    let key = key.trim();
    if key.is_empty() {
        return Ok(Vec::new());
    }
    key.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad history key {key:?}")))
        })
        .collect()
}

impl ProblemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Converts to a validated [`Problem`].
    pub fn into_problem(self) -> Result<Problem> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let params = ParameterSpace::new(self.parameters.iter().cloned());
        let k = self.alphabet_size;
        let obs = match self.model {
            ModelConfig::Iid { pmf } => ObservationModel::Iid {
                alphabet_size: k,
                pmf,
            },
            ModelConfig::Dependent { kernel, horizon } => {
                let mut histories = Vec::new();
                for table in &kernel {
                    for key in table.keys() {
                        histories.push(parse_history(key)?);
                    }
                }
                let horizon =
                    horizon.unwrap_or_else(|| histories.iter().map(|h| h.len() + 1).max().unwrap_or(0));
                let mut t = KernelTable::new(kernel.len(), horizon);
                for (theta, table) in kernel.into_iter().enumerate() {
                    for (key, pmf) in table {
                        t.insert(theta, parse_history(&key)?, pmf);
                    }
                }
                ObservationModel::Dependent {
                    alphabet_size: k,
                    kernel: Arc::new(t),
                }
            }
            ModelConfig::Markov {
                initial,
                transition,
                horizon,
            } => ObservationModel::Dependent {
                alphabet_size: k,
                kernel: Arc::new(MarkovKernel {
                    initial,
                    transition,
                    horizon: horizon.unwrap_or(usize::MAX),
                }),
            },
        };
        let loss = match self.loss {
            LossConfig::Matrix(matrix) => {
                let decisions = self.decisions.unwrap_or_else(|| {
                    let d = matrix.first().map_or(0, Vec::len);
                    if d == params.len() {
                        params.labels().to_vec()
                    } else {
                        (0..d).map(|i| format!("d{}", i + 1)).collect()
                    }
                });
                LossSpec { decisions, matrix }
            }
            LossConfig::Named(name) if name == "zero_one" => {
                let mut l = LossSpec::zero_one(&params);
                if let Some(d) = self.decisions {
                    l.decisions = d;
                }
                l
            }
            LossConfig::Named(name) => {
                return Err(Error::Parse(format!("unknown named loss {name:?}")))
            }
        };
        let constraints = match self.constraints {
            None => None,
            Some(c) => {
                let mut groups = Vec::with_capacity(c.groups.len());
                for g in &c.groups {
                    let mut idx = Vec::with_capacity(g.len());
                    for label in g {
                        idx.push(params.index_of(label).ok_or_else(|| {
                            Error::Parse(format!("constraint group references unknown parameter {label:?}"))
                        })?);
                    }
                    groups.push(idx);
                }
                Some(ConstraintSpec {
                    groups,
                    bounds: c.bounds,
                    multipliers: c.multipliers,
                })
            }
        };
        Problem::new(ProblemSpec {
            params,
            obs,
            loss,
            priors: Priors {
                pi1: self.pi1,
                pi2: self.pi2,
            },
            cost: self.cost,
            constraints,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::joint_density;

    const INSTANCE_B: &str = r#"{
        "parameters": ["theta1", "theta2"],
        "alphabet_size": 2,
        "model": {"kind": "iid", "pmf": [[0.8, 0.2], [0.3, 0.7]]},
        "loss": "zero_one",
        "pi1": [0.5, 0.5], "pi2": [0.5, 0.5],
        "cost": 0.02,
        "constraints": {"groups": [["theta1"], ["theta2"]], "bounds": [0.1, 0.05]}
    }"#;

    #[test]
    fn parses_iid_config() {
        let p = ProblemConfig::from_json(INSTANCE_B).unwrap().into_problem().unwrap();
        assert_eq!(p.num_params(), 2);
        assert_eq!(p.loss().matrix, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(p.constraints().unwrap().groups, vec![vec![0], vec![1]]);
    }

    #[test]
    fn parses_dependent_table() {
        let text = r#"{
            "parameters": ["a"], "alphabet_size": 2,
            "model": {"kind": "dependent", "kernel": [
                {"": [0.8, 0.2], "0": [0.5, 0.5], "1": [0.0, 1.0]}
            ]},
            "loss": [[0.0, 1.0]], "pi1": [1.0], "pi2": [1.0], "cost": 0.1
        }"#;
        let p = ProblemConfig::from_json(text).unwrap().into_problem().unwrap();
        assert_eq!(p.obs().horizon(), Some(2));
        assert!((joint_density(&p, 0, &[1, 1]).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn unknown_group_label_is_an_error() {
        let text = INSTANCE_B.replace(r#"[["theta1"], ["theta2"]]"#, r#"[["theta9"]]"#);
        assert!(matches!(
            ProblemConfig::from_json(&text).unwrap().into_problem(),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = INSTANCE_B.replace("\"cost\"", "\"costs\": 1, \"cost\"");
        assert!(ProblemConfig::from_json(&text).is_err());
    }
}
