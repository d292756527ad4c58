//! Versioned JSON checkpoints.
//!
//! ```json
//! { "format": "fpflow-checkpoint", "version": 1,
//!   "architecture": { "kind": "coupling", "dim": 2, ... },
//!   "params": [ { "name": "l0.s.K1", "shape": [32, 2], "data": [...] }, ... ] }
//! ```
//!
//! Parameters are stored row-major in registration order. Floats are written
//! in shortest round-trip form, so save/load is bit-exact.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{CouplingFlow, FlowConfig, GaussianDensity, LogDensityModel, LogDensityTfp, PotentialConfig, PotentialNet};
use crate::diffengine::VariableSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "fpflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    Potential {
        dim: usize,
        layers: usize,
        width: usize,
        rank: usize,
        initial: GaussianDensity,
    },
    Coupling {
        dim: usize,
        layers: usize,
        hidden: usize,
        s_max: Option<f64>,
        masks: Vec<Vec<u8>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn new(architecture: Architecture, params: &VariableSet) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture,
            params: params
                .iter()
                .map(|v| ParamRecord {
                    name: v.name.clone(),
                    shape: [v.value.nrows(), v.value.ncols()],
                    data: v.value.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", c.format)));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&s)
    }

    pub fn variables(&self) -> Result<VariableSet> {
        let mut set = VariableSet::new();
        for r in &self.params {
            let value = Array2::from_shape_vec((r.shape[0], r.shape[1]), r.data.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", r.name)))?;
            set.insert(r.name.clone(), value)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(set)
    }

    pub fn into_model(&self) -> Result<AnyModel> {
        let params = self.variables()?;
        match &self.architecture {
            Architecture::Potential {
                dim,
                layers,
                width,
                rank,
                initial,
            } => {
                if initial.dim() != *dim || *rank != PotentialNet::rank_for(dim + 1) {
                    return Err(Error::Checkpoint("inconsistent potential architecture".into()));
                }
                let config = PotentialConfig { layers: *layers, width: *width };
                let net = PotentialNet::from_params(dim + 1, config, params)?;
                Ok(AnyModel::Potential(LogDensityTfp {
                    initial: initial.clone(),
                    net,
                }))
            }
            Architecture::Coupling {
                dim,
                layers,
                hidden,
                s_max,
                masks,
            } => {
                let config = FlowConfig {
                    layers: *layers,
                    hidden: *hidden,
                    s_max: *s_max,
                };
                Ok(AnyModel::Coupling(CouplingFlow::from_parts(*dim, config, masks.clone(), params)?))
            }
        }
    }
}

/// Either model family, as restored from a checkpoint.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Potential(LogDensityTfp),
    Coupling(CouplingFlow),
}

impl AnyModel {
    pub fn as_model(&self) -> &dyn LogDensityModel {
        match self {
            AnyModel::Potential(m) => m,
            AnyModel::Coupling(m) => m,
        }
    }

    pub fn as_model_mut(&mut self) -> &mut dyn LogDensityModel {
        match self {
            AnyModel::Potential(m) => m,
            AnyModel::Coupling(m) => m,
        }
    }
}
