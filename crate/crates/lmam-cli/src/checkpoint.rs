//! Checkpoints: one JSON object holding the experiment config, the epoch
//! count and every named parameter as nested decimal arrays. Loading a
//! checkpoint and re-evaluating reproduces the logged metrics exactly
//! because serde_json round-trips every f64 bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use lmam_core::matrix::Matrix;
use lmam_core::model::{assemble_model, ExperimentConfig, Model};
use lmam_core::rng::Rng;

use crate::error::CliError;

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub num_classes: usize,
    pub epoch: usize,
    pub params: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Checkpoint {
    pub fn capture(model: &Model, epoch: usize) -> Self {
        let mut params = BTreeMap::new();
        model.visit_params(&mut |name, p| {
            params.insert(name.to_string(), p.value.to_rows());
        });
        Checkpoint {
            config: model.config().clone(),
            num_classes: model.num_classes(),
            epoch,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reassembles the model and installs the stored parameters. Every stored
    /// name must match a parameter of the assembled model and vice versa.
    pub fn restore(&self) -> Result<Model, CliError> {
        let mut rng = Rng::new(self.config.seed);
        let mut model = assemble_model(&self.config, self.num_classes, &mut rng)?;
        let mut missing: Vec<String> = Vec::new();
        let mut seen = 0usize;
        let mut failure: Option<String> = None;
        model.visit_params_mut(&mut |name, p| {
            match self.params.get(name) {
                Some(rows) => {
                    seen += 1;
                    match Matrix::from_rows(rows) {
                        Ok(m) if m.shape() == p.value.shape() => p.value = m,
                        Ok(m) => {
                            failure = Some(format!(
                                "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                                m.shape(),
                                p.value.shape()
                            ))
                        }
                        Err(e) => failure = Some(format!("parameter {name}: {e}")),
                    }
                }
                None => missing.push(name.to_string()),
            }
        });
        if let Some(msg) = failure {
            return Err(CliError::Usage(msg));
        }
        if !missing.is_empty() {
            return Err(CliError::Usage(format!(
                "checkpoint lacks parameters: {}",
                missing.join(", ")
            )));
        }
        if seen != self.params.len() {
            return Err(CliError::Usage(format!(
                "checkpoint holds {} parameters but the model expects {seen}",
                self.params.len()
            )));
        }
        Ok(model)
    }
}
