//! Self-describing checkpoint container. Parameter values are stored as
//! f64 bit patterns so a save/load round trip is value-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, StateKind};
use crate::data::NormConstants;
use crate::error::{Error, Result};
use crate::head::AttentionHeadConfig;
use crate::model::{build_model, Model};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub backbone: BackboneConfig,
    pub heads: Vec<AttentionHeadConfig>,
    pub vocabulary: Vec<String>,
    pub image_size: usize,
    pub norm: NormConstants,
    pub threshold: f64,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn capture(
        model: &mut Model,
        vocabulary: Vec<String>,
        image_size: usize,
        norm: NormConstants,
        threshold: f64,
    ) -> Self {
        let mut params = Vec::new();
        model.visit_state(&mut |name, _kind, t| {
            params.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                bits: t.data().iter().map(|v| v.to_bits()).collect(),
            });
        });
        Checkpoint {
            format_version: FORMAT_VERSION,
            backbone: model.backbone.config.clone(),
            heads: model.head.heads.clone(),
            vocabulary,
            image_size,
            norm,
            threshold,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {path:?}: {e}")))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("parse {path:?}: {e}")))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the model and restore every state tensor exactly.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = build_model(
            &self.backbone,
            self.vocabulary.len(),
            self.heads.clone(),
            0,
        )?;
        let mut restored = 0usize;
        let mut error: Option<Error> = None;
        model.visit_state(&mut |name, _kind: StateKind, t: &mut Tensor| {
            if error.is_some() {
                return;
            }
            match self.params.iter().find(|p| p.name == name) {
                Some(entry) => {
                    if entry.shape != t.shape() {
                        error = Some(Error::Checkpoint(format!(
                            "parameter {name} shape {:?} does not match model {:?}",
                            entry.shape,
                            t.shape()
                        )));
                        return;
                    }
                    for (slot, &b) in t.data_mut().iter_mut().zip(&entry.bits) {
                        *slot = f64::from_bits(b);
                    }
                    restored += 1;
                }
                None => {
                    error = Some(Error::Checkpoint(format!("parameter {name} missing")));
                }
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        if restored != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} entries but model consumed {restored}",
                self.params.len()
            )));
        }
        Ok(model)
    }
}
