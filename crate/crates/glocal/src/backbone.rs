//! The frozen backbone pair (text + vision towers) with its logit
//! scale: construction, archive round-trip and integrity checksums.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::archive::NamedArchive;
use crate::config::RunConfig;
use crate::error::{GlocalError, Result};
use crate::text::TextTower;
use crate::vision::VisionTower;

/// A matched pair of frozen towers sharing one joint space.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub text: TextTower,
    pub vision: VisionTower,
    /// Similarity scale; the softmax temperature is its reciprocal.
    pub logit_scale: f64,
}

impl Backbone {
    /// The bundled small random backbone (temperature 0.07).
    pub fn toy() -> Self {
        Self {
            text: TextTower::toy(),
            vision: VisionTower::toy(),
            logit_scale: 1.0 / 0.07,
        }
    }

    /// Softmax temperature used by all similarity scoring.
    pub fn tau(&self) -> f64 {
        1.0 / self.logit_scale
    }

    /// Validate a run configuration against this backbone's geometry.
    pub fn validate_config(&self, cfg: &RunConfig) -> Result<()> {
        cfg.validate()?;
        cfg.validate_dims(
            self.text.layers.len(),
            self.vision.layers.len(),
            self.text.context_length(),
            self.vision.patch_size,
        )?;
        if cfg.image_resolution != self.vision.input_resolution {
            return Err(GlocalError::InvalidConfig {
                constraint: "image_resolution matches vision tower".to_string(),
                detail: format!(
                    "{:?} != {:?}",
                    cfg.image_resolution, self.vision.input_resolution
                ),
            });
        }
        if self.text.joint_dim() != self.vision.joint_dim() {
            return Err(GlocalError::InvalidConfig {
                constraint: "towers share the joint space".to_string(),
                detail: format!(
                    "text {} != vision {}",
                    self.text.joint_dim(),
                    self.vision.joint_dim()
                ),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut archive = NamedArchive::new();
        let mut meta = serde_json::json!({
            "kind": "backbone",
            "logit_scale": self.logit_scale,
        });
        self.text.save_into(&mut archive, &mut meta);
        self.vision.save_into(&mut archive, &mut meta);
        archive.set_meta(meta);
        archive.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = NamedArchive::load(path)?;
        let logit_scale: f64 = serde_json::from_value(archive.meta()["logit_scale"].clone())?;
        if !logit_scale.is_finite() || logit_scale <= 0.0 {
            return Err(GlocalError::InvalidConfig {
                constraint: "logit_scale > 0".to_string(),
                detail: format!("{logit_scale}"),
            });
        }
        Ok(Self {
            text: TextTower::from_archive(&archive)?,
            vision: VisionTower::from_archive(&archive)?,
            logit_scale,
        })
    }

    /// SHA-256 over every weight array in a fixed order. Training must
    /// leave this digest unchanged.
    pub fn checksum(&self) -> String {
        let mut archive = NamedArchive::new();
        let mut meta = serde_json::json!({});
        self.text.save_into(&mut archive, &mut meta);
        self.vision.save_into(&mut archive, &mut meta);

        let mut hasher = Sha256::new();
        hasher.update([self.logit_scale].map(f64::to_le_bytes).concat());
        let names: Vec<String> = archive.names().map(|s| s.to_string()).collect();
        for name in names {
            let array = archive.get(&name).expect("just inserted");
            hasher.update(name.as_bytes());
            for &dim in array.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            for &v in array.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }
}
