//! Run configuration: every knob that governs prompt shapes, tower
//! behavior, training and evaluation, loadable from a single JSON
//! document with defaults for unset keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GlocalError, Result};

/// Order of the learnable blocks and fixed words inside an anomaly
/// prompt. The normal prompt is always `[normal block][object]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptOrdering {
    /// `[normal][anomaly][damaged][object]`
    #[serde(rename = "N-A-obj")]
    NormalAnomalyObject,
    /// `[anomaly][normal][damaged][object]`
    #[serde(rename = "A-N-obj")]
    AnomalyNormalObject,
    /// `[normal][damaged][object][anomaly]`
    #[serde(rename = "N-obj-A")]
    NormalObjectAnomaly,
}

/// How the scalar image score is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreFusion {
    /// Global text-branch anomaly probability only.
    #[serde(rename = "text_only")]
    TextOnly,
    /// Average of the text probability and the peak of the anomaly map
    /// normalized by the tap-layer count.
    #[serde(rename = "text_plus_map_max")]
    TextPlusMapMax,
}

/// All run-time knobs. Field names double as the JSON keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Learnable token count of the normal prompt block (rows of each
    /// normal bank).
    pub normal_prompt_len: usize,
    /// Learnable token count of the anomaly prompt block.
    pub anomaly_prompt_len: usize,
    /// Learnable token count inserted per tuned text layer.
    pub deep_prompt_len: usize,
    /// Number of leading text layers that receive fresh deep tokens.
    pub deep_prompt_depth: usize,
    /// First vision layer (1-based) whose value-value stream uses
    /// value-value attention.
    pub vv_start_depth: usize,
    /// Vision layers (1-based) whose patch grids feed the local maps.
    pub patch_tap_layers: Vec<usize>,
    /// Triplet-loss margin.
    pub margin: f64,
    /// Weight of the glocal contrastive term in the total loss.
    pub lambda_gcl: f64,
    /// Gaussian smoothing width (pixels) for the fused anomaly map.
    pub sigma: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Adam exponential-decay rates `(beta1, beta2)`.
    pub adam_betas: (f64, f64),
    /// Working resolution `(height, width)`; inputs are resampled to it.
    pub image_resolution: (usize, usize),
    pub prompt_ordering: PromptOrdering,
    pub score_fusion: ScoreFusion,
    /// False-positive-rate ceiling for the region-overlap metric.
    pub aupro_fpr_cap: f64,
    pub seed: u64,
    /// Samples per optimization step.
    pub batch_size: usize,
    /// Focusing exponent of the focal term.
    pub focal_gamma: f64,
    /// Scaling factor of the focal term.
    pub focal_alpha: f64,
    /// Smoothing constant of the overlap (dice) terms.
    pub dice_eps: f64,
    /// Standard deviation of the noise added to carrier embeddings at
    /// prompt-bank initialization.
    pub init_noise_scale: f64,
    /// Divide the fused map by the tap-layer count before smoothing.
    pub normalize_map_by_layers: bool,
    /// Precompute visual features for the whole training set once.
    /// Costs memory proportional to dataset size; disable at scale.
    pub cache_visual_features: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            normal_prompt_len: 13,
            anomaly_prompt_len: 10,
            deep_prompt_len: 4,
            deep_prompt_depth: 12,
            vv_start_depth: 6,
            patch_tap_layers: vec![6, 12, 18, 24],
            margin: 0.0,
            lambda_gcl: 1.0,
            sigma: 8.0,
            epochs: 15,
            learning_rate: 0.001,
            adam_betas: (0.5, 0.999),
            image_resolution: (518, 518),
            prompt_ordering: PromptOrdering::NormalAnomalyObject,
            score_fusion: ScoreFusion::TextOnly,
            aupro_fpr_cap: 0.3,
            seed: 0,
            batch_size: 8,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            dice_eps: 1e-5,
            init_noise_scale: 0.02,
            normalize_map_by_layers: false,
            cache_visual_features: true,
        }
    }
}

impl RunConfig {
    /// Preset sized for the bundled small random towers: 2 text layers,
    /// 4 vision layers, 32x32 inputs with 8x8 patches.
    pub fn toy() -> Self {
        Self {
            deep_prompt_depth: 2,
            vv_start_depth: 2,
            patch_tap_layers: vec![2, 4],
            sigma: 2.0,
            image_resolution: (32, 32),
            ..Self::default()
        }
    }

    /// Validate constraints that do not depend on the towers. Each
    /// violation reports the constraint by name.
    pub fn validate(&self) -> Result<()> {
        fn fail(constraint: &str, detail: String) -> Result<()> {
            Err(GlocalError::InvalidConfig {
                constraint: constraint.to_string(),
                detail,
            })
        }

        if self.normal_prompt_len == 0 {
            return fail("normal_prompt_len > 0", format!("{}", self.normal_prompt_len));
        }
        if self.anomaly_prompt_len == 0 {
            return fail(
                "anomaly_prompt_len > 0",
                format!("{}", self.anomaly_prompt_len),
            );
        }
        if self.deep_prompt_len == 0 {
            return fail("deep_prompt_len > 0", format!("{}", self.deep_prompt_len));
        }
        if self.deep_prompt_depth == 0 {
            return fail("deep_prompt_depth > 0", format!("{}", self.deep_prompt_depth));
        }
        if self.vv_start_depth == 0 {
            return fail("vv_start_depth > 0", format!("{}", self.vv_start_depth));
        }
        if self.patch_tap_layers.is_empty() {
            return fail("patch_tap_layers nonempty", "no tap layers".to_string());
        }
        if self.patch_tap_layers.contains(&0) {
            return fail(
                "patch_tap_layers 1-based",
                format!("{:?}", self.patch_tap_layers),
            );
        }
        let max_tap = *self.patch_tap_layers.iter().max().expect("nonempty");
        if self.vv_start_depth > max_tap {
            return fail(
                "vv_start_depth <= max(patch_tap_layers)",
                format!("{} > {}", self.vv_start_depth, max_tap),
            );
        }
        if self.margin < 0.0 || !self.margin.is_finite() {
            return fail("margin >= 0", format!("{}", self.margin));
        }
        if !self.lambda_gcl.is_finite() || self.lambda_gcl < 0.0 {
            return fail("lambda_gcl >= 0", format!("{}", self.lambda_gcl));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return fail("sigma > 0", format!("{}", self.sigma));
        }
        if self.epochs == 0 {
            return fail("epochs > 0", format!("{}", self.epochs));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return fail("learning_rate >= 0", format!("{}", self.learning_rate));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return fail("adam_betas in [0, 1)", format!("({b1}, {b2})"));
        }
        if self.image_resolution.0 == 0 || self.image_resolution.1 == 0 {
            return fail(
                "image_resolution positive",
                format!("{:?}", self.image_resolution),
            );
        }
        if !(0.0 < self.aupro_fpr_cap && self.aupro_fpr_cap <= 1.0) {
            return fail("aupro_fpr_cap in (0, 1]", format!("{}", self.aupro_fpr_cap));
        }
        if self.batch_size == 0 {
            return fail("batch_size > 0", format!("{}", self.batch_size));
        }
        if !self.focal_gamma.is_finite() || self.focal_gamma < 0.0 {
            return fail("focal_gamma >= 0", format!("{}", self.focal_gamma));
        }
        if !self.focal_alpha.is_finite() || self.focal_alpha <= 0.0 {
            return fail("focal_alpha > 0", format!("{}", self.focal_alpha));
        }
        if !self.dice_eps.is_finite() || self.dice_eps <= 0.0 {
            return fail("dice_eps > 0", format!("{}", self.dice_eps));
        }
        if !self.init_noise_scale.is_finite() || self.init_noise_scale < 0.0 {
            return fail("init_noise_scale >= 0", format!("{}", self.init_noise_scale));
        }
        Ok(())
    }

    /// Validate constraints that depend on tower geometry.
    pub fn validate_dims(
        &self,
        text_layers: usize,
        vision_layers: usize,
        context_length: usize,
        patch_size: usize,
    ) -> Result<()> {
        if self.deep_prompt_depth > text_layers {
            return Err(GlocalError::InvalidConfig {
                constraint: "deep_prompt_depth <= text layers".to_string(),
                detail: format!("{} > {}", self.deep_prompt_depth, text_layers),
            });
        }
        if let Some(&bad) = self
            .patch_tap_layers
            .iter()
            .find(|&&l| l > vision_layers)
        {
            return Err(GlocalError::InvalidConfig {
                constraint: "patch_tap_layers <= vision layers".to_string(),
                detail: format!("{bad} > {vision_layers}"),
            });
        }
        // SOT + EOT + "damaged" + "object" is the largest fixed overhead
        // across orderings.
        let reserved = 4;
        let needed = self.deep_prompt_len
            + self.normal_prompt_len
            + self.anomaly_prompt_len
            + reserved;
        if needed > context_length {
            return Err(GlocalError::InvalidConfig {
                constraint: "prompt lengths fit context".to_string(),
                detail: format!("{needed} > {context_length}"),
            });
        }
        let (h, w) = self.image_resolution;
        if h % patch_size != 0 || w % patch_size != 0 {
            return Err(GlocalError::InvalidConfig {
                constraint: "image_resolution divisible by patch size".to_string(),
                detail: format!("{h}x{w} vs patch {patch_size}"),
            });
        }
        Ok(())
    }
}

/// Parse a config from a JSON file, fill unset keys with defaults and
/// validate tower-independent constraints.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.normal_prompt_len, 13);
        assert_eq!(cfg.anomaly_prompt_len, 10);
        assert_eq!(cfg.deep_prompt_len, 4);
        assert_eq!(cfg.deep_prompt_depth, 12);
        assert_eq!(cfg.vv_start_depth, 6);
        assert_eq!(cfg.patch_tap_layers, vec![6, 12, 18, 24]);
        assert_eq!(cfg.margin, 0.0);
        assert_eq!(cfg.lambda_gcl, 1.0);
        assert_eq!(cfg.sigma, 8.0);
        assert_eq!(cfg.epochs, 15);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.adam_betas, (0.5, 0.999));
        assert_eq!(cfg.image_resolution, (518, 518));
        assert_eq!(cfg.prompt_ordering, PromptOrdering::NormalAnomalyObject);
        assert_eq!(cfg.score_fusion, ScoreFusion::TextOnly);
        assert_eq!(cfg.aupro_fpr_cap, 0.3);
        assert_eq!(cfg.batch_size, 8);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_document_overrides_only_named_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 7}"#).unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(
            RunConfig {
                seed: 0,
                ..cfg.clone()
            },
            RunConfig::default()
        );

        std::fs::write(&path, r#"{"seed": 0}"#).unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn malformed_document_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            load_config(&path).unwrap_err(),
            GlocalError::Json(_)
        ));

        std::fs::write(&path, r#"{"unknown_knob": 1}"#).unwrap();
        assert!(matches!(
            load_config(&path).unwrap_err(),
            GlocalError::Json(_)
        ));
    }

    #[test]
    fn dimension_invariants_name_the_constraint() {
        let cfg = RunConfig {
            deep_prompt_depth: 99,
            ..RunConfig::default()
        };
        let err = cfg.validate_dims(12, 24, 77, 14).unwrap_err();
        match err {
            GlocalError::InvalidConfig { constraint, .. } => {
                assert!(constraint.contains("deep_prompt_depth"));
            }
            other => panic!("unexpected error {other:?}"),
        }

        let cfg = RunConfig {
            patch_tap_layers: vec![6, 30],
            vv_start_depth: 6,
            ..RunConfig::default()
        };
        assert!(cfg.validate_dims(12, 24, 77, 14).is_err());

        let cfg = RunConfig {
            normal_prompt_len: 60,
            anomaly_prompt_len: 20,
            ..RunConfig::default()
        };
        assert!(cfg.validate_dims(12, 24, 77, 14).is_err());
    }

    #[test]
    fn vv_start_depth_above_taps_is_rejected() {
        let cfg = RunConfig {
            vv_start_depth: 25,
            ..RunConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, GlocalError::InvalidConfig { .. }));
    }

    #[test]
    fn zero_sigma_is_rejected() {
        let cfg = RunConfig {
            sigma: 0.0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn serde_round_trip_preserves_every_field() {
        let mut cfg = RunConfig::toy();
        cfg.seed = 99;
        cfg.prompt_ordering = PromptOrdering::NormalObjectAnomaly;
        cfg.score_fusion = ScoreFusion::TextPlusMapMax;
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn ordering_names_match_documented_strings() {
        let json = serde_json::to_string(&PromptOrdering::AnomalyNormalObject).unwrap();
        assert_eq!(json, "\"A-N-obj\"");
        let parsed: PromptOrdering = serde_json::from_str("\"N-obj-A\"").unwrap();
        assert_eq!(parsed, PromptOrdering::NormalObjectAnomaly);
    }

    #[test]
    fn toy_preset_is_internally_valid() {
        let cfg = RunConfig::toy();
        cfg.validate().unwrap();
        cfg.validate_dims(2, 4, 77, 8).unwrap();
    }
}
