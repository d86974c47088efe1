//! Frozen vision tower: patch embedding, transformer layers and a
//! second weight-sharing stream whose deeper layers score attention by
//! value-value similarity instead of query-key similarity.
//!
//! [`encode_image`] returns one global embedding (class token of the
//! standard stream) and one L2-normalized patch grid per configured tap
//! layer, taken from the value-value stream.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::NamedArchive;
use crate::config::RunConfig;
use crate::error::{GlocalError, Result};
use crate::nn::{l2_normalize, softmax_rows, AttnMode, EncoderLayer, LayerNorm};
use crate::text::{load_layer, randn2, random_encoder_layer, require_2d_any, save_layer};

/// Fixed seed for the bundled random tower (independent of run config).
const TOY_VISION_SEED: u64 = 0x474C_4F43_0002;

/// Frozen image encoder.
#[derive(Clone, Debug)]
pub struct VisionTower {
    /// `[width, 3 * patch * patch]` linear patch embedding; patches are
    /// flattened channel-major (`c`, then `py`, then `px`).
    pub patch_embedding: Array2<f64>,
    pub class_token: Array1<f64>,
    /// `[1 + grid_h * grid_w, width]` positional embeddings.
    pub positional_embedding: Array2<f64>,
    pub ln_pre: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    pub ln_post: LayerNorm,
    /// `[joint_dim, width]` shared projection for class and patch tokens.
    pub projection: Array2<f64>,
    pub patch_size: usize,
    pub input_resolution: (usize, usize),
    /// Per-channel normalization statistics expected on input images.
    pub image_mean: [f64; 3],
    pub image_std: [f64; 3],
}

/// Output of [`encode_image`].
#[derive(Clone, Debug)]
pub struct VisualFeatures {
    /// Unit vector in the joint space (class token, standard stream).
    pub global: Array1<f64>,
    /// One `[grid_h, grid_w, joint_dim]` grid of unit vectors per tap
    /// layer, in `cfg.patch_tap_layers` order.
    pub grids: Vec<Array3<f64>>,
}

impl VisionTower {
    pub fn width(&self) -> usize {
        self.patch_embedding.nrows()
    }

    pub fn joint_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (
            self.input_resolution.0 / self.patch_size,
            self.input_resolution.1 / self.patch_size,
        )
    }

    /// Small 4-layer tower for 32x32 inputs with 8x8 patches. Weights
    /// are random but fixed, independent of any run configuration.
    pub fn toy() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TOY_VISION_SEED);
        let width = 32;
        let heads = 4;
        let layers = 4;
        let patch = 8;
        let resolution = (32, 32);
        let joint = 32;
        let grid_tokens = (resolution.0 / patch) * (resolution.1 / patch);

        let patch_dim = 3 * patch * patch;
        let patch_embedding = randn2(&mut rng, width, patch_dim, 1.0 / (patch_dim as f64).sqrt());
        let class_token = randn2(&mut rng, 1, width, 0.02).row(0).to_owned();
        let positional_embedding = randn2(&mut rng, 1 + grid_tokens, width, 0.01);
        let blocks = (0..layers)
            .map(|_| random_encoder_layer(&mut rng, width, heads, layers))
            .collect();
        let projection = randn2(&mut rng, joint, width, 1.0 / (width as f64).sqrt());

        Self {
            patch_embedding,
            class_token,
            positional_embedding,
            ln_pre: LayerNorm::unit(width),
            layers: blocks,
            ln_post: LayerNorm::unit(width),
            projection,
            patch_size: patch,
            input_resolution: resolution,
            image_mean: [0.5, 0.5, 0.5],
            image_std: [0.5, 0.5, 0.5],
        }
    }

    /// Serialize all weights under `vision.*` keys plus geometry
    /// metadata.
    pub fn save_into(&self, archive: &mut NamedArchive, meta: &mut serde_json::Value) {
        archive.insert("vision.patch_embedding", self.patch_embedding.clone());
        archive.insert(
            "vision.class_token",
            self.class_token.clone().insert_axis(ndarray::Axis(0)),
        );
        archive.insert(
            "vision.positional_embedding",
            self.positional_embedding.clone(),
        );
        archive.insert("vision.ln_pre.weight", self.ln_pre.weight.clone());
        archive.insert("vision.ln_pre.bias", self.ln_pre.bias.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            save_layer(archive, &format!("vision.layer.{}", i + 1), layer);
        }
        archive.insert("vision.ln_post.weight", self.ln_post.weight.clone());
        archive.insert("vision.ln_post.bias", self.ln_post.bias.clone());
        archive.insert("vision.projection", self.projection.clone());
        meta["vision"] = serde_json::json!({
            "layers": self.layers.len(),
            "heads": self.layers[0].attn.heads,
            "patch_size": self.patch_size,
            "input_resolution": [self.input_resolution.0, self.input_resolution.1],
            "image_mean": self.image_mean,
            "image_std": self.image_std,
        });
    }

    pub fn from_archive(archive: &NamedArchive) -> Result<Self> {
        let meta = &archive.meta()["vision"];
        let layers: usize = serde_json::from_value(meta["layers"].clone())?;
        let heads: usize = serde_json::from_value(meta["heads"].clone())?;
        let patch_size: usize = serde_json::from_value(meta["patch_size"].clone())?;
        let resolution: (usize, usize) =
            serde_json::from_value(meta["input_resolution"].clone())?;
        let image_mean: [f64; 3] = serde_json::from_value(meta["image_mean"].clone())?;
        let image_std: [f64; 3] = serde_json::from_value(meta["image_std"].clone())?;

        let patch_embedding = require_2d_any(archive, "vision.patch_embedding")?;
        let width = patch_embedding.nrows();
        let class_token = require_2d_any(archive, "vision.class_token")?.row(0).to_owned();
        let grid_tokens = (resolution.0 / patch_size) * (resolution.1 / patch_size);
        let positional_embedding =
            archive.require_2d("vision.positional_embedding", (1 + grid_tokens, width))?;
        let blocks = (1..=layers)
            .map(|i| load_layer(archive, &format!("vision.layer.{i}"), width, heads))
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            patch_embedding,
            class_token,
            positional_embedding,
            ln_pre: LayerNorm {
                weight: archive.require_1d("vision.ln_pre.weight", width)?,
                bias: archive.require_1d("vision.ln_pre.bias", width)?,
            },
            layers: blocks,
            ln_post: LayerNorm {
                weight: archive.require_1d("vision.ln_post.weight", width)?,
                bias: archive.require_1d("vision.ln_post.bias", width)?,
            },
            projection: require_2d_any(archive, "vision.projection")?,
            patch_size,
            input_resolution: resolution,
            image_mean,
            image_std,
        })
    }
}

/// Single-head value-value attention: `softmax(V V^T / sqrt(d)) V`.
/// The weight matrix is row-stochastic; identical rows of `v` attend
/// uniformly and reproduce themselves.
pub fn vv_attention(v: ArrayView2<'_, f64>) -> Array2<f64> {
    let (out, _) = vv_attention_with_weights(v);
    out
}

/// [`vv_attention`] that also exposes the attention weights.
pub fn vv_attention_with_weights(v: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
    let d = v.ncols() as f64;
    let scores = v.dot(&v.t()) / d.sqrt();
    let weights = softmax_rows(&scores);
    let out = weights.dot(&v);
    (out, weights)
}

/// Split a normalized `[h, w, 3]` image into flattened patch vectors,
/// channel-major within each patch.
fn patchify(image: &Array3<f64>, patch: usize) -> Array2<f64> {
    let (h, w, _) = image.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, 3 * patch * patch));
    for ph in 0..gh {
        for pw in 0..gw {
            let row = ph * gw + pw;
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        out[[row, c * patch * patch + py * patch + px]] =
                            image[[ph * patch + py, pw * patch + px, c]];
                    }
                }
            }
        }
    }
    out
}

/// Run both streams over a channel-normalized image.
///
/// The standard stream yields the global class-token embedding; the
/// value-value stream (value-value attention from `cfg.vv_start_depth`
/// on) yields the patch grids at `cfg.patch_tap_layers`. Both streams
/// share every weight, and layers below the switch depth are computed
/// once.
pub fn encode_image(
    tower: &VisionTower,
    image: &Array3<f64>,
    cfg: &RunConfig,
) -> Result<VisualFeatures> {
    let (h, w, ch) = image.dim();
    if (h, w) != tower.input_resolution || ch != 3 {
        return Err(GlocalError::ResolutionMismatch {
            expected: tower.input_resolution,
            found: (h, w),
        });
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(GlocalError::NonFinite("image pixels".to_string()));
    }
    let n_layers = tower.layers.len();
    if let Some(&bad) = cfg.patch_tap_layers.iter().find(|&&l| l > n_layers) {
        return Err(GlocalError::InvalidConfig {
            constraint: "patch_tap_layers <= vision layers".to_string(),
            detail: format!("{bad} > {n_layers}"),
        });
    }

    let (gh, gw) = tower.grid_shape();
    let width = tower.width();
    let patches = patchify(image, tower.patch_size);
    let tokens = patches.dot(&tower.patch_embedding.t());

    let mut x = Array2::zeros((1 + gh * gw, width));
    x.row_mut(0).assign(&tower.class_token);
    x.slice_mut(ndarray::s![1.., ..]).assign(&tokens);
    x += &tower.positional_embedding;
    let (mut x, _) = tower.ln_pre.forward(&x);

    let collect_grid = |states: &Array2<f64>| -> Array3<f64> {
        let (normed, _) = tower.ln_post.forward(states);
        let mut grid = Array3::zeros((gh, gw, tower.joint_dim()));
        for t in 0..gh * gw {
            let projected = tower.projection.dot(&normed.row(1 + t).to_owned());
            let unit = l2_normalize(&projected);
            grid.slice_mut(ndarray::s![t / gw, t % gw, ..]).assign(&unit);
        }
        grid
    };

    // 1-based layer index of the first value-value layer.
    let switch = cfg.vv_start_depth.min(n_layers + 1);
    let mut taps: Vec<Option<Array3<f64>>> = vec![None; cfg.patch_tap_layers.len()];
    let record_tap = |layer_1b: usize, states: &Array2<f64>, taps: &mut Vec<Option<Array3<f64>>>| {
        for (slot, &wanted) in cfg.patch_tap_layers.iter().enumerate() {
            if wanted == layer_1b {
                taps[slot] = Some(collect_grid(states));
            }
        }
    };

    // Shared prefix: both streams are identical below the switch.
    for idx in 0..switch.saturating_sub(1).min(n_layers) {
        let (next, _) = tower.layers[idx].forward(&x, AttnMode::Bidirectional);
        x = next;
        record_tap(idx + 1, &x, &mut taps);
    }

    // Standard stream continues with query-key attention.
    let mut x_global = x.clone();
    for layer in tower.layers.iter().skip(switch.saturating_sub(1)) {
        let (next, _) = layer.forward(&x_global, AttnMode::Bidirectional);
        x_global = next;
    }

    // Value-value stream continues with value-value attention.
    let mut x_local = x;
    for (idx, layer) in tower.layers.iter().enumerate().skip(switch.saturating_sub(1)) {
        let (next, _) = layer.forward(&x_local, AttnMode::ValueValue);
        x_local = next;
        record_tap(idx + 1, &x_local, &mut taps);
    }

    let (final_normed, _) = tower.ln_post.forward(&x_global);
    let global = l2_normalize(&tower.projection.dot(&final_normed.row(0).to_owned()));

    let grids = taps
        .into_iter()
        .enumerate()
        .map(|(slot, g)| {
            g.ok_or_else(|| GlocalError::InvalidConfig {
                constraint: "patch_tap_layers reachable".to_string(),
                detail: format!("tap slot {slot} was never reached"),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(VisualFeatures { global, grids })
}
