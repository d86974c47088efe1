//! Frozen text tower: token embeddings, causal transformer layers,
//! final layer norm, learned projection into the joint space.
//!
//! [`encode_prompt`] splices the learnable deep tokens into the
//! sequence — the first tuned layer receives them as input tokens right
//! after the start marker, and every further tuned layer *overwrites*
//! those positions with its own fresh tokens. Gradients flow only to
//! prompt-bank rows and deep tokens; all tower weights stay frozen.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::archive::NamedArchive;
use crate::config::RunConfig;
use crate::error::{GlocalError, Result};
use crate::nn::{
    l2_normalize, l2_normalize_backward, AttnMode, Attention, EncoderLayer, EncoderLayerCache,
    LayerNorm, LayerNormCache, Mlp,
};
use crate::prompt::{Branch, CarrierSource, Polarity, PromptBank, PromptGrads, Slot, TokenSequence, WordIds};

/// Fixed seed for the bundled random tower so its weights never depend
/// on the run configuration.
const TOY_TEXT_SEED: u64 = 0x474C_4F43_0001;

/// Frozen text encoder.
#[derive(Clone, Debug)]
pub struct TextTower {
    /// `[vocab, width]` token embedding table.
    pub token_embedding: Array2<f64>,
    /// `[context, width]` absolute positional embeddings.
    pub positional_embedding: Array2<f64>,
    pub layers: Vec<EncoderLayer>,
    pub ln_final: LayerNorm,
    /// `[joint_dim, width]` projection into the shared space.
    pub projection: Array2<f64>,
    pub word_ids: WordIds,
    /// Token ids of the neutral carrier phrase used for bank init.
    pub carrier_ids: Vec<usize>,
}

impl TextTower {
    pub fn vocab_size(&self) -> usize {
        self.token_embedding.nrows()
    }

    pub fn width(&self) -> usize {
        self.token_embedding.ncols()
    }

    pub fn context_length(&self) -> usize {
        self.positional_embedding.nrows()
    }

    pub fn joint_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Small 2-layer tower over a byte-level vocabulary (256 byte ids,
    /// then the start and end markers). Weights are random but fixed:
    /// they do not depend on any run configuration.
    pub fn toy() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TOY_TEXT_SEED);
        let vocab = 258;
        let width = 64;
        let context = 77;
        let layers = 2;
        let heads = 4;
        let joint = 32;

        let token_embedding = randn2(&mut rng, vocab, width, 0.02);
        let positional_embedding = randn2(&mut rng, context, width, 0.01);
        let blocks = (0..layers)
            .map(|_| random_encoder_layer(&mut rng, width, heads, layers))
            .collect();
        let ln_final = LayerNorm::unit(width);
        let projection = randn2(&mut rng, joint, width, 1.0 / (width as f64).sqrt());

        Self {
            token_embedding,
            positional_embedding,
            layers: blocks,
            ln_final,
            projection,
            word_ids: WordIds {
                sot: 256,
                eot: 257,
                object: b'o' as usize,
                damaged: b'd' as usize,
            },
            carrier_ids: b"a photo of a".iter().map(|&b| b as usize).collect(),
        }
    }

    /// Serialize all weights under `text.*` keys and record tower
    /// geometry plus word ids in the metadata object.
    pub fn save_into(&self, archive: &mut NamedArchive, meta: &mut serde_json::Value) {
        archive.insert("text.token_embedding", self.token_embedding.clone());
        archive.insert("text.positional_embedding", self.positional_embedding.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            save_layer(archive, &format!("text.layer.{}", i + 1), layer);
        }
        archive.insert("text.ln_final.weight", self.ln_final.weight.clone());
        archive.insert("text.ln_final.bias", self.ln_final.bias.clone());
        archive.insert("text.projection", self.projection.clone());
        meta["text"] = serde_json::json!({
            "layers": self.layers.len(),
            "heads": self.layers[0].attn.heads,
            "word_ids": self.word_ids,
            "carrier_ids": self.carrier_ids,
        });
    }

    pub fn from_archive(archive: &NamedArchive) -> Result<Self> {
        let meta = &archive.meta()["text"];
        let layers: usize = serde_json::from_value(meta["layers"].clone())?;
        let heads: usize = serde_json::from_value(meta["heads"].clone())?;
        let word_ids: WordIds = serde_json::from_value(meta["word_ids"].clone())?;
        let carrier_ids: Vec<usize> = serde_json::from_value(meta["carrier_ids"].clone())?;

        let token_embedding = require_2d_any(archive, "text.token_embedding")?;
        let width = token_embedding.ncols();
        let positional_embedding = require_2d_any(archive, "text.positional_embedding")?;
        if positional_embedding.ncols() != width {
            return Err(GlocalError::ShapeMismatch {
                name: "text.positional_embedding".to_string(),
                expected: vec![positional_embedding.nrows(), width],
                found: positional_embedding.shape().to_vec(),
            });
        }
        let blocks = (1..=layers)
            .map(|i| load_layer(archive, &format!("text.layer.{i}"), width, heads))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm {
            weight: archive.require_1d("text.ln_final.weight", width)?,
            bias: archive.require_1d("text.ln_final.bias", width)?,
        };
        let projection = require_2d_any(archive, "text.projection")?;
        if projection.ncols() != width {
            return Err(GlocalError::ShapeMismatch {
                name: "text.projection".to_string(),
                expected: vec![projection.nrows(), width],
                found: projection.shape().to_vec(),
            });
        }

        Ok(Self {
            token_embedding,
            positional_embedding,
            layers: blocks,
            ln_final,
            projection,
            word_ids,
            carrier_ids,
        })
    }
}

impl CarrierSource for TextTower {
    fn embedding_row(&self, id: usize) -> ArrayView1<'_, f64> {
        self.token_embedding.row(id)
    }
    fn carrier_ids(&self) -> &[usize] {
        &self.carrier_ids
    }
    fn word_ids(&self) -> WordIds {
        self.word_ids
    }
    fn width(&self) -> usize {
        TextTower::width(self)
    }
}

pub(crate) fn randn2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = rng.sample(StandardNormal);
        v * std
    })
}

pub(crate) fn random_encoder_layer(
    rng: &mut ChaCha8Rng,
    width: usize,
    heads: usize,
    total_layers: usize,
) -> EncoderLayer {
    let attn_std = 1.0 / (width as f64).sqrt();
    let out_std = attn_std / (2.0 * total_layers as f64).sqrt();
    let fc_std = 1.0 / (2.0 * width as f64).sqrt();
    EncoderLayer {
        ln1: LayerNorm::unit(width),
        attn: Attention {
            w_qkv: randn2(rng, 3 * width, width, attn_std),
            b_qkv: Array1::zeros(3 * width),
            w_out: randn2(rng, width, width, out_std),
            b_out: Array1::zeros(width),
            heads,
        },
        ln2: LayerNorm::unit(width),
        mlp: Mlp {
            w1: randn2(rng, 4 * width, width, fc_std),
            b1: Array1::zeros(4 * width),
            w2: randn2(rng, width, 4 * width, out_std),
            b2: Array1::zeros(width),
        },
    }
}

pub(crate) fn save_layer(archive: &mut NamedArchive, prefix: &str, layer: &EncoderLayer) {
    archive.insert(&format!("{prefix}.ln1.weight"), layer.ln1.weight.clone());
    archive.insert(&format!("{prefix}.ln1.bias"), layer.ln1.bias.clone());
    archive.insert(&format!("{prefix}.attn.w_qkv"), layer.attn.w_qkv.clone());
    archive.insert(&format!("{prefix}.attn.b_qkv"), layer.attn.b_qkv.clone());
    archive.insert(&format!("{prefix}.attn.w_out"), layer.attn.w_out.clone());
    archive.insert(&format!("{prefix}.attn.b_out"), layer.attn.b_out.clone());
    archive.insert(&format!("{prefix}.ln2.weight"), layer.ln2.weight.clone());
    archive.insert(&format!("{prefix}.ln2.bias"), layer.ln2.bias.clone());
    archive.insert(&format!("{prefix}.mlp.w1"), layer.mlp.w1.clone());
    archive.insert(&format!("{prefix}.mlp.b1"), layer.mlp.b1.clone());
    archive.insert(&format!("{prefix}.mlp.w2"), layer.mlp.w2.clone());
    archive.insert(&format!("{prefix}.mlp.b2"), layer.mlp.b2.clone());
}

pub(crate) fn load_layer(
    archive: &NamedArchive,
    prefix: &str,
    width: usize,
    heads: usize,
) -> Result<EncoderLayer> {
    let w1 = require_2d_any(archive, &format!("{prefix}.mlp.w1"))?;
    let hidden = w1.nrows();
    Ok(EncoderLayer {
        ln1: LayerNorm {
            weight: archive.require_1d(&format!("{prefix}.ln1.weight"), width)?,
            bias: archive.require_1d(&format!("{prefix}.ln1.bias"), width)?,
        },
        attn: Attention {
            w_qkv: archive.require_2d(&format!("{prefix}.attn.w_qkv"), (3 * width, width))?,
            b_qkv: archive.require_1d(&format!("{prefix}.attn.b_qkv"), 3 * width)?,
            w_out: archive.require_2d(&format!("{prefix}.attn.w_out"), (width, width))?,
            b_out: archive.require_1d(&format!("{prefix}.attn.b_out"), width)?,
            heads,
        },
        ln2: LayerNorm {
            weight: archive.require_1d(&format!("{prefix}.ln2.weight"), width)?,
            bias: archive.require_1d(&format!("{prefix}.ln2.bias"), width)?,
        },
        mlp: Mlp {
            w1,
            b1: archive.require_1d(&format!("{prefix}.mlp.b1"), hidden)?,
            w2: archive.require_2d(&format!("{prefix}.mlp.w2"), (width, hidden))?,
            b2: archive.require_1d(&format!("{prefix}.mlp.b2"), width)?,
        },
    })
}

pub(crate) fn require_2d_any(archive: &NamedArchive, name: &str) -> Result<Array2<f64>> {
    let arr = archive.require(name)?;
    arr.clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| GlocalError::ShapeMismatch {
            name: name.to_string(),
            expected: vec![0, 0],
            found: arr.shape().to_vec(),
        })
}

// ---------------------------------------------------------------------------
// Forward / backward

/// One augmented position: where its input embedding came from.
#[derive(Clone, Copy, Debug)]
enum AugSlot {
    Fixed,
    Bank { polarity: Polarity, row: usize },
    /// Column of the first deep-token block.
    Deep(usize),
}

/// Everything needed to replay the forward pass in reverse.
#[derive(Debug)]
pub struct TextForwardCache {
    branch: Branch,
    aug: Vec<AugSlot>,
    deep_depth: usize,
    deep_len: usize,
    layer_caches: Vec<EncoderLayerCache>,
    ln_cache: LayerNormCache,
    projected: Array1<f64>,
}

/// Encode one composed prompt into a unit vector in the joint space.
///
/// `deep_depth` is the number of leading layers that consume fresh deep
/// tokens (usually `cfg.deep_prompt_depth`); `bank.deep_tokens` must
/// hold at least that many blocks.
pub fn encode_prompt(
    tower: &TextTower,
    seq: &TokenSequence,
    bank: &PromptBank,
    deep_depth: usize,
) -> Result<(Array1<f64>, TextForwardCache)> {
    if deep_depth > tower.layers.len() {
        return Err(GlocalError::InvalidConfig {
            constraint: "deep_prompt_depth <= text layers".to_string(),
            detail: format!("{} > {}", deep_depth, tower.layers.len()),
        });
    }
    if deep_depth > bank.deep_tokens.len() {
        return Err(GlocalError::InvalidConfig {
            constraint: "deep tokens cover deep_prompt_depth".to_string(),
            detail: format!("{} blocks < depth {}", bank.deep_tokens.len(), deep_depth),
        });
    }
    let deep_len = if deep_depth > 0 {
        bank.deep_tokens[0].nrows()
    } else {
        0
    };

    // Splice the deep positions right after the start marker.
    let mut aug: Vec<AugSlot> = Vec::with_capacity(seq.slots.len() + deep_len);
    let mut fixed_ids: Vec<Option<usize>> = Vec::with_capacity(seq.slots.len() + deep_len);
    let to_aug = |slot: &Slot| match *slot {
        Slot::Fixed(_) => AugSlot::Fixed,
        Slot::Bank { polarity, row } => AugSlot::Bank { polarity, row },
    };
    aug.push(to_aug(&seq.slots[0]));
    fixed_ids.push(match seq.slots[0] {
        Slot::Fixed(id) => Some(id),
        _ => None,
    });
    for col in 0..deep_len {
        aug.push(AugSlot::Deep(col));
        fixed_ids.push(None);
    }
    for slot in &seq.slots[1..] {
        aug.push(to_aug(slot));
        fixed_ids.push(match *slot {
            Slot::Fixed(id) => Some(id),
            _ => None,
        });
    }

    let n = aug.len();
    if n > tower.context_length() {
        return Err(GlocalError::ContextOverflow {
            needed: n,
            context: tower.context_length(),
        });
    }

    let width = tower.width();
    let mut x = Array2::zeros((n, width));
    for (i, slot) in aug.iter().enumerate() {
        let row = match *slot {
            AugSlot::Fixed => tower.token_embedding.row(fixed_ids[i].expect("fixed id")),
            AugSlot::Bank { polarity, row } => bank.bank(seq.branch, polarity).row(row),
            AugSlot::Deep(col) => bank.deep_tokens[0].row(col),
        };
        x.row_mut(i).assign(&row);
        let pos = tower.positional_embedding.row(i);
        x.row_mut(i).zip_mut_with(&pos, |a, &b| *a += b);
    }

    let mut layer_caches = Vec::with_capacity(tower.layers.len());
    for (idx, layer) in tower.layers.iter().enumerate() {
        if idx >= 1 && idx < deep_depth {
            for col in 0..deep_len {
                x.row_mut(1 + col).assign(&bank.deep_tokens[idx].row(col));
            }
        }
        let (next, cache) = layer.forward(&x, AttnMode::Causal);
        layer_caches.push(cache);
        x = next;
    }

    let (final_states, ln_cache) = tower.ln_final.forward(&x);
    let pooled = final_states.row(n - 1).to_owned();
    let projected = tower.projection.dot(&pooled);
    let out = l2_normalize(&projected);

    Ok((
        out,
        TextForwardCache {
            branch: seq.branch,
            aug,
            deep_depth,
            deep_len,
            layer_caches,
            ln_cache,
            projected,
        },
    ))
}

/// Accumulate `d(loss)/d(bank)` for one encoded prompt given the
/// gradient of the loss with respect to the output unit vector.
pub fn encode_prompt_backward(
    tower: &TextTower,
    cache: &TextForwardCache,
    grad_out: &Array1<f64>,
    grads: &mut PromptGrads,
) {
    let n = cache.aug.len();
    let width = tower.width();

    let d_projected = l2_normalize_backward(&cache.projected, grad_out);
    let d_pooled = tower.projection.t().dot(&d_projected);
    // `projected = projection . pooled` and `pooled` is frozen LN output
    // at the end position; scatter back into the final hidden states.
    let mut d_states = Array2::zeros((n, width));
    d_states.row_mut(n - 1).assign(&d_pooled);

    let mut dx = tower.ln_final.backward(&cache.ln_cache, &d_states);
    for idx in (0..tower.layers.len()).rev() {
        dx = tower.layers[idx].backward(&cache.layer_caches[idx], &dx);
        if idx >= 1 && idx < cache.deep_depth {
            // These positions were overwritten on the way up: their
            // gradient belongs to deep block `idx`, and nothing flows
            // further down through them.
            for col in 0..cache.deep_len {
                let row = dx.row(1 + col).to_owned();
                grads.deep_tokens[idx]
                    .row_mut(col)
                    .zip_mut_with(&row, |a, &b| *a += b);
                dx.row_mut(1 + col).fill(0.0);
            }
        }
    }

    for (i, slot) in cache.aug.iter().enumerate() {
        match *slot {
            AugSlot::Fixed => {}
            AugSlot::Bank { polarity, row } => {
                let g = dx.row(i).to_owned();
                grads
                    .bank_mut(cache.branch, polarity)
                    .row_mut(row)
                    .zip_mut_with(&g, |a, &b| *a += b);
            }
            AugSlot::Deep(col) => {
                let g = dx.row(i).to_owned();
                grads.deep_tokens[0]
                    .row_mut(col)
                    .zip_mut_with(&g, |a, &b| *a += b);
            }
        }
    }
}

/// The four glocal text embeddings, all unit vectors in the joint space.
#[derive(Clone, Debug)]
pub struct GlocalTextEmbeddings {
    pub global_normal: Array1<f64>,
    pub global_anomaly: Array1<f64>,
    pub local_normal: Array1<f64>,
    pub local_anomaly: Array1<f64>,
}

/// Caches for the four prompts in the same order as the embeddings.
pub struct EncodeAllCaches {
    pub global_normal: TextForwardCache,
    pub global_anomaly: TextForwardCache,
    pub local_normal: TextForwardCache,
    pub local_anomaly: TextForwardCache,
}

/// Encode all four prompts under the configured ordering.
pub fn encode_all(
    tower: &TextTower,
    bank: &PromptBank,
    cfg: &RunConfig,
) -> Result<GlocalTextEmbeddings> {
    Ok(encode_all_traced(tower, bank, cfg)?.0)
}

/// [`encode_all`] that also returns the forward caches for training.
pub fn encode_all_traced(
    tower: &TextTower,
    bank: &PromptBank,
    cfg: &RunConfig,
) -> Result<(GlocalTextEmbeddings, EncodeAllCaches)> {
    let ctx = tower.context_length();
    let run = |branch, polarity| -> Result<(Array1<f64>, TextForwardCache)> {
        let seq = crate::prompt::compose_sequence(bank, branch, polarity, cfg.prompt_ordering, ctx)?;
        encode_prompt(tower, &seq, bank, cfg.deep_prompt_depth)
    };
    let (global_normal, c_gn) = run(Branch::Global, Polarity::Normal)?;
    let (global_anomaly, c_ga) = run(Branch::Global, Polarity::Anomaly)?;
    let (local_normal, c_ln) = run(Branch::Local, Polarity::Normal)?;
    let (local_anomaly, c_la) = run(Branch::Local, Polarity::Anomaly)?;
    Ok((
        GlocalTextEmbeddings {
            global_normal,
            global_anomaly,
            local_normal,
            local_anomaly,
        },
        EncodeAllCaches {
            global_normal: c_gn,
            global_anomaly: c_ga,
            local_normal: c_ln,
            local_anomaly: c_la,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{compose_sequence, init_bank};

    fn toy_setup() -> (TextTower, RunConfig, PromptBank) {
        let tower = TextTower::toy();
        let mut cfg = RunConfig::toy();
        cfg.normal_prompt_len = 3;
        cfg.anomaly_prompt_len = 2;
        cfg.deep_prompt_len = 2;
        cfg.deep_prompt_depth = 2;
        let bank = init_bank(&cfg, &tower);
        (tower, cfg, bank)
    }

    #[test]
    fn embeddings_are_unit_vectors_and_deterministic() {
        let (tower, cfg, bank) = toy_setup();
        let a = encode_all(&tower, &bank, &cfg).unwrap();
        let b = encode_all(&tower, &bank, &cfg).unwrap();
        for (x, y) in [
            (&a.global_normal, &b.global_normal),
            (&a.global_anomaly, &b.global_anomaly),
            (&a.local_normal, &b.local_normal),
            (&a.local_anomaly, &b.local_anomaly),
        ] {
            assert!((x.dot(x) - 1.0).abs() < 1e-12);
            assert_eq!(x, y);
        }
        assert_eq!(a.global_normal.len(), tower.joint_dim());
    }

    #[test]
    fn identical_bank_rows_give_identical_branch_embeddings() {
        let (tower, cfg, mut bank) = toy_setup();
        bank.local_normal = bank.global_normal.clone();
        bank.local_anomaly = bank.global_anomaly.clone();
        let e = encode_all(&tower, &bank, &cfg).unwrap();
        assert_eq!(e.global_normal, e.local_normal);
        assert_eq!(e.global_anomaly, e.local_anomaly);
    }

    #[test]
    fn deep_tokens_at_tuned_layers_change_the_output() {
        let (tower, cfg, bank) = toy_setup();
        let seq = compose_sequence(
            &bank,
            Branch::Global,
            Polarity::Normal,
            cfg.prompt_ordering,
            tower.context_length(),
        )
        .unwrap();

        let (base, _) = encode_prompt(&tower, &seq, &bank, 2).unwrap();

        // Perturbing the block consumed by layer 2 (within depth).
        let mut deeper = bank.clone();
        deeper.deep_tokens[1][[0, 0]] += 0.5;
        let (changed, _) = encode_prompt(&tower, &seq, &deeper, 2).unwrap();
        assert_ne!(base, changed);

        // With depth 1, block index 1 is never consumed.
        let (base_d1, _) = encode_prompt(&tower, &seq, &bank, 1).unwrap();
        let (same, _) = encode_prompt(&tower, &seq, &deeper, 1).unwrap();
        assert_eq!(base_d1, same);
    }

    #[test]
    fn excess_depth_is_rejected() {
        let (tower, cfg, bank) = toy_setup();
        let seq = compose_sequence(
            &bank,
            Branch::Global,
            Polarity::Normal,
            cfg.prompt_ordering,
            tower.context_length(),
        )
        .unwrap();
        assert!(encode_prompt(&tower, &seq, &bank, 3).is_err());
    }

    #[test]
    fn sequence_plus_deep_tokens_must_fit_context() {
        let (tower, cfg, mut bank) = toy_setup();
        bank.global_normal = Array2::zeros((74, tower.width()));
        let seq = compose_sequence(
            &bank,
            Branch::Global,
            Polarity::Normal,
            cfg.prompt_ordering,
            tower.context_length(),
        )
        .unwrap();
        // 77 slots alone fit, but adding 2 deep tokens overflows.
        let err = encode_prompt(&tower, &seq, &bank, 2).unwrap_err();
        assert!(matches!(err, GlocalError::ContextOverflow { .. }));
    }

    #[test]
    fn bank_gradients_match_finite_differences() {
        let (tower, cfg, bank) = toy_setup();
        let seq = compose_sequence(
            &bank,
            Branch::Local,
            Polarity::Anomaly,
            cfg.prompt_ordering,
            tower.context_length(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cot = Array1::from_shape_fn(tower.joint_dim(), |_| {
            let v: f64 = rng.sample(StandardNormal);
            v
        });

        let (_, cache) = encode_prompt(&tower, &seq, &bank, cfg.deep_prompt_depth).unwrap();
        let mut grads = PromptGrads::zeros_like(&bank);
        encode_prompt_backward(&tower, &cache, &cot, &mut grads);

        let scalar = |b: &PromptBank| -> f64 {
            let (out, _) = encode_prompt(&tower, &seq, b, cfg.deep_prompt_depth).unwrap();
            out.dot(&cot)
        };

        let eps = 1e-6;
        let mut checked = 0usize;
        // Probe entries in every trainable array this sequence touches
        // (local banks + both deep blocks), plus one it must not touch.
        let probes: Vec<(usize, usize, usize)> = vec![
            (2, 0, 3), // local_normal
            (2, 2, 7),
            (3, 0, 0), // local_anomaly
            (3, 1, 5),
            (4, 0, 2), // deep block 1
            (4, 1, 9),
            (5, 0, 0), // deep block 2
            (5, 1, 11),
        ];
        for (param_idx, r, c) in probes {
            let mut plus = bank.clone();
            plus.params_mut()[param_idx][[r, c]] += eps;
            let mut minus = bank.clone();
            minus.params_mut()[param_idx][[r, c]] -= eps;
            let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * eps);
            let an = grads.params()[param_idx][[r, c]];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            assert!(
                rel < 1e-4 || (an - fd).abs() < 1e-9,
                "param {param_idx} ({r},{c}): analytic {an}, fd {fd}"
            );
            checked += 1;
        }
        assert_eq!(checked, 8);

        // A local-branch sequence must leave global banks untouched.
        assert!(grads.global_normal.iter().all(|&v| v == 0.0));
        assert!(grads.global_anomaly.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn archive_round_trip_preserves_encodings() {
        let (tower, cfg, bank) = toy_setup();
        let mut archive = NamedArchive::new();
        let mut meta = serde_json::json!({});
        tower.save_into(&mut archive, &mut meta);
        archive.set_meta(meta);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("towers.gar");
        archive.save(&path).unwrap();

        let loaded = TextTower::from_archive(&NamedArchive::load(&path).unwrap()).unwrap();
        let a = encode_all(&tower, &bank, &cfg).unwrap();
        let b = encode_all(&loaded, &bank, &cfg).unwrap();
        assert_eq!(a.global_anomaly, b.global_anomaly);
        assert_eq!(a.local_normal, b.local_normal);
    }
}
