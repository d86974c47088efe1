//! Learnable prompt state: four object-agnostic banks (global/local x
//! normal/anomaly), per-layer deep tokens, token-sequence composition
//! and checkpoint round-tripping.
//!
//! Checkpoints are [`NamedArchive`](crate::archive::NamedArchive) files
//! with the entries `prompt.global.normal`, `prompt.global.anomaly`,
//! `prompt.local.normal`, `prompt.local.anomaly` and
//! `deep.layer.<i>` (1-based), plus the run configuration embedded in
//! the metadata document.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::NamedArchive;
use crate::config::{PromptOrdering, RunConfig};
use crate::error::{GlocalError, Result};

/// Normal vs anomaly side of a prompt pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Normal,
    Anomaly,
}

/// Global (image-level) vs local (pixel-level) prompt branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Global,
    Local,
}

/// Frozen vocabulary ids the prompts rely on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordIds {
    pub sot: usize,
    pub eot: usize,
    pub object: usize,
    pub damaged: usize,
}

/// One position of a composed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Frozen vocabulary token.
    Fixed(usize),
    /// Learnable row of the sequence branch's bank with this polarity.
    Bank { polarity: Polarity, row: usize },
}

/// A composed prompt: which branch/polarity it encodes and the ordered
/// slots between (and including) the start and end markers.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub branch: Branch,
    pub polarity: Polarity,
    pub slots: Vec<Slot>,
}

/// All trainable state. Each bank row is a `width`-dimensional token
/// embedding; `deep_tokens[i]` holds the fresh tokens spliced in before
/// text layer `i + 1`.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub global_normal: Array2<f64>,
    pub global_anomaly: Array2<f64>,
    pub local_normal: Array2<f64>,
    pub local_anomaly: Array2<f64>,
    pub deep_tokens: Vec<Array2<f64>>,
    pub word_ids: WordIds,
}

impl PromptBank {
    pub fn bank(&self, branch: Branch, polarity: Polarity) -> &Array2<f64> {
        match (branch, polarity) {
            (Branch::Global, Polarity::Normal) => &self.global_normal,
            (Branch::Global, Polarity::Anomaly) => &self.global_anomaly,
            (Branch::Local, Polarity::Normal) => &self.local_normal,
            (Branch::Local, Polarity::Anomaly) => &self.local_anomaly,
        }
    }

    /// Trainable arrays in the fixed optimizer order.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![
            &self.global_normal,
            &self.global_anomaly,
            &self.local_normal,
            &self.local_anomaly,
        ];
        v.extend(self.deep_tokens.iter());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut v = vec![
            &mut self.global_normal,
            &mut self.global_anomaly,
            &mut self.local_normal,
            &mut self.local_anomaly,
        ];
        v.extend(self.deep_tokens.iter_mut());
        v
    }
}

/// Gradient accumulator with the same shapes as a [`PromptBank`].
#[derive(Clone, Debug)]
pub struct PromptGrads {
    pub global_normal: Array2<f64>,
    pub global_anomaly: Array2<f64>,
    pub local_normal: Array2<f64>,
    pub local_anomaly: Array2<f64>,
    pub deep_tokens: Vec<Array2<f64>>,
}

impl PromptGrads {
    pub fn zeros_like(bank: &PromptBank) -> Self {
        Self {
            global_normal: Array2::zeros(bank.global_normal.raw_dim()),
            global_anomaly: Array2::zeros(bank.global_anomaly.raw_dim()),
            local_normal: Array2::zeros(bank.local_normal.raw_dim()),
            local_anomaly: Array2::zeros(bank.local_anomaly.raw_dim()),
            deep_tokens: bank
                .deep_tokens
                .iter()
                .map(|t| Array2::zeros(t.raw_dim()))
                .collect(),
        }
    }

    pub fn bank_mut(&mut self, branch: Branch, polarity: Polarity) -> &mut Array2<f64> {
        match (branch, polarity) {
            (Branch::Global, Polarity::Normal) => &mut self.global_normal,
            (Branch::Global, Polarity::Anomaly) => &mut self.global_anomaly,
            (Branch::Local, Polarity::Normal) => &mut self.local_normal,
            (Branch::Local, Polarity::Anomaly) => &mut self.local_anomaly,
        }
    }

    /// Arrays in the same fixed order as [`PromptBank::params`].
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut v = vec![
            &self.global_normal,
            &self.global_anomaly,
            &self.local_normal,
            &self.local_anomaly,
        ];
        v.extend(self.deep_tokens.iter());
        v
    }

    pub fn scale(&mut self, factor: f64) {
        let arrays = vec![
            &mut self.global_normal,
            &mut self.global_anomaly,
            &mut self.local_normal,
            &mut self.local_anomaly,
        ];
        for a in arrays {
            a.mapv_inplace(|v| v * factor);
        }
        for t in &mut self.deep_tokens {
            t.mapv_inplace(|v| v * factor);
        }
    }
}

/// What [`init_bank`] needs to know about the text side: the embedding
/// rows of a neutral carrier phrase and the frozen word ids.
pub trait CarrierSource {
    fn embedding_row(&self, id: usize) -> ndarray::ArrayView1<'_, f64>;
    fn carrier_ids(&self) -> &[usize];
    fn word_ids(&self) -> WordIds;
    fn width(&self) -> usize;
}

/// Initialize all banks from the carrier-phrase embeddings (cycled to
/// the requested length) plus zero-mean Gaussian noise of scale
/// `cfg.init_noise_scale`, deterministically under `cfg.seed`. Deep
/// tokens start as pure noise of the same scale.
pub fn init_bank<C: CarrierSource>(cfg: &RunConfig, carrier: &C) -> PromptBank {
    init_bank_with_noise(cfg, carrier, cfg.init_noise_scale)
}

/// [`init_bank`] with an explicit noise scale (0 reproduces the carrier
/// embeddings exactly).
pub fn init_bank_with_noise<C: CarrierSource>(
    cfg: &RunConfig,
    carrier: &C,
    noise_scale: f64,
) -> PromptBank {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = carrier.width();
    let ids = carrier.carrier_ids();
    assert!(!ids.is_empty(), "carrier phrase must be nonempty");

    let carrier_bank = |rows: usize, rng: &mut ChaCha8Rng| -> Array2<f64> {
        let mut bank = Array2::zeros((rows, width));
        for r in 0..rows {
            let src = carrier.embedding_row(ids[r % ids.len()]);
            for c in 0..width {
                let noise: f64 = StandardNormal.sample(rng);
                bank[[r, c]] = src[c] + noise * noise_scale;
            }
        }
        bank
    };

    let global_normal = carrier_bank(cfg.normal_prompt_len, &mut rng);
    let global_anomaly = carrier_bank(cfg.anomaly_prompt_len, &mut rng);
    let local_normal = carrier_bank(cfg.normal_prompt_len, &mut rng);
    let local_anomaly = carrier_bank(cfg.anomaly_prompt_len, &mut rng);

    let deep_tokens = (0..cfg.deep_prompt_depth)
        .map(|_| {
            Array2::from_shape_fn((cfg.deep_prompt_len, width), |_| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                noise * noise_scale
            })
        })
        .collect();

    PromptBank {
        global_normal,
        global_anomaly,
        local_normal,
        local_anomaly,
        deep_tokens,
        word_ids: carrier.word_ids(),
    }
}

/// Compose the slot sequence for one branch/polarity pair.
///
/// The normal prompt is `[SOT][normal block][object][EOT]` regardless of
/// ordering. Anomaly prompts place the blocks per `ordering`, with the
/// fixed word `damaged` immediately before `object`:
///
/// * `N-A-obj`: `[SOT][N][A][damaged][object][EOT]`
/// * `A-N-obj`: `[SOT][A][N][damaged][object][EOT]`
/// * `N-obj-A`: `[SOT][N][damaged][object][A][EOT]`
pub fn compose_sequence(
    bank: &PromptBank,
    branch: Branch,
    polarity: Polarity,
    ordering: PromptOrdering,
    context_length: usize,
) -> Result<TokenSequence> {
    let ids = bank.word_ids;
    let normal_rows = bank.bank(branch, Polarity::Normal).nrows();
    let anomaly_rows = bank.bank(branch, Polarity::Anomaly).nrows();

    let normal_block = (0..normal_rows).map(|row| Slot::Bank {
        polarity: Polarity::Normal,
        row,
    });
    let anomaly_block = (0..anomaly_rows).map(|row| Slot::Bank {
        polarity: Polarity::Anomaly,
        row,
    });

    let mut slots = vec![Slot::Fixed(ids.sot)];
    match polarity {
        Polarity::Normal => {
            slots.extend(normal_block);
            slots.push(Slot::Fixed(ids.object));
        }
        Polarity::Anomaly => match ordering {
            PromptOrdering::NormalAnomalyObject => {
                slots.extend(normal_block);
                slots.extend(anomaly_block);
                slots.push(Slot::Fixed(ids.damaged));
                slots.push(Slot::Fixed(ids.object));
            }
            PromptOrdering::AnomalyNormalObject => {
                slots.extend(anomaly_block);
                slots.extend(normal_block);
                slots.push(Slot::Fixed(ids.damaged));
                slots.push(Slot::Fixed(ids.object));
            }
            PromptOrdering::NormalObjectAnomaly => {
                slots.extend(normal_block);
                slots.push(Slot::Fixed(ids.damaged));
                slots.push(Slot::Fixed(ids.object));
                slots.extend(anomaly_block);
            }
        },
    }
    slots.push(Slot::Fixed(ids.eot));

    if slots.len() > context_length {
        return Err(GlocalError::ContextOverflow {
            needed: slots.len(),
            context: context_length,
        });
    }
    Ok(TokenSequence {
        branch,
        polarity,
        slots,
    })
}

const KEY_GLOBAL_NORMAL: &str = "prompt.global.normal";
const KEY_GLOBAL_ANOMALY: &str = "prompt.global.anomaly";
const KEY_LOCAL_NORMAL: &str = "prompt.local.normal";
const KEY_LOCAL_ANOMALY: &str = "prompt.local.anomaly";

fn deep_key(one_based: usize) -> String {
    format!("deep.layer.{one_based}")
}

/// Persist the bank and its run configuration. f64 payloads round-trip
/// bit-exactly.
pub fn save_checkpoint(bank: &PromptBank, cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut archive = NamedArchive::new();
    archive.set_meta(serde_json::json!({
        "kind": "prompt-checkpoint",
        "config": cfg,
        "word_ids": bank.word_ids,
    }));
    archive.insert(KEY_GLOBAL_NORMAL, bank.global_normal.clone());
    archive.insert(KEY_GLOBAL_ANOMALY, bank.global_anomaly.clone());
    archive.insert(KEY_LOCAL_NORMAL, bank.local_normal.clone());
    archive.insert(KEY_LOCAL_ANOMALY, bank.local_anomaly.clone());
    for (i, tokens) in bank.deep_tokens.iter().enumerate() {
        archive.insert(&deep_key(i + 1), tokens.clone());
    }
    archive.save(path)
}

/// Load a checkpoint, validating every entry's shape against the
/// embedded configuration.
pub fn load_checkpoint(path: &Path) -> Result<(PromptBank, RunConfig)> {
    let archive = NamedArchive::load(path)?;
    let cfg: RunConfig = serde_json::from_value(archive.meta()["config"].clone())?;
    let word_ids: WordIds = serde_json::from_value(archive.meta()["word_ids"].clone())?;

    let global_normal = archive.require(KEY_GLOBAL_NORMAL)?;
    if global_normal.ndim() != 2 {
        return Err(GlocalError::ShapeMismatch {
            name: KEY_GLOBAL_NORMAL.to_string(),
            expected: vec![cfg.normal_prompt_len, 0],
            found: global_normal.shape().to_vec(),
        });
    }
    let width = global_normal.shape()[1];

    let global_normal = archive.require_2d(KEY_GLOBAL_NORMAL, (cfg.normal_prompt_len, width))?;
    let global_anomaly = archive.require_2d(KEY_GLOBAL_ANOMALY, (cfg.anomaly_prompt_len, width))?;
    let local_normal = archive.require_2d(KEY_LOCAL_NORMAL, (cfg.normal_prompt_len, width))?;
    let local_anomaly = archive.require_2d(KEY_LOCAL_ANOMALY, (cfg.anomaly_prompt_len, width))?;
    let deep_tokens = (1..=cfg.deep_prompt_depth)
        .map(|i| archive.require_2d(&deep_key(i), (cfg.deep_prompt_len, width)))
        .collect::<Result<Vec<_>>>()?;

    Ok((
        PromptBank {
            global_normal,
            global_anomaly,
            local_normal,
            local_anomaly,
            deep_tokens,
            word_ids,
        },
        cfg,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// Minimal carrier: embedding table is the identity-ish ramp so the
    /// carrier rows are easy to recognize.
    struct FakeCarrier {
        table: Array2<f64>,
        ids: Vec<usize>,
    }

    impl CarrierSource for FakeCarrier {
        fn embedding_row(&self, id: usize) -> ndarray::ArrayView1<'_, f64> {
            self.table.row(id)
        }
        fn carrier_ids(&self) -> &[usize] {
            &self.ids
        }
        fn word_ids(&self) -> WordIds {
            WordIds {
                sot: 0,
                eot: 1,
                object: 2,
                damaged: 3,
            }
        }
        fn width(&self) -> usize {
            self.table.ncols()
        }
    }

    fn fake_carrier() -> FakeCarrier {
        FakeCarrier {
            table: Array2::from_shape_fn((8, 6), |(i, j)| (i * 10 + j) as f64 * 0.01),
            ids: vec![4, 5, 6],
        }
    }

    fn small_cfg() -> RunConfig {
        RunConfig {
            normal_prompt_len: 3,
            anomaly_prompt_len: 2,
            deep_prompt_len: 2,
            deep_prompt_depth: 2,
            ..RunConfig::toy()
        }
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let cfg = small_cfg();
        let carrier = fake_carrier();
        let a = init_bank(&cfg, &carrier);
        let b = init_bank(&cfg, &carrier);
        assert_eq!(a.global_normal, b.global_normal);
        assert_eq!(a.deep_tokens, b.deep_tokens);

        let mut other = cfg.clone();
        other.seed = 1;
        let c = init_bank(&other, &carrier);
        assert_ne!(a.global_normal, c.global_normal);
    }

    #[test]
    fn zero_noise_reproduces_carrier_embeddings() {
        let cfg = small_cfg();
        let carrier = fake_carrier();
        let bank = init_bank_with_noise(&cfg, &carrier, 0.0);
        for r in 0..cfg.normal_prompt_len {
            let src = carrier.embedding_row(carrier.ids[r % carrier.ids.len()]);
            for c in 0..carrier.width() {
                assert_eq!(bank.global_normal[[r, c]], src[c]);
                assert_eq!(bank.local_normal[[r, c]], src[c]);
            }
        }
        for tokens in &bank.deep_tokens {
            assert!(tokens.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn banks_are_distinct_parameters() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg, &fake_carrier());
        // Same carrier, different noise draws.
        assert_ne!(bank.global_normal, bank.local_normal);
        assert_ne!(bank.global_anomaly, bank.local_anomaly);
        assert_eq!(bank.params().len(), 4 + cfg.deep_prompt_depth);
    }

    #[test]
    fn single_row_banks_compose() {
        let mut cfg = small_cfg();
        cfg.normal_prompt_len = 1;
        cfg.anomaly_prompt_len = 1;
        let bank = init_bank(&cfg, &fake_carrier());
        let seq = compose_sequence(
            &bank,
            Branch::Global,
            Polarity::Anomaly,
            PromptOrdering::NormalAnomalyObject,
            77,
        )
        .unwrap();
        // SOT + N + A + damaged + object + EOT
        assert_eq!(seq.slots.len(), 6);
    }

    #[test]
    fn slot_counts_match_block_sizes() {
        let mut cfg = small_cfg();
        cfg.normal_prompt_len = 13;
        cfg.anomaly_prompt_len = 10;
        let carrier = fake_carrier();
        let mut bank = init_bank(&cfg, &carrier);
        bank.global_normal = Array2::zeros((13, 6));
        bank.global_anomaly = Array2::zeros((10, 6));

        let anomaly = compose_sequence(
            &bank,
            Branch::Global,
            Polarity::Anomaly,
            PromptOrdering::NormalAnomalyObject,
            77,
        )
        .unwrap();
        assert_eq!(anomaly.slots.len(), 27);

        let normal = compose_sequence(
            &bank,
            Branch::Global,
            Polarity::Normal,
            PromptOrdering::NormalAnomalyObject,
            77,
        )
        .unwrap();
        assert_eq!(normal.slots.len(), 16);
    }

    #[test]
    fn orderings_place_blocks_and_fixed_words_correctly() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg, &fake_carrier());
        let ids = bank.word_ids;

        let tail = |seq: &TokenSequence| seq.slots.clone();

        let nao = tail(
            &compose_sequence(
                &bank,
                Branch::Local,
                Polarity::Anomaly,
                PromptOrdering::NormalAnomalyObject,
                77,
            )
            .unwrap(),
        );
        // [SOT][N x3][A x2][damaged][object][EOT]
        assert_eq!(nao[0], Slot::Fixed(ids.sot));
        assert!(matches!(nao[1], Slot::Bank { polarity: Polarity::Normal, row: 0 }));
        assert!(matches!(nao[4], Slot::Bank { polarity: Polarity::Anomaly, row: 0 }));
        assert_eq!(nao[6], Slot::Fixed(ids.damaged));
        assert_eq!(nao[7], Slot::Fixed(ids.object));
        assert_eq!(nao[8], Slot::Fixed(ids.eot));

        let ano = tail(
            &compose_sequence(
                &bank,
                Branch::Local,
                Polarity::Anomaly,
                PromptOrdering::AnomalyNormalObject,
                77,
            )
            .unwrap(),
        );
        assert!(matches!(ano[1], Slot::Bank { polarity: Polarity::Anomaly, row: 0 }));
        assert!(matches!(ano[3], Slot::Bank { polarity: Polarity::Normal, row: 0 }));
        assert_eq!(ano[6], Slot::Fixed(ids.damaged));
        assert_eq!(ano[7], Slot::Fixed(ids.object));

        let noa = tail(
            &compose_sequence(
                &bank,
                Branch::Local,
                Polarity::Anomaly,
                PromptOrdering::NormalObjectAnomaly,
                77,
            )
            .unwrap(),
        );
        // Fixed word `object` precedes the anomaly block.
        assert_eq!(noa[4], Slot::Fixed(ids.damaged));
        assert_eq!(noa[5], Slot::Fixed(ids.object));
        assert!(matches!(noa[6], Slot::Bank { polarity: Polarity::Anomaly, row: 0 }));
        assert_eq!(noa[8], Slot::Fixed(ids.eot));
    }

    #[test]
    fn normal_prompt_shares_rows_across_orderings() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg, &fake_carrier());
        for ordering in [
            PromptOrdering::NormalAnomalyObject,
            PromptOrdering::AnomalyNormalObject,
            PromptOrdering::NormalObjectAnomaly,
        ] {
            let seq =
                compose_sequence(&bank, Branch::Global, Polarity::Normal, ordering, 77).unwrap();
            assert_eq!(seq.slots.len(), 1 + 3 + 1 + 1);
            assert_eq!(seq.slots[4], Slot::Fixed(bank.word_ids.object));
        }
    }

    #[test]
    fn context_overflow_is_rejected() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg, &fake_carrier());
        let err = compose_sequence(
            &bank,
            Branch::Global,
            Polarity::Anomaly,
            PromptOrdering::NormalAnomalyObject,
            5,
        )
        .unwrap_err();
        assert!(matches!(err, GlocalError::ContextOverflow { .. }));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg, &fake_carrier());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.gar");

        save_checkpoint(&bank, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();

        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded.word_ids, bank.word_ids);
        for (a, b) in bank.params().iter().zip(loaded.params().iter()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_missing_key_is_reported() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg, &fake_carrier());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.gar");
        save_checkpoint(&bank, &cfg, &path).unwrap();

        // Rewrite the archive without one required entry.
        let full = NamedArchive::load(&path).unwrap();
        let mut pruned = NamedArchive::new();
        pruned.set_meta(full.meta().clone());
        for name in full.names() {
            if name != "prompt.local.anomaly" {
                pruned.insert(name, full.get(name).unwrap().clone());
            }
        }
        pruned.save(&path).unwrap();

        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, GlocalError::MissingEntry(name) if name == "prompt.local.anomaly"));
    }

    #[test]
    fn checkpoint_shape_mismatch_is_reported() {
        let cfg = small_cfg();
        let bank = init_bank(&cfg, &fake_carrier());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.gar");

        let mut wrong_cfg = cfg.clone();
        wrong_cfg.normal_prompt_len = 5;
        save_checkpoint(&bank, &wrong_cfg, &path).unwrap();

        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, GlocalError::ShapeMismatch { .. }));
    }
}
