//! Training and evaluation drivers: Adam over the prompt bank (the
//! towers stay frozen), batched gradient accumulation through the text
//! tower, dataset scoring and report assembly.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::data::{load_sample, DatasetIndex, ImageSource, SampleEntry};
use crate::error::{GlocalError, Result};
use crate::metrics::{evaluate_class, summarize, EvalReport};
use crate::objectives::{
    gcl_total, gcl_total_backward, global_loss, global_loss_backward, local_loss,
    local_loss_backward, total_loss, LossReport,
};
use crate::prompt::{init_bank, save_checkpoint, PromptBank, PromptGrads};
use crate::scoring::{
    class_probability, class_probability_backward, local_similarity_maps,
    local_similarity_maps_backward, score_image, ScoredImage,
};
use crate::text::{encode_all_traced, encode_prompt_backward, GlocalTextEmbeddings, TextTower};
use crate::vision::{encode_image, VisualFeatures};

const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction over the prompt-bank arrays, in the bank's
/// fixed parameter order.
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    step: u64,
    first_moments: Vec<Array2<f64>>,
    second_moments: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(bank: &PromptBank, learning_rate: f64, betas: (f64, f64)) -> Self {
        let zeros: Vec<Array2<f64>> = bank
            .params()
            .iter()
            .map(|p| Array2::zeros(p.raw_dim()))
            .collect();
        Adam {
            learning_rate,
            beta1: betas.0,
            beta2: betas.1,
            step: 0,
            first_moments: zeros.clone(),
            second_moments: zeros,
        }
    }

    /// One update over every trainable array.
    pub fn step(&mut self, bank: &mut PromptBank, grads: &PromptGrads) {
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((param, grad), (m, v)) in bank
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .zip(self.first_moments.iter_mut().zip(self.second_moments.iter_mut()))
        {
            ndarray::Zip::from(param)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                });
        }
    }
}

/// A sample with its frozen visual features precomputed.
pub struct PreparedSample {
    pub stem: String,
    pub class: String,
    pub label: u8,
    /// Binary mask at working resolution.
    pub mask: Array2<f64>,
    pub features: VisualFeatures,
}

/// Load and encode every index entry in order. The vision tower is
/// frozen, so features are computed exactly once per sample.
pub fn prepare_samples(
    backbone: &Backbone,
    index: &DatasetIndex,
    cfg: &RunConfig,
) -> Result<Vec<PreparedSample>> {
    index
        .entries
        .iter()
        .map(|entry| Ok(prepare_entry(backbone, entry, cfg)?.0))
        .collect()
}

fn prepare_entry(
    backbone: &Backbone,
    entry: &SampleEntry,
    cfg: &RunConfig,
) -> Result<(PreparedSample, Array3<f64>)> {
    let sample = load_sample(
        entry,
        backbone.vision.input_resolution,
        backbone.vision.image_mean,
        backbone.vision.image_std,
    )?;
    let features = encode_image(&backbone.vision, &sample.image, cfg)?;
    Ok((
        PreparedSample {
            stem: entry.stem.clone(),
            class: entry.class.clone(),
            label: sample.label,
            mask: sample.mask,
            features,
        },
        sample.raw,
    ))
}

/// Accumulators for the gradients on the four text embeddings.
struct EmbeddingGrads {
    global_normal: Array1<f64>,
    global_anomaly: Array1<f64>,
    local_normal: Array1<f64>,
    local_anomaly: Array1<f64>,
}

impl EmbeddingGrads {
    fn zeros(dim: usize) -> Self {
        EmbeddingGrads {
            global_normal: Array1::zeros(dim),
            global_anomaly: Array1::zeros(dim),
            local_normal: Array1::zeros(dim),
            local_anomaly: Array1::zeros(dim),
        }
    }
}

/// Loss of one batch together with the gradients on every prompt-bank
/// array. Per-sample terms are averaged over the batch; the glocal
/// contrast acts once per step on the shared embeddings.
pub fn batch_loss_and_grads(
    text: &TextTower,
    bank: &PromptBank,
    batch: &[&PreparedSample],
    cfg: &RunConfig,
    tau: f64,
) -> Result<(LossReport, PromptGrads)> {
    if batch.is_empty() {
        return Err(GlocalError::MetricInput("empty batch".to_string()));
    }
    let (emb, caches) = encode_all_traced(text, bank, cfg)?;
    let inv_batch = 1.0 / batch.len() as f64;
    let n_taps = cfg.patch_tap_layers.len();
    let mut d_emb = EmbeddingGrads::zeros(emb.global_normal.len());

    let mut global_sum = 0.0;
    let mut local_sums = vec![0.0; n_taps];
    for sample in batch {
        // Global branch: whole-image probability vs the image label.
        let sim_n = emb.global_normal.dot(&sample.features.global);
        let sim_a = emb.global_anomaly.dot(&sample.features.global);
        let (p_n, p_a) = class_probability(sim_n, sim_a, tau);
        global_sum += global_loss(p_a, sample.label);
        let d_p_a = global_loss_backward(p_a, sample.label) * inv_batch;
        let (d_sim_n, d_sim_a) = class_probability_backward(p_n, p_a, 0.0, d_p_a, tau);
        d_emb
            .global_normal
            .zip_mut_with(&sample.features.global, |d, &f| *d += d_sim_n * f);
        d_emb
            .global_anomaly
            .zip_mut_with(&sample.features.global, |d, &f| *d += d_sim_a * f);

        // Local branch: per-tap-layer segmentation losses.
        for (k, grid) in sample.features.grids.iter().enumerate() {
            let (s_n, s_a) = local_similarity_maps(&emb.local_normal, &emb.local_anomaly, grid, tau);
            local_sums[k] += local_loss(
                &s_n,
                &s_a,
                &sample.mask,
                cfg.focal_gamma,
                cfg.focal_alpha,
                cfg.dice_eps,
            )?;
            let (mut d_s_n, mut d_s_a) = local_loss_backward(
                &s_n,
                &s_a,
                &sample.mask,
                cfg.focal_gamma,
                cfg.focal_alpha,
                cfg.dice_eps,
            )?;
            d_s_n *= inv_batch;
            d_s_a *= inv_batch;
            let (g_n, g_a) =
                local_similarity_maps_backward(grid, &s_n, &s_a, &d_s_n, &d_s_a, tau);
            d_emb.local_normal += &g_n;
            d_emb.local_anomaly += &g_a;
        }
    }

    // Glocal contrast over the shared embeddings, once per step.
    let gcl = gcl_total(&emb, cfg.margin);
    if cfg.lambda_gcl != 0.0 {
        let (d_gn, d_ga, d_ln, d_la) = gcl_total_backward(&emb, cfg.margin);
        d_emb.global_normal += &(cfg.lambda_gcl * &d_gn);
        d_emb.global_anomaly += &(cfg.lambda_gcl * &d_ga);
        d_emb.local_normal += &(cfg.lambda_gcl * &d_ln);
        d_emb.local_anomaly += &(cfg.lambda_gcl * &d_la);
    }

    let mut grads = PromptGrads::zeros_like(bank);
    encode_prompt_backward(text, &caches.global_normal, &d_emb.global_normal, &mut grads);
    encode_prompt_backward(text, &caches.global_anomaly, &d_emb.global_anomaly, &mut grads);
    encode_prompt_backward(text, &caches.local_normal, &d_emb.local_normal, &mut grads);
    encode_prompt_backward(text, &caches.local_anomaly, &d_emb.local_anomaly, &mut grads);

    let per_layer: Vec<f64> = local_sums.iter().map(|s| s * inv_batch).collect();
    let report = total_loss(global_sum * inv_batch, &per_layer, gcl, cfg.lambda_gcl);
    Ok((report, grads))
}

/// Forward-only batch loss (used by gradient checks).
pub fn batch_loss(
    text: &TextTower,
    bank: &PromptBank,
    batch: &[&PreparedSample],
    cfg: &RunConfig,
    tau: f64,
) -> Result<LossReport> {
    Ok(batch_loss_and_grads(text, bank, batch, cfg, tau)?.0)
}

/// Loss history of a full run, serialized next to the checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    /// One report per optimization step.
    pub steps: Vec<LossReport>,
    /// Mean report per epoch.
    pub epochs: Vec<LossReport>,
}

/// Artifacts of a completed training run.
pub struct TrainOutput {
    pub bank: PromptBank,
    pub checkpoint: PathBuf,
    pub epoch_checkpoints: Vec<PathBuf>,
    pub history_path: PathBuf,
    pub history: TrainHistory,
}

fn mean_report(reports: &[LossReport], lambda_gcl: f64) -> LossReport {
    let n = reports.len().max(1) as f64;
    let n_layers = reports.first().map(|r| r.per_layer_local.len()).unwrap_or(0);
    let mut per_layer = vec![0.0; n_layers];
    let mut global = 0.0;
    let mut gcl = 0.0;
    for r in reports {
        global += r.global;
        gcl += r.gcl;
        for (acc, v) in per_layer.iter_mut().zip(r.per_layer_local.iter()) {
            *acc += v;
        }
    }
    for v in per_layer.iter_mut() {
        *v /= n;
    }
    total_loss(global / n, &per_layer, gcl / n, lambda_gcl)
}

/// Train the prompt bank against a prepared dataset. Writes one
/// checkpoint per epoch under `out_dir/epochs/`, the final
/// `checkpoint.gar`, and `loss_history.json`. Deterministic in
/// `cfg.seed`.
pub fn train(
    cfg: &RunConfig,
    backbone: &Backbone,
    index: &DatasetIndex,
    out_dir: &Path,
) -> Result<TrainOutput> {
    backbone.validate_config(cfg)?;
    if index.is_empty() {
        return Err(GlocalError::EmptyIndex(out_dir.to_path_buf()));
    }
    let samples = prepare_samples(backbone, index, cfg)?;
    let tau = backbone.tau();

    let mut bank = init_bank(cfg, &backbone.text);
    let mut optimizer = Adam::new(&bank, cfg.learning_rate, cfg.adam_betas);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let epochs_dir = out_dir.join("epochs");
    fs::create_dir_all(&epochs_dir)?;

    let mut history = TrainHistory {
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    let mut epoch_checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_reports = Vec::new();
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (report, grads) = batch_loss_and_grads(&backbone.text, &bank, &batch, cfg, tau)?;
            if !report.is_finite() {
                return Err(GlocalError::NonFiniteLoss { epoch, step });
            }
            optimizer.step(&mut bank, &grads);
            epoch_reports.push(report.clone());
            history.steps.push(report);
        }
        history
            .epochs
            .push(mean_report(&epoch_reports, cfg.lambda_gcl));
        let epoch_path = epochs_dir.join(format!("epoch_{epoch:02}.gar"));
        save_checkpoint(&bank, cfg, &epoch_path)?;
        epoch_checkpoints.push(epoch_path);
    }

    let checkpoint = out_dir.join("checkpoint.gar");
    save_checkpoint(&bank, cfg, &checkpoint)?;
    let history_path = out_dir.join("loss_history.json");
    fs::write(&history_path, serde_json::to_string_pretty(&history)?)?;
    Ok(TrainOutput {
        bank,
        checkpoint,
        epoch_checkpoints,
        history_path,
        history,
    })
}

/// One evaluated sample: identity, truth, and the model outputs needed
/// for metrics and visualization.
pub struct EvaluatedSample {
    pub stem: String,
    pub class: String,
    pub label: u8,
    pub mask: Array2<f64>,
    /// Resized input in `[0, 1]`, for composites.
    pub raw: Array3<f64>,
    pub scored: ScoredImage,
}

/// Score every index entry under a trained bank, in index order.
pub fn score_index(
    cfg: &RunConfig,
    backbone: &Backbone,
    bank: &PromptBank,
    index: &DatasetIndex,
) -> Result<Vec<EvaluatedSample>> {
    backbone.validate_config(cfg)?;
    let embeddings = crate::text::encode_all(&backbone.text, bank, cfg)?;
    let tau = backbone.tau();
    index
        .entries
        .iter()
        .map(|entry| {
            let (prepared, raw) = prepare_entry(backbone, entry, cfg)?;
            let scored = score_image(&embeddings, &prepared.features, cfg, tau)?;
            Ok(EvaluatedSample {
                stem: prepared.stem,
                class: prepared.class,
                label: prepared.label,
                mask: prepared.mask,
                raw,
                scored,
            })
        })
        .collect()
}

/// Aggregate scored samples into per-class metrics and unweighted
/// dataset means. Samples are ordered canonically by (class, stem)
/// first, so the input order never affects the result.
pub fn evaluate_scored(samples: &[EvaluatedSample], fpr_cap: f64) -> Result<EvalReport> {
    let mut ordered: Vec<&EvaluatedSample> = samples.iter().collect();
    ordered.sort_by(|a, b| (&a.class, &a.stem).cmp(&(&b.class, &b.stem)));
    let mut classes: Vec<String> = ordered.iter().map(|s| s.class.clone()).collect();
    classes.dedup();

    let mut rows = Vec::new();
    for class in &classes {
        let of_class: Vec<&&EvaluatedSample> =
            ordered.iter().filter(|s| &s.class == class).collect();
        let scores: Vec<f64> = of_class.iter().map(|s| s.scored.score).collect();
        let labels: Vec<u8> = of_class.iter().map(|s| s.label).collect();
        let maps: Vec<Array2<f64>> = of_class
            .iter()
            .map(|s| s.scored.map.fused.clone())
            .collect();
        let masks: Vec<Array2<f64>> = of_class.iter().map(|s| s.mask.clone()).collect();
        rows.push(evaluate_class(
            class, &scores, &labels, &maps, &masks, fpr_cap,
        )?);
    }
    Ok(summarize(rows))
}

/// Full evaluation: score the index, then aggregate.
pub fn evaluate(
    cfg: &RunConfig,
    backbone: &Backbone,
    bank: &PromptBank,
    index: &DatasetIndex,
) -> Result<(EvalReport, Vec<EvaluatedSample>)> {
    let samples = score_index(cfg, backbone, bank, index)?;
    let report = evaluate_scored(&samples, cfg.aupro_fpr_cap)?;
    Ok((report, samples))
}

/// Score a single image file end to end.
pub fn infer_image(
    cfg: &RunConfig,
    backbone: &Backbone,
    bank: &PromptBank,
    image: &Path,
) -> Result<EvaluatedSample> {
    let entry = SampleEntry {
        image: ImageSource::Disk(image.to_path_buf()),
        mask: None,
        label: 0,
        class: "inference".to_string(),
        defect: "unknown".to_string(),
        stem: image
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string(),
    };
    let mut scored = score_index(cfg, backbone, bank, &DatasetIndex {
        entries: vec![entry],
        classes: vec!["inference".to_string()],
        source: crate::data::DataSource::Disk,
    })?;
    Ok(scored.remove(0))
}

/// The four text embeddings as labeled JSON rows; reruns are
/// byte-identical.
pub fn embeddings_to_json(emb: &GlocalTextEmbeddings) -> serde_json::Value {
    let row = |name: &str, v: &Array1<f64>| {
        serde_json::json!({ "name": name, "vector": v.to_vec() })
    };
    serde_json::Value::Array(vec![
        row("global_normal", &emb.global_normal),
        row("global_anomaly", &emb.global_anomaly),
        row("local_normal", &emb.local_normal),
        row("local_anomaly", &emb.local_anomaly),
    ])
}
