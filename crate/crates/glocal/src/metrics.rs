//! Evaluation metrics: image-level AUROC and average precision,
//! pixel-level AUROC, and region-aware AUPRO, plus per-class report
//! aggregation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{GlocalError, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(GlocalError::MetricInput(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GlocalError::MetricInput("non-finite score".to_string()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(GlocalError::MetricInput("label outside {0,1}".to_string()));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann–Whitney statistic:
/// `P(score+ > score-) + P(tie)/2`. Requires both classes.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n = scores.len();
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = n - positives;
    if positives == 0 || negatives == 0 {
        return Err(GlocalError::MetricInput(
            "auroc needs both classes".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (positives * (positives + 1)) as f64 / 2.0;
    Ok(u / (positives * negatives) as f64)
}

/// Average precision: sum over descending distinct-score groups of
/// `delta recall * precision`. Requires at least one positive.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let total_pos = labels.iter().filter(|&&l| l == 1).count();
    if total_pos == 0 {
        return Err(GlocalError::MetricInput(
            "average precision needs a positive".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..j] {
            if labels[k] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// 8-connected components of a binary mask, in row-major discovery
/// order.
pub(crate) fn connected_regions(mask: &Array2<f64>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut regions = Vec::new();
    for si in 0..h {
        for sj in 0..w {
            if mask[[si, sj]] < 0.5 || seen[[si, sj]] {
                continue;
            }
            let mut region = Vec::new();
            let mut stack = vec![(si, sj)];
            seen[[si, sj]] = true;
            while let Some((i, j)) = stack.pop() {
                region.push((i, j));
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        if mask[[ni, nj]] >= 0.5 && !seen[[ni, nj]] {
                            seen[[ni, nj]] = true;
                            stack.push((ni, nj));
                        }
                    }
                }
            }
            region.sort();
            regions.push(region);
        }
    }
    regions
}

const NORMAL_PIXEL: usize = usize::MAX;

/// Area under the per-region-overlap vs false-positive-rate curve, up
/// to `fpr_cap` and normalized by it. Regions are 8-connected mask
/// components; equal map values form a single threshold step.
pub fn aupro(maps: &[Array2<f64>], masks: &[Array2<f64>], fpr_cap: f64) -> Result<f64> {
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(GlocalError::MetricInput(format!(
            "fpr_cap must be in (0, 1], got {fpr_cap}"
        )));
    }
    if maps.len() != masks.len() || maps.is_empty() {
        return Err(GlocalError::MetricInput(format!(
            "{} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }

    // Pixel stream: (map value, region id) with NORMAL_PIXEL for
    // normal pixels.
    let mut region_areas = Vec::new();
    let mut pixels = Vec::new();
    let mut total_negatives = 0usize;
    for (map, mask) in maps.iter().zip(masks.iter()) {
        if map.dim() != mask.dim() {
            return Err(GlocalError::MetricInput(format!(
                "map {:?} vs mask {:?}",
                map.dim(),
                mask.dim()
            )));
        }
        if map.iter().any(|v| !v.is_finite()) {
            return Err(GlocalError::MetricInput("non-finite map value".to_string()));
        }
        let mut region_of = Array2::from_elem(mask.raw_dim(), NORMAL_PIXEL);
        for region in connected_regions(mask) {
            let id = region_areas.len();
            region_areas.push(region.len());
            for (i, j) in region {
                region_of[[i, j]] = id;
            }
        }
        for ((i, j), &v) in map.indexed_iter() {
            let id = region_of[[i, j]];
            if id == NORMAL_PIXEL {
                total_negatives += 1;
            }
            pixels.push((v, id));
        }
    }
    if region_areas.is_empty() {
        return Err(GlocalError::MetricInput(
            "aupro needs at least one anomalous region".to_string(),
        ));
    }
    if total_negatives == 0 {
        return Err(GlocalError::MetricInput(
            "aupro needs at least one normal pixel".to_string(),
        ));
    }

    pixels.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    // Descending threshold sweep; one curve point per distinct value.
    let mut tp_per_region = vec![0usize; region_areas.len()];
    let mut false_positives = 0usize;
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < pixels.len() {
        let mut j = i;
        while j < pixels.len() && pixels[j].0 == pixels[i].0 {
            let id = pixels[j].1;
            if id == NORMAL_PIXEL {
                false_positives += 1;
            } else {
                tp_per_region[id] += 1;
            }
            j += 1;
        }
        let fpr = false_positives as f64 / total_negatives as f64;
        let pro = tp_per_region
            .iter()
            .zip(region_areas.iter())
            .map(|(&tp, &area)| tp as f64 / area as f64)
            .sum::<f64>()
            / region_areas.len() as f64;
        points.push((fpr, pro));
        i = j;
    }

    // Trapezoidal integral, clipped at the cap with interpolation.
    let mut area = 0.0;
    let (mut prev_f, mut prev_p) = points[0];
    for &(f, p) in &points[1..] {
        if f >= fpr_cap {
            let t = (fpr_cap - prev_f) / (f - prev_f);
            let p_cap = prev_p + (p - prev_p) * t;
            area += (fpr_cap - prev_f) * (prev_p + p_cap) / 2.0;
            return Ok(area / fpr_cap);
        }
        area += (f - prev_f) * (prev_p + p) / 2.0;
        (prev_f, prev_p) = (f, p);
    }
    Ok(area / fpr_cap)
}

/// Metrics of one class; fields are absent when the class lacks the
/// labels or masks they need.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub n_samples: usize,
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pixel_aupro: Option<f64>,
}

/// Dataset-level report: per-class rows plus unweighted means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub mean_image_auroc: Option<f64>,
    pub mean_image_ap: Option<f64>,
    pub mean_pixel_auroc: Option<f64>,
    pub mean_pixel_aupro: Option<f64>,
    pub n_samples: usize,
}

/// Compute one class's metrics from its scored samples. Metrics whose
/// preconditions fail (single label value, no anomalous pixels) come
/// back as `None` instead of erroring.
pub fn evaluate_class(
    class: &str,
    scores: &[f64],
    labels: &[u8],
    maps: &[Array2<f64>],
    masks: &[Array2<f64>],
    fpr_cap: f64,
) -> Result<ClassMetrics> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let both_classes = positives > 0 && positives < labels.len();

    let image_auroc = if both_classes {
        Some(auroc(scores, labels)?)
    } else {
        None
    };
    let image_ap = if positives > 0 {
        Some(average_precision(scores, labels)?)
    } else {
        None
    };

    let mut pixel_auroc = None;
    let mut pixel_aupro = None;
    if !maps.is_empty() && maps.len() == masks.len() {
        let anomalous_px: f64 = masks.iter().map(|m| m.sum()).sum();
        let total_px: usize = masks.iter().map(|m| m.len()).sum();
        if anomalous_px > 0.0 && (anomalous_px as usize) < total_px {
            let pixel_scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().cloned()).collect();
            let pixel_labels: Vec<u8> = masks
                .iter()
                .flat_map(|m| m.iter().map(|&v| u8::from(v >= 0.5)))
                .collect();
            pixel_auroc = Some(auroc(&pixel_scores, &pixel_labels)?);
            pixel_aupro = Some(aupro(maps, masks, fpr_cap)?);
        }
    }
    Ok(ClassMetrics {
        class: class.to_string(),
        n_samples: labels.len(),
        image_auroc,
        image_ap,
        pixel_auroc,
        pixel_aupro,
    })
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Combine per-class rows into a report with unweighted means over the
/// classes where each metric is present.
pub fn summarize(per_class: Vec<ClassMetrics>) -> EvalReport {
    let n_samples = per_class.iter().map(|c| c.n_samples).sum();
    EvalReport {
        mean_image_auroc: mean_present(per_class.iter().map(|c| c.image_auroc)),
        mean_image_ap: mean_present(per_class.iter().map(|c| c.image_ap)),
        mean_pixel_auroc: mean_present(per_class.iter().map(|c| c.pixel_auroc)),
        mean_pixel_aupro: mean_present(per_class.iter().map(|c| c.pixel_aupro)),
        per_class,
        n_samples,
    }
}

fn cell(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

impl EvalReport {
    /// Render a plain-text table with one row per class plus the mean.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .per_class
            .iter()
            .map(|c| c.class.len())
            .chain(["class".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        out.push_str(&format!(
            "{:width$}  {:>5}  {:>10}  {:>10}  {:>10}  {:>10}\n",
            "class", "n", "img AUROC", "img AP", "px AUROC", "px PRO"
        ));
        for c in &self.per_class {
            out.push_str(&format!(
                "{:width$}  {:>5}  {:>10}  {:>10}  {:>10}  {:>10}\n",
                c.class,
                c.n_samples,
                cell(c.image_auroc),
                cell(c.image_ap),
                cell(c.pixel_auroc),
                cell(c.pixel_aupro)
            ));
        }
        out.push_str(&format!(
            "{:width$}  {:>5}  {:>10}  {:>10}  {:>10}  {:>10}\n",
            "mean",
            self.n_samples,
            cell(self.mean_image_auroc),
            cell(self.mean_image_ap),
            cell(self.mean_pixel_auroc),
            cell(self.mean_pixel_aupro)
        ));
        out
    }
}
