//! Anomaly scoring: temperature-scaled two-class softmax over cosine
//! similarities, per-layer similarity maps, bilinear upsampling with
//! its adjoint, Gaussian map smoothing and score fusion.

use ndarray::{Array1, Array2, Array3};

use crate::config::{RunConfig, ScoreFusion};
use crate::error::{GlocalError, Result};
use crate::text::GlocalTextEmbeddings;
use crate::vision::VisualFeatures;

/// Two-class softmax over `(normal_sim / tau, anomaly_sim / tau)`.
/// Returns `(p_normal, p_anomaly)`; the pair sums to one.
pub fn class_probability(normal_sim: f64, anomaly_sim: f64, tau: f64) -> (f64, f64) {
    let a = normal_sim / tau;
    let b = anomaly_sim / tau;
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    (ea / z, eb / z)
}

/// Jacobian-vector product through [`class_probability`]: maps upstream
/// gradients on the probabilities to gradients on the raw similarities.
pub fn class_probability_backward(
    p_normal: f64,
    p_anomaly: f64,
    d_p_normal: f64,
    d_p_anomaly: f64,
    tau: f64,
) -> (f64, f64) {
    // dp_i/ds_j = (delta_ij * p_i - p_i * p_j) / tau
    let d_s_normal =
        (d_p_normal * p_normal * (1.0 - p_normal) - d_p_anomaly * p_anomaly * p_normal) / tau;
    let d_s_anomaly =
        (d_p_anomaly * p_anomaly * (1.0 - p_anomaly) - d_p_normal * p_normal * p_anomaly) / tau;
    (d_s_normal, d_s_anomaly)
}

/// Per-cell normal/anomaly probabilities of one patch grid against the
/// local text embeddings. Returns `(s_normal, s_anomaly)` maps that sum
/// to one element-wise.
pub fn local_similarity_maps(
    local_normal: &Array1<f64>,
    local_anomaly: &Array1<f64>,
    grid: &Array3<f64>,
    tau: f64,
) -> (Array2<f64>, Array2<f64>) {
    let (gh, gw, _) = grid.dim();
    let mut s_normal = Array2::zeros((gh, gw));
    let mut s_anomaly = Array2::zeros((gh, gw));
    for i in 0..gh {
        for j in 0..gw {
            let cell = grid.slice(ndarray::s![i, j, ..]);
            let sim_n = cell.iter().zip(local_normal.iter()).map(|(a, b)| a * b).sum();
            let sim_a = cell
                .iter()
                .zip(local_anomaly.iter())
                .map(|(a, b)| a * b)
                .sum();
            let (pn, pa) = class_probability(sim_n, sim_a, tau);
            s_normal[[i, j]] = pn;
            s_anomaly[[i, j]] = pa;
        }
    }
    (s_normal, s_anomaly)
}

/// Gradients of [`local_similarity_maps`] with respect to the two local
/// text embeddings, given the forward maps and upstream map gradients.
pub fn local_similarity_maps_backward(
    grid: &Array3<f64>,
    s_normal: &Array2<f64>,
    s_anomaly: &Array2<f64>,
    d_s_normal: &Array2<f64>,
    d_s_anomaly: &Array2<f64>,
    tau: f64,
) -> (Array1<f64>, Array1<f64>) {
    let (gh, gw, joint) = grid.dim();
    let mut d_local_normal = Array1::zeros(joint);
    let mut d_local_anomaly = Array1::zeros(joint);
    for i in 0..gh {
        for j in 0..gw {
            let (d_sim_n, d_sim_a) = class_probability_backward(
                s_normal[[i, j]],
                s_anomaly[[i, j]],
                d_s_normal[[i, j]],
                d_s_anomaly[[i, j]],
                tau,
            );
            let cell = grid.slice(ndarray::s![i, j, ..]);
            d_local_normal.zip_mut_with(&cell, |d, &f| *d += d_sim_n * f);
            d_local_anomaly.zip_mut_with(&cell, |d, &f| *d += d_sim_a * f);
        }
    }
    (d_local_normal, d_local_anomaly)
}

/// Sampling positions for one axis of align-corners-disabled bilinear
/// interpolation: output index `i` reads source coordinate
/// `(i + 0.5) * in / out - 0.5`, clamped to the valid range.
fn bilinear_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                .clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Upsample a map with bilinear interpolation (align-corners disabled).
/// Constant maps stay constant; equal sizes return the input unchanged;
/// shrinking is an error.
pub fn upsample_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Result<Array2<f64>> {
    let (h, w) = src.dim();
    if out_h < h || out_w < w {
        return Err(GlocalError::InvalidConfig {
            constraint: "upsample target >= source".to_string(),
            detail: format!("{h}x{w} -> {out_h}x{out_w}"),
        });
    }
    if (out_h, out_w) == (h, w) {
        return Ok(src.clone());
    }
    let rows = bilinear_axis(h, out_h);
    let cols = bilinear_axis(w, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
            let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
            out[[i, j]] = top * (1.0 - fr) + bottom * fr;
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_bilinear`]: scatters an upstream gradient back
/// to source resolution with the transposed interpolation weights.
pub fn upsample_adjoint(d_out: &Array2<f64>, src_h: usize, src_w: usize) -> Array2<f64> {
    let (out_h, out_w) = d_out.dim();
    if (out_h, out_w) == (src_h, src_w) {
        return d_out.clone();
    }
    let rows = bilinear_axis(src_h, out_h);
    let cols = bilinear_axis(src_w, out_w);
    let mut d_src = Array2::zeros((src_h, src_w));
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            let g = d_out[[i, j]];
            d_src[[r0, c0]] += g * (1.0 - fr) * (1.0 - fc);
            d_src[[r0, c1]] += g * (1.0 - fr) * fc;
            d_src[[r1, c0]] += g * fr * (1.0 - fc);
            d_src[[r1, c1]] += g * fr * fc;
        }
    }
    d_src
}

/// Normalized 1-d Gaussian taps with radius `ceil(3 sigma)`; `sigma = 0`
/// degenerates to the identity kernel `[1]`.
pub fn gaussian_kernel(sigma: f64) -> Array1<f64> {
    if sigma == 0.0 {
        return Array1::ones(1);
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Array1::zeros((2 * radius + 1) as usize);
    for (idx, offset) in (-radius..=radius).enumerate() {
        let x = offset as f64;
        kernel[idx] = (-x * x / (2.0 * sigma * sigma)).exp();
    }
    let sum = kernel.sum();
    kernel / sum
}

/// Fold an out-of-range index back into `[0, n)` by half-sample
/// symmetric reflection (edge pixels repeat).
fn reflect_index(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian smoothing with reflective padding. The kernel
/// sums to one, so the map's total mass is preserved.
pub fn gaussian_blur(map: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    if radius == 0 {
        return map.clone();
    }
    let (h, w) = map.dim();

    let mut rows_done = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let jj = reflect_index(j as i64 + t as i64 - radius, w);
                acc += k * map[[i, jj]];
            }
            rows_done[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let ii = reflect_index(i as i64 + t as i64 - radius, h);
                acc += k * rows_done[[ii, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// A scored image: fused pixel map plus the per-layer grid maps it was
/// built from.
#[derive(Clone, Debug)]
pub struct AnomalyMap {
    /// `[h, w]` smoothed fused map.
    pub fused: Array2<f64>,
    /// Per tap layer `(s_normal, s_anomaly)` at grid resolution.
    pub layers: Vec<(Array2<f64>, Array2<f64>)>,
}

/// Fuse per-layer maps into one smoothed pixel map:
/// `G_sigma( sum_k ( (1 - Up(s_normal_k)) / 2 + Up(s_anomaly_k) / 2 ) )`.
///
/// With `normalize_by_layers` the sum is divided by the layer count
/// before smoothing. `sigma = 0` skips smoothing exactly.
pub fn anomaly_map(
    layers: &[(Array2<f64>, Array2<f64>)],
    out_h: usize,
    out_w: usize,
    sigma: f64,
    normalize_by_layers: bool,
) -> Result<AnomalyMap> {
    if layers.is_empty() {
        return Err(GlocalError::InvalidConfig {
            constraint: "anomaly_map needs at least one layer".to_string(),
            detail: "no layers".to_string(),
        });
    }
    let mut fused = Array2::zeros((out_h, out_w));
    for (s_normal, s_anomaly) in layers {
        if s_normal.dim() != s_anomaly.dim() {
            return Err(GlocalError::ShapeMismatch {
                name: "anomaly_map layer".to_string(),
                expected: vec![s_normal.nrows(), s_normal.ncols()],
                found: vec![s_anomaly.nrows(), s_anomaly.ncols()],
            });
        }
        let up_n = upsample_bilinear(s_normal, out_h, out_w)?;
        let mut contribution = upsample_bilinear(s_anomaly, out_h, out_w)?;
        contribution.zip_mut_with(&up_n, |c, &n| *c = 0.5 * (1.0 - n) + 0.5 * *c);
        fused += &contribution;
    }
    if normalize_by_layers {
        fused /= layers.len() as f64;
    }
    let fused = gaussian_blur(&fused, sigma);
    Ok(AnomalyMap {
        fused,
        layers: layers.to_vec(),
    })
}

/// Scalar image score under the configured fusion rule. The map term is
/// normalized by the layer count unless the map already was.
pub fn image_score(
    p_anomaly: f64,
    map: &AnomalyMap,
    fusion: ScoreFusion,
    map_already_normalized: bool,
) -> f64 {
    match fusion {
        ScoreFusion::TextOnly => p_anomaly,
        ScoreFusion::TextPlusMapMax => {
            let peak = map.fused.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let scale = if map_already_normalized {
                1.0
            } else {
                map.layers.len() as f64
            };
            0.5 * p_anomaly + 0.5 * peak / scale
        }
    }
}

/// Full per-image scoring: global probability, fused anomaly map and
/// the scalar image score.
#[derive(Clone, Debug)]
pub struct ScoredImage {
    pub p_anomaly: f64,
    pub map: AnomalyMap,
    pub score: f64,
}

pub fn score_image(
    text: &GlocalTextEmbeddings,
    features: &VisualFeatures,
    cfg: &RunConfig,
    tau: f64,
) -> Result<ScoredImage> {
    let sim_n = text.global_normal.dot(&features.global);
    let sim_a = text.global_anomaly.dot(&features.global);
    let (_, p_anomaly) = class_probability(sim_n, sim_a, tau);

    let layers: Vec<(Array2<f64>, Array2<f64>)> = features
        .grids
        .iter()
        .map(|grid| local_similarity_maps(&text.local_normal, &text.local_anomaly, grid, tau))
        .collect();
    let (h, w) = cfg.image_resolution;
    let map = anomaly_map(&layers, h, w, cfg.sigma, cfg.normalize_map_by_layers)?;
    let score = image_score(p_anomaly, &map, cfg.score_fusion, cfg.normalize_map_by_layers);
    Ok(ScoredImage {
        p_anomaly,
        map,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_similarities_split_evenly() {
        let (pn, pa) = class_probability(0.42, 0.42, 0.07);
        assert_eq!(pn, 0.5);
        assert_eq!(pa, 0.5);
    }

    #[test]
    fn unit_temperature_hand_case() {
        let (pn, pa) = class_probability(1.0, 0.0, 1.0);
        assert!((pa - 0.2689414213699951).abs() < 1e-12);
        assert!((pn + pa - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_temperature_sharpens() {
        let (_, pa) = class_probability(0.2, 0.3, 0.01);
        assert!((pa - 0.9999546021312976).abs() < 1e-9);
    }

    #[test]
    fn probability_gradient_matches_finite_differences() {
        let tau = 0.07;
        let eps = 1e-7;
        for (sn, sa, dn, da) in [
            (0.31, 0.28, 1.0, 0.0),
            (0.1, 0.15, 0.0, 1.0),
            (-0.2, 0.05, 0.7, -0.4),
        ] {
            let (pn, pa) = class_probability(sn, sa, tau);
            let (gn, ga) = class_probability_backward(pn, pa, dn, da, tau);

            let f = |a: f64, b: f64| {
                let (x, y) = class_probability(a, b, tau);
                dn * x + da * y
            };
            let fd_n = (f(sn + eps, sa) - f(sn - eps, sa)) / (2.0 * eps);
            let fd_a = (f(sn, sa + eps) - f(sn, sa - eps)) / (2.0 * eps);
            assert!((gn - fd_n).abs() < 1e-6, "{gn} vs {fd_n}");
            assert!((ga - fd_a).abs() < 1e-6, "{ga} vs {fd_a}");
        }
    }

    #[test]
    fn local_map_embedding_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = ndarray::Array3::from_shape_fn((3, 3, 5), |_| rng.gen_range(-0.5..0.5));
        let l_n = ndarray::Array1::from_shape_fn(5, |_| rng.gen_range(-0.5..0.5));
        let l_a = ndarray::Array1::from_shape_fn(5, |_| rng.gen_range(-0.5..0.5));
        let d_s_n = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let d_s_a = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let tau = 0.2;

        let (s_n, s_a) = local_similarity_maps(&l_n, &l_a, &grid, tau);
        let (g_n, g_a) = local_similarity_maps_backward(&grid, &s_n, &s_a, &d_s_n, &d_s_a, tau);

        let value = |ln: &ndarray::Array1<f64>, la: &ndarray::Array1<f64>| -> f64 {
            let (sn, sa) = local_similarity_maps(ln, la, &grid, tau);
            (&sn * &d_s_n).sum() + (&sa * &d_s_a).sum()
        };
        let eps = 1e-6;
        for k in 0..5 {
            let mut plus = l_n.clone();
            plus[k] += eps;
            let mut minus = l_n.clone();
            minus[k] -= eps;
            let fd = (value(&plus, &l_a) - value(&minus, &l_a)) / (2.0 * eps);
            assert!((g_n[k] - fd).abs() < 1e-6, "normal[{k}]: {} vs {fd}", g_n[k]);

            let mut plus = l_a.clone();
            plus[k] += eps;
            let mut minus = l_a.clone();
            minus[k] -= eps;
            let fd = (value(&l_n, &plus) - value(&l_n, &minus)) / (2.0 * eps);
            assert!((g_a[k] - fd).abs() < 1e-6, "anomaly[{k}]: {} vs {fd}", g_a[k]);
        }
    }

    #[test]
    fn upsample_matches_hand_case() {
        let src = arr2(&[[0.0, 1.0], [0.0, 1.0]]);
        let up = upsample_bilinear(&src, 4, 4).unwrap();
        let expected_cols = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                assert!((up[[i, j]] - expected_cols[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_preserves_constants_and_identity() {
        let src = Array2::from_elem((3, 5), 0.37);
        let up = upsample_bilinear(&src, 9, 20).unwrap();
        assert!(up.iter().all(|&v| (v - 0.37).abs() < 1e-12));

        let same = upsample_bilinear(&src, 3, 5).unwrap();
        assert_eq!(same, src);
    }

    #[test]
    fn upsample_refuses_to_shrink() {
        let src = Array2::zeros((4, 4));
        assert!(upsample_bilinear(&src, 2, 4).is_err());
    }

    #[test]
    fn upsample_adjoint_satisfies_inner_product_identity() {
        // <Up(x), y> == <x, Up^T(y)> for all x, y.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
            let y = Array2::from_shape_fn((13, 17), |_| rng.gen_range(-1.0..1.0));
            let up = upsample_bilinear(&x, 13, 17).unwrap();
            let down = upsample_adjoint(&y, 4, 6);
            let lhs: f64 = (&up * &y).sum();
            let rhs: f64 = (&x * &down).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn gaussian_kernel_is_normalized_with_expected_radius() {
        for sigma in [0.5, 1.0, 2.0, 8.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(gaussian_kernel(0.0).len(), 1);
        assert_eq!(gaussian_kernel(0.0)[0], 1.0);
    }

    #[test]
    fn blur_impulse_reproduces_kernel_in_the_interior() {
        let sigma = 1.5;
        let kernel = gaussian_kernel(sigma);
        let radius = kernel.len() / 2;
        let n = 4 * radius + 1;
        let mut map = Array2::zeros((n, n));
        map[[n / 2, n / 2]] = 1.0;
        let blurred = gaussian_blur(&map, sigma);
        for di in 0..kernel.len() {
            for dj in 0..kernel.len() {
                let i = n / 2 - radius + di;
                let j = n / 2 - radius + dj;
                assert!((blurred[[i, j]] - kernel[di] * kernel[dj]).abs() < 1e-12);
            }
        }
        assert!((blurred.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_total_mass_under_reflection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = Array2::from_shape_fn((7, 11), |_| rng.gen_range(0.0..1.0));
        for sigma in [0.8, 2.0, 8.0] {
            let blurred = gaussian_blur(&map, sigma);
            assert!(
                (blurred.sum() - map.sum()).abs() < 1e-9,
                "sigma {sigma}: {} vs {}",
                blurred.sum(),
                map.sum()
            );
        }
    }

    #[test]
    fn complementary_single_layer_map_reduces_to_upsampled_anomaly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s_a = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.05..0.95));
        let s_n = s_a.mapv(|v| 1.0 - v);
        let map = anomaly_map(&[(s_n, s_a.clone())], 16, 16, 0.0, false).unwrap();
        let expected = upsample_bilinear(&s_a, 16, 16).unwrap();
        for (m, e) in map.fused.iter().zip(expected.iter()) {
            assert!((m - e).abs() < 1e-12);
        }
    }

    #[test]
    fn map_is_linear_in_identical_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s_n = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let s_a = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let single = anomaly_map(&[(s_n.clone(), s_a.clone())], 8, 8, 0.0, false).unwrap();
        let double = anomaly_map(
            &[(s_n.clone(), s_a.clone()), (s_n, s_a)],
            8,
            8,
            0.0,
            false,
        )
        .unwrap();
        for (d, s) in double.fused.iter().zip(single.fused.iter()) {
            assert_eq!(*d, 2.0 * *s);
        }
    }

    #[test]
    fn map_is_invariant_under_polarity_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s_n = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0.0..1.0));
        let s_a = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0.0..1.0));
        let a = anomaly_map(&[(s_n.clone(), s_a.clone())], 6, 6, 1.0, false).unwrap();
        // (s_n, s_a) -> (1 - s_a, 1 - s_n) leaves the fused map fixed.
        let b = anomaly_map(
            &[(s_a.mapv(|v| 1.0 - v), s_n.mapv(|v| 1.0 - v))],
            6,
            6,
            1.0,
            false,
        )
        .unwrap();
        for (x, y) in a.fused.iter().zip(b.fused.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_map_is_finite_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layers: Vec<_> = (0..3)
            .map(|_| {
                let s_a = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
                let s_n = s_a.mapv(|v| 1.0 - v);
                (s_n, s_a)
            })
            .collect();
        let map = anomaly_map(&layers, 32, 32, 2.0, false).unwrap();
        assert!(map.fused.iter().all(|&v| v.is_finite() && v >= 0.0));
        assert!(map.fused.iter().all(|&v| v <= 3.0 + 1e-9));
    }

    #[test]
    fn image_score_fusion_rules() {
        let layers = vec![
            (Array2::from_elem((2, 2), 0.5), Array2::from_elem((2, 2), 0.5)),
            (Array2::from_elem((2, 2), 0.2), Array2::from_elem((2, 2), 0.8)),
        ];
        let map = anomaly_map(&layers, 4, 4, 0.0, false).unwrap();
        assert_eq!(image_score(0.9, &map, ScoreFusion::TextOnly, false), 0.9);

        // Peak of the unsmoothed fused sum: 0.5 + 0.8 = 1.3.
        let fused = image_score(0.9, &map, ScoreFusion::TextPlusMapMax, false);
        assert!((fused - (0.45 + 0.5 * 1.3 / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn local_maps_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 6;
        let grid = Array3::from_shape_fn((3, 3, d), |_| rng.gen_range(-1.0..1.0));
        let l_n = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        let l_a = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        let (s_n, s_a) = local_similarity_maps(&l_n, &l_a, &grid, 0.07);
        for (n, a) in s_n.iter().zip(s_a.iter()) {
            assert!((n + a - 1.0).abs() < 1e-9);
        }
    }
}
