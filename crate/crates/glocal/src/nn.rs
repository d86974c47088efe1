//! Transformer building blocks shared by the text and vision towers:
//! layer normalization, multi-head attention (three scoring modes),
//! a QuickGELU MLP and the pre-norm residual encoder layer.
//!
//! Every block has a hand-written backward pass with respect to its
//! *input* only — all block parameters stay frozen; the only trainable
//! state in this crate lives in the prompt banks.

use ndarray::{Array1, Array2, Axis};

/// Epsilon inside the layer-norm variance square root.
pub const LN_EPS: f64 = 1e-5;

/// Row-wise softmax with max-subtraction for numerical stability.
/// Rows may contain `-inf` entries (masked positions).
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of `softmax_rows`: given probabilities `p` and upstream
/// gradient `dp`, returns the gradient with respect to the scores.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = p * dp;
    for i in 0..p.nrows() {
        let dot: f64 = ds.row(i).sum();
        for j in 0..p.ncols() {
            ds[[i, j]] -= p[[i, j]] * dot;
        }
    }
    ds
}

/// `y = x W^T + b` with `W` in `[out, in]` layout.
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

/// Gradient of [`linear`] with respect to `x`.
pub fn linear_backward_input(dy: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    dy.dot(w)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// QuickGELU activation `x * sigmoid(1.702 x)`.
pub fn quick_gelu(x: f64) -> f64 {
    x * sigmoid(1.702 * x)
}

/// Derivative of [`quick_gelu`].
pub fn quick_gelu_prime(x: f64) -> f64 {
    let s = sigmoid(1.702 * x);
    s + x * 1.702 * s * (1.0 - s)
}

// ---------------------------------------------------------------------------
// Layer normalization

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn unit(dim: usize) -> Self {
        Self {
            weight: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut x_hat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (i, mut row) in x_hat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = istd;
            for v in row.iter_mut() {
                *v = (*v - mean) * istd;
            }
        }
        let y = &x_hat * &self.weight + &self.bias;
        (y, LayerNormCache { x_hat, inv_std })
    }

    /// Gradient with respect to the input (scale and shift are frozen).
    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        let g = dy * &self.weight;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let g_row = g.row(i);
            let xh_row = cache.x_hat.row(i);
            let mean_g = g_row.sum() / d;
            let mean_gx = g_row
                .iter()
                .zip(xh_row.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / d;
            for j in 0..dy.ncols() {
                dx[[i, j]] = (g_row[j] - mean_g - xh_row[j] * mean_gx) * cache.inv_std[i];
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Multi-head attention

/// How attention weights are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMode {
    /// Query-key scores with a causal (lower-triangular) mask.
    Causal,
    /// Query-key scores over the full sequence.
    Bidirectional,
    /// Value-value scores: `softmax(V V^T / sqrt(d)) V` per head.
    ValueValue,
}

#[derive(Clone, Debug)]
pub struct Attention {
    /// Fused projection `[3*width, width]` producing Q, K, V stacked.
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttnCache {
    mode: AttnMode,
    qkv: Array2<f64>,
    /// Per-head attention probabilities.
    probs: Vec<Array2<f64>>,
}

impl Attention {
    pub fn width(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn forward(&self, x: &Array2<f64>, mode: AttnMode) -> (Array2<f64>, AttnCache) {
        let n = x.nrows();
        let w = self.width();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let qkv = linear(x, &self.w_qkv, &self.b_qkv);
        let mut probs = Vec::with_capacity(self.heads);
        let mut ctx = Array2::zeros((n, w));
        for h in 0..self.heads {
            let q = qkv.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(ndarray::s![.., w + h * dh..w + (h + 1) * dh]);
            let v = qkv.slice(ndarray::s![.., 2 * w + h * dh..2 * w + (h + 1) * dh]);

            let mut scores = match mode {
                AttnMode::ValueValue => v.dot(&v.t()),
                _ => q.dot(&k.t()),
            };
            scores *= scale;
            if mode == AttnMode::Causal {
                for i in 0..n {
                    for j in i + 1..n {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            let a = softmax_rows(&scores);
            let head_ctx = a.dot(&v);
            ctx.slice_mut(ndarray::s![.., h * dh..(h + 1) * dh])
                .assign(&head_ctx);
            probs.push(a);
        }
        let y = linear(&ctx, &self.w_out, &self.b_out);
        (y, AttnCache { mode, qkv, probs })
    }

    /// Gradient with respect to the input sequence (weights frozen).
    pub fn backward(&self, cache: &AttnCache, dy: &Array2<f64>) -> Array2<f64> {
        let n = dy.nrows();
        let w = self.width();
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let dctx = linear_backward_input(dy, &self.w_out);
        let mut dqkv = Array2::zeros((n, 3 * w));
        for h in 0..self.heads {
            let q = cache.qkv.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
            let k = cache
                .qkv
                .slice(ndarray::s![.., w + h * dh..w + (h + 1) * dh]);
            let v = cache
                .qkv
                .slice(ndarray::s![.., 2 * w + h * dh..2 * w + (h + 1) * dh]);
            let a = &cache.probs[h];
            let dhead = dctx.slice(ndarray::s![.., h * dh..(h + 1) * dh]);

            let da = dhead.dot(&v.t());
            let mut dv = a.t().dot(&dhead);
            // Masked entries have zero probability, so the softmax
            // backward already zeroes their score gradients.
            let mut dscores = softmax_rows_backward(a, &da);
            dscores *= scale;

            match cache.mode {
                AttnMode::ValueValue => {
                    // scores = V V^T: both operands carry gradient.
                    dv = dv + dscores.dot(&v) + dscores.t().dot(&v);
                    dqkv.slice_mut(ndarray::s![.., 2 * w + h * dh..2 * w + (h + 1) * dh])
                        .assign(&dv);
                }
                _ => {
                    let dq = dscores.dot(&k);
                    let dk = dscores.t().dot(&q);
                    dqkv.slice_mut(ndarray::s![.., h * dh..(h + 1) * dh])
                        .assign(&dq);
                    dqkv.slice_mut(ndarray::s![.., w + h * dh..w + (h + 1) * dh])
                        .assign(&dk);
                    dqkv.slice_mut(ndarray::s![.., 2 * w + h * dh..2 * w + (h + 1) * dh])
                        .assign(&dv);
                }
            }
        }
        linear_backward_input(&dqkv, &self.w_qkv)
    }
}

// ---------------------------------------------------------------------------
// MLP

#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    hidden: Array2<f64>,
}

impl Mlp {
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let hidden = linear(x, &self.w1, &self.b1);
        let activated = hidden.mapv(quick_gelu);
        let y = linear(&activated, &self.w2, &self.b2);
        (y, MlpCache { hidden })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>) -> Array2<f64> {
        let dact = linear_backward_input(dy, &self.w2);
        let dhidden = &dact * &cache.hidden.mapv(quick_gelu_prime);
        linear_backward_input(&dhidden, &self.w1)
    }
}

// ---------------------------------------------------------------------------
// Pre-norm residual encoder layer

/// `x + attn(ln1(x))` followed by `+ mlp(ln2(.))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerCache {
    ln1: LayerNormCache,
    attn: AttnCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl EncoderLayer {
    pub fn forward(&self, x: &Array2<f64>, mode: AttnMode) -> (Array2<f64>, EncoderLayerCache) {
        let (a_in, ln1_cache) = self.ln1.forward(x);
        let (a, attn_cache) = self.attn.forward(&a_in, mode);
        let x1 = x + &a;
        let (m_in, ln2_cache) = self.ln2.forward(&x1);
        let (m, mlp_cache) = self.mlp.forward(&m_in);
        let y = &x1 + &m;
        (
            y,
            EncoderLayerCache {
                ln1: ln1_cache,
                attn: attn_cache,
                ln2: ln2_cache,
                mlp: mlp_cache,
            },
        )
    }

    pub fn backward(&self, cache: &EncoderLayerCache, dy: &Array2<f64>) -> Array2<f64> {
        let dm_in = self.mlp.backward(&cache.mlp, dy);
        let dx1 = dy + &self.ln2.backward(&cache.ln2, &dm_in);
        let da_in = self.attn.backward(&cache.attn, &dx1);
        &dx1 + &self.ln1.backward(&cache.ln1, &da_in)
    }
}

/// L2-normalize a vector; errors out are the caller's job (norm must be
/// nonzero, which holds for layer-norm outputs in practice).
pub fn l2_normalize(x: &Array1<f64>) -> Array1<f64> {
    let norm = x.dot(x).sqrt();
    x / norm
}

/// Backward of [`l2_normalize`]: `dx = (dy - y (y . dy)) / |x|`.
pub fn l2_normalize_backward(x: &Array1<f64>, dy: &Array1<f64>) -> Array1<f64> {
    let norm = x.dot(x).sqrt();
    let y = x / norm;
    let proj = y.dot(dy);
    (dy - &(y * proj)) / norm
}

/// Mean over rows (used nowhere in scoring; convenience for tests).
pub fn mean_rows(x: &Array2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("nonempty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| {
            let v: f64 = rng.sample(StandardNormal);
            v * std
        })
    }

    fn randn1(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Array1<f64> {
        Array1::from_shape_fn(len, |_| {
            let v: f64 = rng.sample(StandardNormal);
            v * std
        })
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central finite difference of a scalar-valued function of one
    /// input entry, compared against the analytic gradient.
    fn check_input_gradient<F>(x: &Array2<f64>, analytic: &Array2<f64>, mut scalar: F)
    where
        F: FnMut(&Array2<f64>) -> f64,
    {
        let eps = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..12 {
            let i = rng.gen_range(0..x.nrows());
            let j = rng.gen_range(0..x.ncols());
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let fd = (scalar(&xp) - scalar(&xm)) / (2.0 * eps);
            let an = analytic[[i, j]];
            assert!(
                rel_err(an, fd) < 1e-6 || (an - fd).abs() < 1e-9,
                "gradient mismatch at ({i},{j}): analytic {an}, fd {fd}"
            );
        }
    }

    fn test_attention(heads: usize) -> Attention {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = 8;
        Attention {
            w_qkv: randn2(&mut rng, 3 * w, w, 0.35),
            b_qkv: randn1(&mut rng, 3 * w, 0.05),
            w_out: randn2(&mut rng, w, w, 0.35),
            b_out: randn1(&mut rng, w, 0.05),
            heads,
        }
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores = randn2(&mut rng, 6, 9, 4.0);
        let p = softmax_rows(&scores);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_handles_masked_rows() {
        let scores = ndarray::arr2(&[[0.3, f64::NEG_INFINITY, f64::NEG_INFINITY]]);
        let p = softmax_rows(&scores);
        assert_eq!(p[[0, 0]], 1.0);
        assert_eq!(p[[0, 1]], 0.0);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ln = LayerNorm {
            weight: randn1(&mut rng, 8, 1.0),
            bias: randn1(&mut rng, 8, 0.3),
        };
        let x = randn2(&mut rng, 5, 8, 1.0);
        let cot = randn2(&mut rng, 5, 8, 1.0);

        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &cot);
        check_input_gradient(&x, &dx, |xx| {
            let (y, _) = ln.forward(xx);
            (&y * &cot).sum()
        });
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp {
            w1: randn2(&mut rng, 16, 8, 0.35),
            b1: randn1(&mut rng, 16, 0.05),
            w2: randn2(&mut rng, 8, 16, 0.25),
            b2: randn1(&mut rng, 8, 0.05),
        };
        let x = randn2(&mut rng, 4, 8, 1.0);
        let cot = randn2(&mut rng, 4, 8, 1.0);

        let (_, cache) = mlp.forward(&x);
        let dx = mlp.backward(&cache, &cot);
        check_input_gradient(&x, &dx, |xx| {
            let (y, _) = mlp.forward(xx);
            (&y * &cot).sum()
        });
    }

    #[test]
    fn attention_gradients_match_finite_differences_in_all_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = test_attention(2);
        let x = randn2(&mut rng, 5, 8, 0.8);
        let cot = randn2(&mut rng, 5, 8, 1.0);

        for mode in [AttnMode::Causal, AttnMode::Bidirectional, AttnMode::ValueValue] {
            let (_, cache) = attn.forward(&x, mode);
            let dx = attn.backward(&cache, &cot);
            check_input_gradient(&x, &dx, |xx| {
                let (y, _) = attn.forward(xx, mode);
                (&y * &cot).sum()
            });
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let attn = test_attention(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn2(&mut rng, 6, 8, 0.8);
        let (y, _) = attn.forward(&x, AttnMode::Causal);

        // Changing a later token must not affect earlier outputs.
        let mut x2 = x.clone();
        x2[[5, 3]] += 10.0;
        let (y2, _) = attn.forward(&x2, AttnMode::Causal);
        for j in 0..8 {
            for i in 0..5 {
                assert!((y[[i, j]] - y2[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_layer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = EncoderLayer {
            ln1: LayerNorm {
                weight: randn1(&mut rng, 8, 1.0),
                bias: randn1(&mut rng, 8, 0.1),
            },
            attn: test_attention(4),
            ln2: LayerNorm {
                weight: randn1(&mut rng, 8, 1.0),
                bias: randn1(&mut rng, 8, 0.1),
            },
            mlp: Mlp {
                w1: randn2(&mut rng, 32, 8, 0.3),
                b1: randn1(&mut rng, 32, 0.05),
                w2: randn2(&mut rng, 8, 32, 0.2),
                b2: randn1(&mut rng, 8, 0.05),
            },
        };
        let x = randn2(&mut rng, 5, 8, 0.8);
        let cot = randn2(&mut rng, 5, 8, 1.0);

        let (_, cache) = layer.forward(&x, AttnMode::Causal);
        let dx = layer.backward(&cache, &cot);
        check_input_gradient(&x, &dx, |xx| {
            let (y, _) = layer.forward(xx, AttnMode::Causal);
            (&y * &cot).sum()
        });
    }

    #[test]
    fn l2_normalize_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn1(&mut rng, 8, 1.0);
        let cot = randn1(&mut rng, 8, 1.0);
        let dx = l2_normalize_backward(&x, &cot);

        let eps = 1e-6;
        for j in 0..8 {
            let mut xp = x.clone();
            xp[j] += eps;
            let mut xm = x.clone();
            xm[j] -= eps;
            let fd = (l2_normalize(&xp).dot(&cot) - l2_normalize(&xm).dot(&cot)) / (2.0 * eps);
            assert!(rel_err(dx[j], fd) < 1e-6 || (dx[j] - fd).abs() < 1e-9);
        }
    }
}
