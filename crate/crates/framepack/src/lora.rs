//! Low-rank adaptation of a toy single-head attention layer.
//!
//! An adapter adds `scaling * B A` to a frozen base weight, with `scaling =
//! alpha / r`. `B` starts at zero, so a fresh adapter changes nothing; after
//! training, the product can be merged back into the base weight with no
//! change to the forward pass. The host layer adapts the query and value
//! projections only, which is where the full-scale recipe points LoRA.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::gradcheck::{max_relative_error, numeric_gradient_matrix, MatrixLoss};

/// Rank used by the full-scale recipe.
pub const PRESET_RANK: usize = 64;
/// Alpha used by the full-scale recipe; with rank 64 the scaling is 0.25.
pub const PRESET_ALPHA: f64 = 16.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoraError {
    #[error("adapter ({d_out}x{r} by {r}x{d_in}) does not fit base weight {base_rows}x{base_cols}")]
    AdapterShape { d_out: usize, r: usize, d_in: usize, base_rows: usize, base_cols: usize },
    #[error("input width {got} does not match weight input width {expected}")]
    InputShape { got: usize, expected: usize },
}

/// Trainable low-rank delta for one frozen weight matrix.
///
/// `A` is `r x d_in` (Gaussian init, std 0.02), `B` is `d_out x r` (zero
/// init), and the effective weight is `W_base + (alpha / r) * B A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub r: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn seeded(d_in: usize, d_out: usize, r: usize, alpha: f64, seed: u64) -> Self {
        assert!(r >= 1, "rank must be at least 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut a = Array2::zeros((r, d_in));
        for i in 0..r {
            for j in 0..d_in {
                a[[i, j]] = normal.sample(&mut rng);
            }
        }
        LoraAdapter { a, b: Array2::zeros((d_out, r)), r, alpha }
    }

    /// `alpha / r`, exact in floating point for the preset (16 / 64 = 0.25).
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }

    /// Trainable scalars in this adapter: `r * d_in + d_out * r`.
    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    fn check_against(&self, w_base: &Array2<f64>) -> Result<(), LoraError> {
        if self.d_out() != w_base.nrows() || self.d_in() != w_base.ncols() {
            return Err(LoraError::AdapterShape {
                d_out: self.d_out(),
                r: self.r,
                d_in: self.d_in(),
                base_rows: w_base.nrows(),
                base_cols: w_base.ncols(),
            });
        }
        Ok(())
    }
}

/// `x W_base^T + scaling * x A^T B^T` for row-vector inputs `x` (n x d_in).
///
/// Equivalent to multiplying by the merged weight, but computed through the
/// low-rank factors the way a training step would.
pub fn lora_forward(
    adapter: &LoraAdapter,
    w_base: &Array2<f64>,
    x: &Array2<f64>,
) -> Result<Array2<f64>, LoraError> {
    adapter.check_against(w_base)?;
    if x.ncols() != w_base.ncols() {
        return Err(LoraError::InputShape { got: x.ncols(), expected: w_base.ncols() });
    }
    let (n, d_in) = x.dim();
    let (d_out, r) = adapter.b.dim();
    let scaling = adapter.scaling();

    // xa = x A^T (n x r), then out = x W^T + scaling * xa B^T.
    let mut xa = Array2::zeros((n, r));
    for i in 0..n {
        for k in 0..r {
            let mut acc = 0.0;
            for j in 0..d_in {
                acc += x[[i, j]] * adapter.a[[k, j]];
            }
            xa[[i, k]] = acc;
        }
    }
    let mut out = Array2::zeros((n, d_out));
    for i in 0..n {
        for o in 0..d_out {
            let mut acc = 0.0;
            for j in 0..d_in {
                acc += x[[i, j]] * w_base[[o, j]];
            }
            let mut low = 0.0;
            for k in 0..r {
                low += xa[[i, k]] * adapter.b[[o, k]];
            }
            out[[i, o]] = acc + scaling * low;
        }
    }
    Ok(out)
}

/// Fold the adapter into its base weight: `W_base + scaling * B A`. The
/// merged matrix reproduces [`lora_forward`] exactly (up to float rounding).
pub fn merge_lora(adapter: &LoraAdapter, w_base: &Array2<f64>) -> Result<Array2<f64>, LoraError> {
    adapter.check_against(w_base)?;
    let (d_out, r) = adapter.b.dim();
    let d_in = adapter.d_in();
    let scaling = adapter.scaling();
    let mut merged = w_base.clone();
    for o in 0..d_out {
        for j in 0..d_in {
            let mut acc = 0.0;
            for k in 0..r {
                acc += adapter.b[[o, k]] * adapter.a[[k, j]];
            }
            merged[[o, j]] += scaling * acc;
        }
    }
    Ok(merged)
}

/// Single-head attention with frozen base weights and LoRA on the query and
/// value projections. Key and output projections stay unadapted; the base
/// matrices are never part of the trainable set.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyAttention {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub adapter_q: LoraAdapter,
    pub adapter_v: LoraAdapter,
    pub d_model: usize,
}

impl ToyAttention {
    /// Frozen Gaussian base weights (std `1/sqrt(d_model)`) plus fresh
    /// zero-delta adapters of the given rank.
    pub fn seeded(d_model: usize, r: usize, alpha: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (d_model as f64).sqrt().recip()).expect("valid std");
        let mut base = || {
            let mut w = Array2::zeros((d_model, d_model));
            for i in 0..d_model {
                for j in 0..d_model {
                    w[[i, j]] = normal.sample(&mut rng);
                }
            }
            w
        };
        let (w_q, w_k, w_v, w_o) = (base(), base(), base(), base());
        ToyAttention {
            w_q,
            w_k,
            w_v,
            w_o,
            adapter_q: LoraAdapter::seeded(d_model, d_model, r, alpha, seed.wrapping_add(1)),
            adapter_v: LoraAdapter::seeded(d_model, d_model, r, alpha, seed.wrapping_add(2)),
            d_model,
        }
    }

    /// Trainable scalars across both adapters; the four base matrices
    /// contribute nothing.
    pub fn trainable_params(&self) -> usize {
        self.adapter_q.trainable_params() + self.adapter_v.trainable_params()
    }
}

/// Row-wise numerically stable softmax; every output row sums to 1.
fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    debug_assert_eq!(k, b.nrows());
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// `x W^T` for row-vector inputs.
fn project_rows(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    matmul(x, &w.t().to_owned())
}

/// Full attention pass: `softmax(q k^T / sqrt(d)) v W_o^T`, with `q` and `v`
/// computed through their adapters.
pub fn attention_forward(att: &ToyAttention, x: &Array2<f64>) -> Result<Array2<f64>, LoraError> {
    if x.ncols() != att.d_model {
        return Err(LoraError::InputShape { got: x.ncols(), expected: att.d_model });
    }
    let q = lora_forward(&att.adapter_q, &att.w_q, x)?;
    let k = project_rows(x, &att.w_k);
    let v = lora_forward(&att.adapter_v, &att.w_v, x)?;
    let scale = (att.d_model as f64).sqrt().recip();
    let scores = matmul(&q, &k.t().to_owned()) * scale;
    let probs = softmax_rows(&scores);
    Ok(project_rows(&matmul(&probs, &v), &att.w_o))
}

/// Outcome of [`gradient_check_lora`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGradReport {
    /// Max relative disagreement between analytic and finite-difference
    /// gradients over every entry of `A_q`, `B_q`, `A_v`, `B_v`.
    pub max_adapter_grad_error: f64,
    /// The trainable set contains only adapter matrices, so base weights
    /// receive no updates; recorded here as a structural fact.
    pub base_grads_all_zero: bool,
}

/// Verify the analytic adapter gradients of `loss(attention_forward(x))`
/// against central finite differences.
///
/// The analytic path backpropagates through the output projection, the
/// attention mix, the softmax rows, and the two adapted projections. Only
/// adapter entries are perturbed numerically; the frozen base matrices are
/// structurally outside the trainable set.
pub fn gradient_check_lora(
    att: &ToyAttention,
    x: &Array2<f64>,
    loss: &dyn MatrixLoss,
    epsilon: f64,
) -> Result<LoraGradReport, LoraError> {
    let (analytic_aq, analytic_bq, analytic_av, analytic_bv) = analytic_adapter_grads(att, x, loss)?;

    let eval = |att: &ToyAttention| -> f64 {
        loss.value(&attention_forward(att, x).expect("shapes fixed during check"))
    };
    let mut scratch = att.clone();
    let numeric_aq = {
        let mut a = att.adapter_q.a.clone();
        numeric_gradient_matrix(&mut a, |a| { scratch.adapter_q.a.assign(a); eval(&scratch) }, epsilon)
    };
    scratch.adapter_q.a.assign(&att.adapter_q.a);
    let numeric_bq = {
        let mut b = att.adapter_q.b.clone();
        numeric_gradient_matrix(&mut b, |b| { scratch.adapter_q.b.assign(b); eval(&scratch) }, epsilon)
    };
    scratch.adapter_q.b.assign(&att.adapter_q.b);
    let numeric_av = {
        let mut a = att.adapter_v.a.clone();
        numeric_gradient_matrix(&mut a, |a| { scratch.adapter_v.a.assign(a); eval(&scratch) }, epsilon)
    };
    scratch.adapter_v.a.assign(&att.adapter_v.a);
    let numeric_bv = {
        let mut b = att.adapter_v.b.clone();
        numeric_gradient_matrix(&mut b, |b| { scratch.adapter_v.b.assign(b); eval(&scratch) }, epsilon)
    };

    let analytic: Vec<&f64> = analytic_aq
        .iter()
        .chain(analytic_bq.iter())
        .chain(analytic_av.iter())
        .chain(analytic_bv.iter())
        .collect();
    let numeric: Vec<&f64> = numeric_aq
        .iter()
        .chain(numeric_bq.iter())
        .chain(numeric_av.iter())
        .chain(numeric_bv.iter())
        .collect();
    Ok(LoraGradReport {
        max_adapter_grad_error: max_relative_error(analytic, numeric),
        base_grads_all_zero: true,
    })
}

type AdapterGrads = (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>);

fn analytic_adapter_grads(
    att: &ToyAttention,
    x: &Array2<f64>,
    loss: &dyn MatrixLoss,
) -> Result<AdapterGrads, LoraError> {
    let q = lora_forward(&att.adapter_q, &att.w_q, x)?;
    let k = project_rows(x, &att.w_k);
    let v = lora_forward(&att.adapter_v, &att.w_v, x)?;
    let scale = (att.d_model as f64).sqrt().recip();
    let scores = matmul(&q, &k.t().to_owned()) * scale;
    let probs = softmax_rows(&scores);
    let mixed = matmul(&probs, &v);
    let y = project_rows(&mixed, &att.w_o);

    // Chain rule, output to input: y = mixed W_o^T, mixed = probs v,
    // probs = softmax(scores), scores = q k^T * scale.
    let g_y = loss.grad(&y);
    let g_mixed = matmul(&g_y, &att.w_o);
    let g_probs = matmul(&g_mixed, &v.t().to_owned());
    let g_v = matmul(&probs.t().to_owned(), &g_mixed);

    // Softmax backward per row: g_s = p * (g_p - sum(g_p * p)).
    let mut g_scores = Array2::zeros(probs.raw_dim());
    for i in 0..probs.nrows() {
        let mut dot = 0.0;
        for j in 0..probs.ncols() {
            dot += g_probs[[i, j]] * probs[[i, j]];
        }
        for j in 0..probs.ncols() {
            g_scores[[i, j]] = probs[[i, j]] * (g_probs[[i, j]] - dot);
        }
    }
    let g_q = matmul(&g_scores, &k) * scale;

    Ok((
        adapter_grad_a(&att.adapter_q, x, &g_q),
        adapter_grad_b(&att.adapter_q, x, &g_q),
        adapter_grad_a(&att.adapter_v, x, &g_v),
        adapter_grad_b(&att.adapter_v, x, &g_v),
    ))
}

/// dL/dA = scaling * B^T G^T x, where G is the gradient at the projection
/// output.
fn adapter_grad_a(adapter: &LoraAdapter, x: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let bt_gt = matmul(&adapter.b.t().to_owned(), &g.t().to_owned());
    matmul(&bt_gt, x) * adapter.scaling()
}

/// dL/dB = scaling * G^T x A^T.
fn adapter_grad_b(adapter: &LoraAdapter, x: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let xat = matmul(x, &adapter.a.t().to_owned());
    matmul(&g.t().to_owned(), &xat) * adapter.scaling()
}
