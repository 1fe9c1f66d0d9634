//! The toy visual pipeline: frame, patches, tokens, projection.
//!
//! A 224x224 RGB frame is cut into a 16x16 grid of 14x14 patches, each
//! flattened to 588 values and pushed through a frozen seeded random linear
//! map. That yields 256 raw visual tokens. Condensation concatenates every 4
//! adjacent tokens into one, leaving 64 wider tokens, and a trainable linear
//! projection maps those into the toy LLM embedding space. The projection's
//! gradients are verifiable by finite differences and trainable with AdamW
//! under a cosine schedule.
//!
//! Matrix products along the pipeline are written as explicit loops rather
//! than delegated to a BLAS-style kernel, so outputs are bit-identical run
//! to run; tests compare them against `ndarray`'s own multiply.

use std::io::{Read, Write as IoWrite};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::gradcheck::{max_relative_error, numeric_gradient_matrix, numeric_gradient_vector, MatrixLoss};

/// Frame edge length in pixels.
pub const FRAME_SIDE: usize = 224;
/// Color channels per pixel.
pub const CHANNELS: usize = 3;
/// Patches per frame edge.
pub const GRID_SIDE: usize = 16;
/// Patch edge length; `GRID_SIDE * PATCH_SIDE = FRAME_SIDE`.
pub const PATCH_SIDE: usize = 14;
/// Flattened patch length: `PATCH_SIDE^2 * CHANNELS`.
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE * CHANNELS;
/// Raw visual tokens per frame: `GRID_SIDE^2`.
pub const RAW_TOKEN_COUNT: usize = 256;
/// Adjacent tokens merged by condensation.
pub const CONDENSE_GROUP: usize = 4;
/// Tokens per frame after condensation.
pub const CONDENSED_TOKEN_COUNT: usize = RAW_TOKEN_COUNT / CONDENSE_GROUP;
/// Default width of raw visual tokens.
pub const D_VIS_DEFAULT: usize = 16;
/// Default width of the toy LLM embedding space.
pub const D_LLM_DEFAULT: usize = 32;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("frame must be {FRAME_SIDE}x{FRAME_SIDE}x{CHANNELS}, got {height}x{width}x{channels}")]
    BadFrameShape { height: usize, width: usize, channels: usize },
    #[error("frame contains non-finite pixel values")]
    NonFinitePixels,
    #[error("token count {0} is not divisible by {CONDENSE_GROUP}")]
    CondenseCount(usize),
    #[error("token width {got} does not match the projector's input width {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("bad frame file: {0}")]
    BadFrameFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One video frame: pixel values in `[0, 1]` plus its source timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Array3<f64>,
    pub timestamp_ms: u64,
}

impl Frame {
    /// Wrap validated pixels. The array must be `224x224x3` (height, width,
    /// channel) with finite values; resizing is the caller's job.
    pub fn new(pixels: Array3<f64>, timestamp_ms: u64) -> Result<Self, VisionError> {
        let (h, w, c) = pixels.dim();
        if (h, w, c) != (FRAME_SIDE, FRAME_SIDE, CHANNELS) {
            return Err(VisionError::BadFrameShape { height: h, width: w, channels: c });
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(VisionError::NonFinitePixels);
        }
        Ok(Frame { pixels, timestamp_ms })
    }

    /// Every pixel set to `value`.
    pub fn constant(value: f64, timestamp_ms: u64) -> Self {
        Frame::new(
            Array3::from_elem((FRAME_SIDE, FRAME_SIDE, CHANNELS), value),
            timestamp_ms,
        )
        .expect("constant frames are well formed")
    }

    /// Seeded uniform noise in `[0, 1)`; a stand-in for real video content.
    pub fn synthetic(seed: u64, timestamp_ms: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Array3::zeros((FRAME_SIDE, FRAME_SIDE, CHANNELS));
        for y in 0..FRAME_SIDE {
            for x in 0..FRAME_SIDE {
                for c in 0..CHANNELS {
                    pixels[[y, x, c]] = rng.gen::<f64>();
                }
            }
        }
        Frame { pixels, timestamp_ms }
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }
}

/// Where a token matrix sits in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Raw,
    Condensed,
    Projected,
}

/// A `count x dim` matrix of visual tokens tagged with its pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens {
    pub tokens: Array2<f64>,
    pub stage: Stage,
}

impl VisualTokens {
    pub fn count(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Embed a frame as 256 raw visual tokens of width `d_vis`.
///
/// The encoder is a frozen random linear map over flattened patches, seeded
/// by `encoder_seed`: same frame, same seed, bitwise-identical tokens. Map
/// entries are Gaussian with standard deviation `1/sqrt(588)` so token
/// magnitudes stay near unit scale.
pub fn encode_frame(frame: &Frame, encoder_seed: u64, d_vis: usize) -> VisualTokens {
    assert!(d_vis >= 1, "d_vis must be at least 1");
    let map = encoder_map(encoder_seed, d_vis);
    let mut tokens = Array2::zeros((RAW_TOKEN_COUNT, d_vis));
    let mut patch = [0.0f64; PATCH_DIM];
    for gy in 0..GRID_SIDE {
        for gx in 0..GRID_SIDE {
            let mut k = 0;
            for py in 0..PATCH_SIDE {
                for px in 0..PATCH_SIDE {
                    for c in 0..CHANNELS {
                        patch[k] = frame.pixels[[gy * PATCH_SIDE + py, gx * PATCH_SIDE + px, c]];
                        k += 1;
                    }
                }
            }
            let row = gy * GRID_SIDE + gx;
            for d in 0..d_vis {
                let mut acc = 0.0;
                for (k, &p) in patch.iter().enumerate() {
                    acc += p * map[[k, d]];
                }
                tokens[[row, d]] = acc;
            }
        }
    }
    VisualTokens { tokens, stage: Stage::Raw }
}

fn encoder_map(seed: u64, d_vis: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (PATCH_DIM as f64).sqrt().recip()).expect("valid std");
    let mut map = Array2::zeros((PATCH_DIM, d_vis));
    for k in 0..PATCH_DIM {
        for d in 0..d_vis {
            map[[k, d]] = normal.sample(&mut rng);
        }
    }
    map
}

/// Concatenate every 4 adjacent tokens (sequence order) into one. Count drops
/// 256 to 64, width grows 4x; the values are rearranged, never altered:
/// row-major flattening of input and output is the identical scalar list.
pub fn condense(raw: &VisualTokens) -> Result<VisualTokens, VisionError> {
    let (count, dim) = (raw.count(), raw.dim());
    if count % CONDENSE_GROUP != 0 {
        return Err(VisionError::CondenseCount(count));
    }
    let mut out = Array2::zeros((count / CONDENSE_GROUP, dim * CONDENSE_GROUP));
    for j in 0..count / CONDENSE_GROUP {
        for c in 0..CONDENSE_GROUP {
            for t in 0..dim {
                out[[j, c * dim + t]] = raw.tokens[[j * CONDENSE_GROUP + c, t]];
            }
        }
    }
    Ok(VisualTokens { tokens: out, stage: Stage::Condensed })
}

/// The trainable linear map from condensed visual tokens into the toy LLM
/// embedding space: `y = x W + b` applied per token row.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub seed: u64,
}

impl Projector {
    /// Gaussian `W` (std 0.02), zero bias.
    pub fn seeded(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        Self::with_init_std(in_dim, out_dim, seed, 0.02)
    }

    /// Gaussian `W` with a chosen standard deviation, zero bias.
    pub fn with_init_std(in_dim: usize, out_dim: usize, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut w = Array2::zeros((in_dim, out_dim));
        for i in 0..in_dim {
            for j in 0..out_dim {
                w[[i, j]] = normal.sample(&mut rng);
            }
        }
        Projector { w, b: Array1::zeros(out_dim), seed }
    }

    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }
}

/// Apply the projector to each token row: count stays, width becomes `d_llm`.
pub fn project(condensed: &VisualTokens, p: &Projector) -> Result<VisualTokens, VisionError> {
    if condensed.dim() != p.in_dim() {
        return Err(VisionError::ShapeMismatch { got: condensed.dim(), expected: p.in_dim() });
    }
    Ok(VisualTokens {
        tokens: affine(&condensed.tokens, &p.w, &p.b),
        stage: Stage::Projected,
    })
}

/// Full per-frame pipeline: encode, condense, project. Output is always
/// `64 x d_llm`, the per-frame token count the budget arithmetic assumes.
pub fn frame_to_llm_tokens(
    frame: &Frame,
    encoder_seed: u64,
    d_vis: usize,
    p: &Projector,
) -> Result<VisualTokens, VisionError> {
    project(&condense(&encode_frame(frame, encoder_seed, d_vis))?, p)
}

/// `x W + b` by explicit loops; the deterministic workhorse behind
/// [`project`] and training.
fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let m = w.ncols();
    debug_assert_eq!(k, w.nrows());
    let mut y = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = b[j];
            for t in 0..k {
                acc += x[[i, t]] * w[[t, j]];
            }
            y[[i, j]] = acc;
        }
    }
    y
}

/// Compare the projector's analytic gradients against central finite
/// differences for `loss` evaluated at `project(x)`. Returns the max over
/// all `W` and `b` entries of `|analytic - numeric| / max(1, |numeric|)`.
///
/// Analytic forms: `dL/dW = x^T G` and `dL/db = column sums of G`, where
/// `G = dL/dY`.
pub fn gradient_check_projector(
    p: &Projector,
    x: &Array2<f64>,
    loss: &dyn MatrixLoss,
    epsilon: f64,
) -> f64 {
    let y = affine(x, &p.w, &p.b);
    let g = loss.grad(&y);

    let (in_dim, out_dim) = (p.in_dim(), p.out_dim());
    let mut analytic_w = Array2::zeros((in_dim, out_dim));
    for i in 0..in_dim {
        for j in 0..out_dim {
            let mut acc = 0.0;
            for r in 0..x.nrows() {
                acc += x[[r, i]] * g[[r, j]];
            }
            analytic_w[[i, j]] = acc;
        }
    }
    let mut analytic_b = Array1::zeros(out_dim);
    for j in 0..out_dim {
        analytic_b[j] = g.column(j).sum();
    }

    let mut w_scratch = p.w.clone();
    let numeric_w = numeric_gradient_matrix(
        &mut w_scratch,
        |w| loss.value(&affine(x, w, &p.b)),
        epsilon,
    );
    let mut b_scratch = p.b.clone();
    let numeric_b = numeric_gradient_vector(
        &mut b_scratch,
        |b| loss.value(&affine(x, &p.w, b)),
        epsilon,
    );

    let analytic_all: Vec<&f64> = analytic_w.iter().chain(analytic_b.iter()).collect();
    let numeric_all: Vec<&f64> = numeric_w.iter().chain(numeric_b.iter()).collect();
    max_relative_error(analytic_all, numeric_all)
}

/// AdamW hyperparameters. The learning rate follows a cosine decay from
/// `learning_rate` at step 0 toward zero across the step count given to
/// [`train_projection`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Decoupled weight decay, applied to `W` only; biases are left undecayed.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Cosine-decayed learning rate for 0-based `step` of `total_steps`:
/// `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    assert!(total_steps >= 1);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Mean squared error of the projector across every pair and element.
pub fn dataset_loss(p: &Projector, pairs: &[(Array2<f64>, Array2<f64>)]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, target) in pairs {
        let y = affine(x, &p.w, &p.b);
        total += y
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += target.len();
    }
    total / count as f64
}

/// Train a copy of `p` on `(input, target)` pairs with AdamW and a cosine
/// schedule over `steps` steps. Batches cycle through the pairs in order, so
/// the run is deterministic. Returns the trained projector and the
/// full-dataset loss recorded after every step (`steps` entries).
pub fn train_projection(
    p: &Projector,
    pairs: &[(Array2<f64>, Array2<f64>)],
    cfg: &TrainConfig,
    steps: usize,
) -> (Projector, Vec<f64>) {
    assert!(!pairs.is_empty(), "need at least one training pair");
    assert!(steps >= 1, "need at least one step");
    assert!(cfg.batch_size >= 1, "batch_size must be at least 1");
    for (x, t) in pairs {
        assert_eq!(x.ncols(), p.in_dim(), "input width must match projector");
        assert_eq!(t.ncols(), p.out_dim(), "target width must match projector");
        assert_eq!(x.nrows(), t.nrows(), "input and target row counts must match");
    }

    let mut trained = p.clone();
    let (in_dim, out_dim) = (p.in_dim(), p.out_dim());
    let mut m_w = Array2::<f64>::zeros((in_dim, out_dim));
    let mut v_w = Array2::<f64>::zeros((in_dim, out_dim));
    let mut m_b = Array1::<f64>::zeros(out_dim);
    let mut v_b = Array1::<f64>::zeros(out_dim);
    let mut trace = Vec::with_capacity(steps);

    for step in 0..steps {
        // Per-element mean squared error over the batch.
        let mut g_w = Array2::<f64>::zeros((in_dim, out_dim));
        let mut g_b = Array1::<f64>::zeros(out_dim);
        let mut elements = 0usize;
        for offset in 0..cfg.batch_size {
            let (x, target) = &pairs[(step * cfg.batch_size + offset) % pairs.len()];
            elements += target.len();
            let y = affine(x, &trained.w, &trained.b);
            for r in 0..x.nrows() {
                for j in 0..out_dim {
                    let resid = 2.0 * (y[[r, j]] - target[[r, j]]);
                    g_b[j] += resid;
                    for i in 0..in_dim {
                        g_w[[i, j]] += resid * x[[r, i]];
                    }
                }
            }
        }
        let scale = 1.0 / elements as f64;
        let lr = cosine_lr(cfg.learning_rate, step, steps);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);

        for i in 0..in_dim {
            for j in 0..out_dim {
                let g = g_w[[i, j]] * scale;
                m_w[[i, j]] = cfg.beta1 * m_w[[i, j]] + (1.0 - cfg.beta1) * g;
                v_w[[i, j]] = cfg.beta2 * v_w[[i, j]] + (1.0 - cfg.beta2) * g * g;
                let update = (m_w[[i, j]] / bc1) / ((v_w[[i, j]] / bc2).sqrt() + cfg.epsilon);
                trained.w[[i, j]] -= lr * (update + cfg.weight_decay * trained.w[[i, j]]);
            }
        }
        for j in 0..out_dim {
            let g = g_b[j] * scale;
            m_b[j] = cfg.beta1 * m_b[j] + (1.0 - cfg.beta1) * g;
            v_b[j] = cfg.beta2 * v_b[j] + (1.0 - cfg.beta2) * g * g;
            let update = (m_b[j] / bc1) / ((v_b[j] / bc2).sqrt() + cfg.epsilon);
            trained.b[j] -= lr * update;
        }
        trace.push(dataset_loss(&trained, pairs));
    }
    (trained, trace)
}

/// Synthetic training data: inputs with unit Gaussian entries mapped through
/// a hidden linear map whose entries have standard deviation `map_std`.
/// Recovering that map is exactly the projector's model class.
pub fn synthetic_projection_pairs(
    n_pairs: usize,
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    seed: u64,
    map_std: f64,
) -> Vec<(Array2<f64>, Array2<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map_dist = Normal::new(0.0, map_std).expect("valid std");
    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let mut hidden = Array2::zeros((in_dim, out_dim));
    for i in 0..in_dim {
        for j in 0..out_dim {
            hidden[[i, j]] = map_dist.sample(&mut rng);
        }
    }
    (0..n_pairs)
        .map(|_| {
            let mut x = Array2::zeros((rows, in_dim));
            for r in 0..rows {
                for i in 0..in_dim {
                    x[[r, i]] = unit.sample(&mut rng);
                }
            }
            let y = affine(&x, &hidden, &Array1::zeros(out_dim));
            (x, y)
        })
        .collect()
}

/// Read a frame from the flat binary format: width, height, channels as
/// little-endian u32, then row-major float32 pixels (height, width, channel).
/// The timestamp is not stored; the returned frame carries `timestamp_ms: 0`.
pub fn read_frame_binary(path: &Path) -> Result<Frame, VisionError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(VisionError::BadFrameFile("missing 12-byte header".into()));
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (width, height, channels) = (dim(0), dim(4), dim(8));
    if (height, width, channels) != (FRAME_SIDE, FRAME_SIDE, CHANNELS) {
        return Err(VisionError::BadFrameShape { height, width, channels });
    }
    let expected = 12 + FRAME_SIDE * FRAME_SIDE * CHANNELS * 4;
    if bytes.len() != expected {
        return Err(VisionError::BadFrameFile(format!(
            "expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut pixels = Array3::zeros((FRAME_SIDE, FRAME_SIDE, CHANNELS));
    let mut at = 12;
    for y in 0..FRAME_SIDE {
        for x in 0..FRAME_SIDE {
            for c in 0..CHANNELS {
                let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
                pixels[[y, x, c]] = v as f64;
                at += 4;
            }
        }
    }
    Frame::new(pixels, 0)
}

/// Write the binary format read by [`read_frame_binary`]. Pixels are stored
/// as float32, so values round to the nearest representable float.
pub fn write_frame_binary(path: &Path, frame: &Frame) -> Result<(), VisionError> {
    let mut bytes = Vec::with_capacity(12 + FRAME_SIDE * FRAME_SIDE * CHANNELS * 4);
    for dim in [FRAME_SIDE as u32, FRAME_SIDE as u32, CHANNELS as u32] {
        bytes.extend_from_slice(&dim.to_le_bytes());
    }
    for y in 0..FRAME_SIDE {
        for x in 0..FRAME_SIDE {
            for c in 0..CHANNELS {
                bytes.extend_from_slice(&(frame.pixels[[y, x, c]] as f32).to_le_bytes());
            }
        }
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Read a raw RGB frame: exactly `224*224*3` bytes, one per channel value,
/// scaled from `0..=255` into `[0, 1]`. Returns `timestamp_ms: 0`.
pub fn read_frame_rgb(path: &Path) -> Result<Frame, VisionError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let expected = FRAME_SIDE * FRAME_SIDE * CHANNELS;
    if bytes.len() != expected {
        return Err(VisionError::BadFrameFile(format!(
            "expected {expected} bytes of raw RGB, got {}",
            bytes.len()
        )));
    }
    let mut pixels = Array3::zeros((FRAME_SIDE, FRAME_SIDE, CHANNELS));
    let mut at = 0;
    for y in 0..FRAME_SIDE {
        for x in 0..FRAME_SIDE {
            for c in 0..CHANNELS {
                pixels[[y, x, c]] = bytes[at] as f64 / 255.0;
                at += 1;
            }
        }
    }
    Frame::new(pixels, 0)
}
