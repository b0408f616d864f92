//! A small frame encoder standing in for an acoustic model.
//!
//! Layout: a strided 1-D convolution over the input frames, a fixed context
//! window over the convolution outputs, a stack of fully connected `tanh`
//! layers and a linear projection onto the output classes (blank last).
//! Gradients are written out by hand; there is no general autodiff here.

mod augment;
mod optim;

pub use augment::{augment, AugmentConfig};
pub use optim::{adagrad_step, LrSchedule};

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::FrameLogits;
use crate::matrix::Matrix;
use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub feat_dim: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub conv_channels: usize,
    /// Convolution outputs on each side of a frame fed to the first dense layer.
    pub context: usize,
    pub hidden_dims: Vec<usize>,
    /// Output classes, blank included.
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feat_dim: 16,
            conv_kernel: 7,
            conv_stride: 3,
            conv_channels: 48,
            context: 1,
            hidden_dims: vec![48],
            vocab_size: 9,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_stride < 1 || self.conv_kernel < 1 {
            return Err(Error::invalid("conv kernel and stride must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be >= 2 (tokens plus blank)"));
        }
        if self.feat_dim == 0 || self.conv_channels == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        check_rate(self.dropout)
    }

    /// Output frames for `frames` input frames, if there are enough of them.
    pub fn output_frames(&self, frames: usize) -> Option<usize> {
        (frames >= self.conv_kernel).then(|| (frames - self.conv_kernel) / self.conv_stride + 1)
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.conv_channels, self.conv_kernel * self.feat_dim)];
        let mut width = (2 * self.context + 1) * self.conv_channels;
        for &h in &self.hidden_dims {
            shapes.push((h, width));
            width = h;
        }
        shapes.push((self.vocab_size, width));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(o, i)| o * i + o).sum()
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::invalid(alloc::format!("dropout rate {rate} outside [0, 1]")))
    }
}

/// Weight and bias offsets of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    out: usize,
    inp: usize,
    w: usize,
    b: usize,
}

impl Affine {
    fn apply(&self, params: &[f64], x: &[f64], y: &mut [f64]) {
        let w = &params[self.w..self.w + self.out * self.inp];
        let b = &params[self.b..self.b + self.out];
        for ((yo, row), &bo) in y.iter_mut().zip(w.chunks_exact(self.inp)).zip(b) {
            *yo = bo + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients for upstream `gy` and input `x`, and
    /// writes the input gradient into `gx` when asked.
    fn back(&self, params: &[f64], x: &[f64], gy: &[f64], grad: &mut [f64], gx: Option<&mut [f64]>) {
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[self.b + o] += g;
            let row = &mut grad[self.w + o * self.inp..self.w + (o + 1) * self.inp];
            for (r, &xi) in row.iter_mut().zip(x) {
                *r += g * xi;
            }
        }
        if let Some(gx) = gx {
            gx.iter_mut().for_each(|v| *v = 0.0);
            let w = &params[self.w..self.w + self.out * self.inp];
            for (row, &g) in w.chunks_exact(self.inp).zip(gy) {
                if g == 0.0 {
                    continue;
                }
                for (gxi, &wi) in gx.iter_mut().zip(row) {
                    *gxi += g * wi;
                }
            }
        }
    }
}

fn affine_layout(cfg: &EncoderConfig) -> Vec<Affine> {
    let mut offset = 0;
    cfg.layer_shapes()
        .into_iter()
        .map(|(out, inp)| {
            let a = Affine { out, inp, w: offset, b: offset + out * inp };
            offset += out * inp + out;
            a
        })
        .collect()
}

/// Parameters, Adagrad accumulators, update counter and current dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: EncoderConfig,
    layout: Vec<Affine>,
    pub(crate) params: Vec<f64>,
    pub(crate) accum: Vec<f64>,
    pub(crate) step: u64,
    dropout: f64,
}

impl ModelState {
    /// Glorot-uniform weights drawn from the config seed, zero biases.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layout = affine_layout(&config);
        let mut rng = rng::stream(config.seed, Stream::ModelInit, 0);
        let mut params = vec![0.0; config.param_count()];
        for a in &layout {
            let bound = libm::sqrt(6.0 / (a.inp + a.out) as f64);
            for p in &mut params[a.w..a.w + a.out * a.inp] {
                *p = rng.random_range(-bound..bound);
            }
        }
        let n = params.len();
        let dropout = config.dropout;
        Ok(ModelState { config, layout, params, accum: vec![0.0; n], step: 0, dropout })
    }

    /// Rebuilds a state from stored parts (e.g. a checkpoint).
    pub fn from_parts(config: EncoderConfig, params: Vec<f64>, accum: Vec<f64>, step: u64, dropout: f64) -> Result<Self> {
        config.validate()?;
        check_rate(dropout)?;
        let n = config.param_count();
        if params.len() != n || accum.len() != n {
            return Err(Error::Shape {
                expected: alloc::format!("{n} parameters"),
                got: alloc::format!("{} parameters, {} accumulators", params.len(), accum.len()),
            });
        }
        let layout = affine_layout(&config);
        Ok(ModelState { config, layout, params, accum, step, dropout })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.accum
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        check_rate(rate)?;
        self.dropout = rate;
        Ok(())
    }

    pub fn blank(&self) -> crate::TokenId {
        (self.config.vocab_size - 1) as crate::TokenId
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Intermediates kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    features: Matrix,
    frames: usize,
    /// Per layer (convolution first, then the dense stack): `tanh` outputs
    /// before dropout and the dropout scale applied to each unit.
    activations: Vec<Matrix>,
    masks: Vec<Option<Matrix>>,
    /// Input of the output projection, one row per frame.
    last_input: Matrix,
}

impl Tape {
    pub fn frames(&self) -> usize {
        self.frames
    }
}

fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Option<Matrix> {
    if rate <= 0.0 {
        return None;
    }
    let mut m = Matrix::zeros(rows, cols);
    if rate < 1.0 {
        let keep = 1.0 / (1.0 - rate);
        for v in m.as_mut_slice() {
            if rng.random::<f64>() >= rate {
                *v = keep;
            }
        }
    }
    Some(m)
}

fn masked(h: &Matrix, mask: &Option<Matrix>) -> Matrix {
    match mask {
        None => h.clone(),
        Some(m) => {
            let data = h.as_slice().iter().zip(m.as_slice()).map(|(a, b)| a * b).collect();
            Matrix::from_vec(h.rows(), h.cols(), data).expect("same shape")
        }
    }
}

/// Computes per-frame logits. Train mode applies dropout at the state's
/// current rate using `rng`; inference mode never touches `rng`.
pub fn forward<R: Rng + ?Sized>(
    state: &ModelState,
    features: &Matrix,
    mode: Mode,
    rng: &mut R,
) -> Result<(FrameLogits, Tape)> {
    let cfg = &state.config;
    if features.cols() != cfg.feat_dim {
        return Err(Error::Shape {
            expected: alloc::format!("{} feature columns", cfg.feat_dim),
            got: alloc::format!("{}", features.cols()),
        });
    }
    let frames = cfg.output_frames(features.rows()).ok_or_else(|| {
        Error::invalid(alloc::format!(
            "{} input frames is shorter than the convolution kernel ({})",
            features.rows(),
            cfg.conv_kernel
        ))
    })?;
    let rate = if mode == Mode::Train { state.dropout } else { 0.0 };
    let p = &state.params;
    let mut activations = Vec::with_capacity(self::depth(cfg));
    let mut masks = Vec::with_capacity(self::depth(cfg));

    let conv = state.layout[0];
    let window = cfg.conv_kernel * cfg.feat_dim;
    let mut h = Matrix::zeros(frames, conv.out);
    for t in 0..frames {
        let start = t * cfg.conv_stride * cfg.feat_dim;
        let x = &features.as_slice()[start..start + window];
        conv.apply(p, x, h.row_mut(t));
        h.row_mut(t).iter_mut().for_each(|v| *v = libm::tanh(*v));
    }
    let mask = dropout_mask(frames, conv.out, rate, rng);
    let mut input = with_context(&masked(&h, &mask), cfg.context);
    activations.push(h);
    masks.push(mask);

    for layer in &state.layout[1..state.layout.len() - 1] {
        let mut h = Matrix::zeros(frames, layer.out);
        for t in 0..frames {
            layer.apply(p, input.row(t), h.row_mut(t));
            h.row_mut(t).iter_mut().for_each(|v| *v = libm::tanh(*v));
        }
        let mask = dropout_mask(frames, layer.out, rate, rng);
        input = masked(&h, &mask);
        activations.push(h);
        masks.push(mask);
    }

    let out = state.layout[state.layout.len() - 1];
    let mut logits = Matrix::zeros(frames, out.out);
    for t in 0..frames {
        out.apply(p, input.row(t), logits.row_mut(t));
    }
    if logits.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: state.step });
    }
    let tape = Tape { features: features.clone(), frames, activations, masks, last_input: input };
    Ok((FrameLogits::new(logits)?, tape))
}

fn depth(cfg: &EncoderConfig) -> usize {
    1 + cfg.hidden_dims.len()
}

/// Inference-mode logits.
pub fn infer(state: &ModelState, features: &Matrix) -> Result<FrameLogits> {
    // Inference never draws from the stream; any generator will do.
    let mut unused = rng::stream(0, Stream::Dropout, 0);
    forward(state, features, Mode::Inference, &mut unused).map(|(l, _)| l)
}

fn with_context(h: &Matrix, context: usize) -> Matrix {
    let (frames, width) = (h.rows(), h.cols());
    let span = 2 * context + 1;
    let mut z = Matrix::zeros(frames, span * width);
    for t in 0..frames {
        let row = z.row_mut(t);
        for j in 0..span {
            let src = t as isize + j as isize - context as isize;
            if src >= 0 && (src as usize) < frames {
                row[j * width..(j + 1) * width].copy_from_slice(h.row(src as usize));
            }
        }
    }
    z
}

/// Gradient of `sum(grad_logits .* logits)` with respect to the parameters.
pub fn backward(state: &ModelState, tape: &Tape, grad_logits: &Matrix) -> Result<Vec<f64>> {
    let cfg = &state.config;
    if grad_logits.rows() != tape.frames || grad_logits.cols() != cfg.vocab_size {
        return Err(Error::Shape {
            expected: alloc::format!("{}x{}", tape.frames, cfg.vocab_size),
            got: alloc::format!("{}x{}", grad_logits.rows(), grad_logits.cols()),
        });
    }
    let p = &state.params;
    let mut grad = vec![0.0; p.len()];
    let n_layers = state.layout.len();

    // Output projection.
    let out = state.layout[n_layers - 1];
    let mut g_in = Matrix::zeros(tape.frames, out.inp);
    for t in 0..tape.frames {
        out.back(p, tape.last_input.row(t), grad_logits.row(t), &mut grad, Some(g_in.row_mut(t)));
    }

    // Dense stack, top down. `g_in` holds the gradient w.r.t. the (masked)
    // output of the layer being processed.
    for li in (1..n_layers - 1).rev() {
        let layer = state.layout[li];
        let pre = pre_activation_grad(&g_in, &tape.activations[li], &tape.masks[li]);
        let below = if li == 1 {
            with_context(&masked(&tape.activations[0], &tape.masks[0]), cfg.context)
        } else {
            masked(&tape.activations[li - 1], &tape.masks[li - 1])
        };
        let mut g_below = Matrix::zeros(tape.frames, layer.inp);
        for t in 0..tape.frames {
            layer.back(p, below.row(t), pre.row(t), &mut grad, Some(g_below.row_mut(t)));
        }
        g_in = g_below;
    }

    // Undo the context window: scatter each block back to its source frame.
    let width = cfg.conv_channels;
    let span = 2 * cfg.context + 1;
    let mut g_conv = Matrix::zeros(tape.frames, width);
    for t in 0..tape.frames {
        let row = g_in.row(t);
        for j in 0..span {
            let src = t as isize + j as isize - cfg.context as isize;
            if src >= 0 && (src as usize) < tape.frames {
                let dst = g_conv.row_mut(src as usize);
                for (d, s) in dst.iter_mut().zip(&row[j * width..(j + 1) * width]) {
                    *d += s;
                }
            }
        }
    }

    let conv = state.layout[0];
    let pre = pre_activation_grad(&g_conv, &tape.activations[0], &tape.masks[0]);
    let window = cfg.conv_kernel * cfg.feat_dim;
    for t in 0..tape.frames {
        let start = t * cfg.conv_stride * cfg.feat_dim;
        let x = &tape.features.as_slice()[start..start + window];
        conv.back(p, x, pre.row(t), &mut grad, None);
    }
    Ok(grad)
}

/// Chains an upstream gradient through dropout and `tanh`.
fn pre_activation_grad(upstream: &Matrix, h: &Matrix, mask: &Option<Matrix>) -> Matrix {
    let mut out = upstream.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let hv = h.as_slice()[i];
        let m = mask.as_ref().map_or(1.0, |m| m.as_slice()[i]);
        *v *= m * (1.0 - hv * hv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_loss_grad;
    use crate::metrics::Transcript;
    use crate::rng::Rng as ChaCha;
    use rand::SeedableRng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            feat_dim: 3,
            conv_kernel: 3,
            conv_stride: 2,
            conv_channels: 4,
            context: 1,
            hidden_dims: vec![5],
            vocab_size: 4,
            dropout: 0.0,
            seed: 3,
        }
    }

    fn features(rng: &mut ChaCha, t: usize, f: usize) -> Matrix {
        Matrix::from_vec(t, f, (0..t * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn stride_arithmetic() {
        let cfg = EncoderConfig { feat_dim: 2, ..EncoderConfig::default() };
        assert_eq!(cfg.output_frames(10), Some(2));
        assert_eq!(cfg.output_frames(7), Some(1));
        assert_eq!(cfg.output_frames(6), None);
        let state = ModelState::init(cfg).unwrap();
        let x = Matrix::zeros(10, 2);
        assert_eq!(infer(&state, &x).unwrap().frames(), 2);
        assert!(infer(&state, &Matrix::zeros(6, 2)).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut state = ModelState::init(tiny()).unwrap();
        state.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let x = features(&mut ChaCha::seed_from_u64(1), 9, 3);
        let l = infer(&state, &x).unwrap();
        assert!(l.values().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inference_is_bitwise_deterministic() {
        let mut cfg = tiny();
        cfg.dropout = 0.5;
        let state = ModelState::init(cfg).unwrap();
        let x = features(&mut ChaCha::seed_from_u64(1), 11, 3);
        let a = infer(&state, &x).unwrap();
        let b = forward(&state, &x, Mode::Inference, &mut ChaCha::seed_from_u64(99)).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_rates() {
        let mut state = ModelState::init(tiny()).unwrap();
        let x = features(&mut ChaCha::seed_from_u64(1), 11, 3);
        state.set_dropout(0.0).unwrap();
        let train = forward(&state, &x, Mode::Train, &mut ChaCha::seed_from_u64(5)).unwrap().0;
        assert_eq!(train, infer(&state, &x).unwrap());

        state.set_dropout(1.0).unwrap();
        let (logits, tape) = forward(&state, &x, Mode::Train, &mut ChaCha::seed_from_u64(5)).unwrap();
        assert!(tape.last_input.as_slice().iter().all(|&v| v == 0.0));
        // Only the output bias survives.
        for r in logits.values().iter_rows() {
            assert_eq!(r, &state.params()[state.params().len() - 4..]);
        }

        state.set_dropout(0.4).unwrap();
        let a = forward(&state, &x, Mode::Train, &mut ChaCha::seed_from_u64(8)).unwrap().0;
        let b = forward(&state, &x, Mode::Train, &mut ChaCha::seed_from_u64(8)).unwrap().0;
        assert_eq!(a, b);
        assert!(state.set_dropout(1.5).is_err());
        assert!(state.set_dropout(-0.1).is_err());
    }

    #[test]
    fn backward_of_zero_is_zero_and_linear() {
        let state = ModelState::init(tiny()).unwrap();
        let mut rng = ChaCha::seed_from_u64(2);
        let x = features(&mut rng, 13, 3);
        let (logits, tape) = forward(&state, &x, Mode::Train, &mut rng).unwrap();
        let (t, v) = (logits.frames(), logits.classes());
        let zero = backward(&state, &tape, &Matrix::zeros(t, v)).unwrap();
        assert!(zero.iter().all(|&g| g == 0.0));

        let g1 = features(&mut rng, t, v);
        let g2 = features(&mut rng, t, v);
        let sum = Matrix::from_vec(t, v, g1.as_slice().iter().zip(g2.as_slice()).map(|(a, b)| a + b).collect()).unwrap();
        let b1 = backward(&state, &tape, &g1).unwrap();
        let b2 = backward(&state, &tape, &g2).unwrap();
        let bs = backward(&state, &tape, &sum).unwrap();
        for i in 0..bs.len() {
            assert!((bs[i] - b1[i] - b2[i]).abs() < 1e-12);
        }
        assert!(backward(&state, &tape, &Matrix::zeros(t + 1, v)).is_err());
    }

    /// Central differences of `sum(g .* logits)` w.r.t. every parameter.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha::seed_from_u64(7);
        for trial in 0..4 {
            let mut cfg = tiny();
            cfg.seed = trial;
            cfg.hidden_dims = match trial % 3 {
                0 => vec![],
                1 => vec![5],
                _ => vec![4, 3],
            };
            let state = ModelState::init(cfg).unwrap();
            let x = features(&mut rng, 9 + trial as usize, 3);
            let (logits, tape) = forward(&state, &x, Mode::Inference, &mut rng).unwrap();
            let g = features(&mut rng, logits.frames(), logits.classes());
            let analytic = backward(&state, &tape, &g).unwrap();
            let objective = |s: &ModelState| -> f64 {
                let l = infer(s, &x).unwrap();
                l.values().as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum()
            };
            let h = 1e-4;
            for i in 0..analytic.len() {
                let mut s = state.clone();
                s.params[i] += h;
                let up = objective(&s);
                s.params[i] -= 2.0 * h;
                let down = objective(&s);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-5, "param {i}: fd {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn dropout_backward_matches_finite_differences_with_fixed_mask() {
        let mut cfg = tiny();
        cfg.dropout = 0.3;
        let state = ModelState::init(cfg).unwrap();
        let x = features(&mut ChaCha::seed_from_u64(1), 11, 3);
        let target = Transcript(vec![0, 2]);
        let loss = |s: &ModelState| {
            let (l, _) = forward(s, &x, Mode::Train, &mut ChaCha::seed_from_u64(77)).unwrap();
            ctc_loss_grad(&l, &target).unwrap()
        };
        let (logits, tape) = forward(&state, &x, Mode::Train, &mut ChaCha::seed_from_u64(77)).unwrap();
        let out = ctc_loss_grad(&logits, &target).unwrap();
        let analytic = backward(&state, &tape, &out.grad).unwrap();
        let h = 1e-4;
        for i in (0..analytic.len()).step_by(3) {
            let mut s = state.clone();
            s.params[i] += h;
            let up = loss(&s).loss;
            s.params[i] -= 2.0 * h;
            let down = loss(&s).loss;
            assert!(((up - down) / (2.0 * h) - analytic[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn from_parts_checks_lengths() {
        let cfg = tiny();
        let n = cfg.param_count();
        assert!(ModelState::from_parts(cfg.clone(), vec![0.0; n], vec![0.0; n], 4, 0.1).is_ok());
        assert!(ModelState::from_parts(cfg, vec![0.0; n - 1], vec![0.0; n], 4, 0.1).is_err());
    }
}
