//! Trainable weight functions and the toy encoders that make them streaming
//! or not.
//!
//! A weight function maps (feature row, context state, label) to a raw score
//! `s`; the lattice stores the log-domain weight `-s`, so higher score means
//! more likely while the sweeps accumulate negative log mass. Three
//! architectures with decreasing parameter count per context state:
//!
//! - `Unshared`: a projection matrix and bias per context state.
//! - `SharedEmb`: one shared projection over `tanh(h + E[q_c])` with a
//!   learned embedding per context state.
//! - `SharedRnn`: like `SharedEmb` but the embedding is produced by running
//!   a single-layer tanh RNN over the state's label history (oldest label
//!   first, zero initial hidden state), so structure is shared across
//!   histories.
//!
//! Rows can optionally be normalized locally, either with a plain masked
//! softmax or with the sigmoid-gated factorization that scores epsilon
//! against the label block. Normalization is over the arcs that actually
//! exist at the current alignment state; normalizing over missing arcs
//! would leak probability mass and break the unit-normalizer property.

use crate::context::ContextDependency;
use crate::semiring::Weight;
use crate::{Error, Result};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;

/// Encoder activations: one row per input frame.
pub type EncoderOutput = Array2<f64>;

/// How arcs are normalized across `Sigma u {eps}` at a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Normalization {
    /// Raw scores; the model carries an explicit global normalizer.
    Global,
    /// Masked log-softmax over the existing arcs.
    LocalSoftmax,
    /// Sigmoid on the epsilon score gates the label block:
    /// `p(eps) = sigmoid(s_eps)`, `p(y) = (1 - sigmoid(s_eps)) * softmax(s)[y]`.
    LocalHat,
}

impl Normalization {
    pub fn is_local(self) -> bool {
        !matches!(self, Normalization::Global)
    }
}

fn softplus(z: f64) -> f64 {
    // log(1 + e^z), stable on both tails.
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Log-sum-exp of the masked-in entries of `s`.
fn masked_lse(s: &ArrayView1<f64>, mask: &[bool]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (v, &on) in s.iter().zip(mask) {
        if on && *v > m {
            m = *v;
        }
    }
    let mut acc = 0.0;
    for (v, &on) in s.iter().zip(mask) {
        if on {
            acc += (v - m).exp();
        }
    }
    m + acc.ln()
}

/// Turn one row of raw scores into log-domain arc weights under `mode`.
/// `mask[y]` says whether the arc for label `y` (epsilon at index `vocab`)
/// exists at the current alignment state; masked-out entries come back as
/// the zero element (infinity).
pub fn normalize_row(
    mode: Normalization,
    scores: &ArrayView1<f64>,
    mask: &[bool],
) -> Result<Array1<Weight>> {
    let v = scores.len() - 1;
    debug_assert_eq!(mask.len(), v + 1);
    let any_label = mask[..v].iter().any(|&m| m);
    let has_eps = mask[v];
    if !any_label && !has_eps {
        return Err(Error::AllArcsMasked);
    }
    let mut out = Array1::from_elem(v + 1, f64::INFINITY);
    match mode {
        Normalization::Global => {
            for y in 0..=v {
                if mask[y] {
                    out[y] = -scores[y];
                }
            }
        }
        Normalization::LocalSoftmax => {
            let lse = masked_lse(scores, mask);
            for y in 0..=v {
                if mask[y] {
                    out[y] = lse - scores[y];
                }
            }
        }
        Normalization::LocalHat => {
            if !has_eps {
                // Degenerates to a plain softmax over the labels.
                let lse = masked_lse(scores, mask);
                for y in 0..v {
                    if mask[y] {
                        out[y] = lse - scores[y];
                    }
                }
            } else if !any_label {
                // Only epsilon exists: it takes all the mass.
                out[v] = 0.0;
            } else {
                let s_eps = scores[v];
                out[v] = softplus(-s_eps); // -log sigmoid(s_eps)
                let mut label_mask = mask.to_vec();
                label_mask[v] = false;
                let lse = masked_lse(scores, &label_mask);
                for y in 0..v {
                    if mask[y] {
                        out[y] = softplus(s_eps) + (lse - scores[y]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Row-wise [`normalize_row`] over a whole score matrix.
pub fn normalize_rows(
    mode: Normalization,
    scores: &ArrayView2<f64>,
    mask: &[bool],
) -> Result<Array2<Weight>> {
    let mut out = Array2::zeros(scores.raw_dim());
    for (mut out_row, row) in out.outer_iter_mut().zip(scores.outer_iter()) {
        out_row.assign(&normalize_row(mode, &row, mask)?);
    }
    Ok(out)
}

/// Chain rule through the normalization: maps `g[y]`, the difference of
/// denominator and numerator arc occupations for one row, to the gradient of
/// the loss with respect to that row's raw scores.
pub fn score_grad_row(
    mode: Normalization,
    scores: &ArrayView1<f64>,
    mask: &[bool],
    g: &ArrayView1<f64>,
) -> Array1<f64> {
    let v = scores.len() - 1;
    let mut out = Array1::zeros(v + 1);
    let any_label = mask[..v].iter().any(|&m| m);
    let has_eps = mask[v];
    match mode {
        Normalization::Global => {
            for y in 0..=v {
                if mask[y] {
                    out[y] = g[y];
                }
            }
        }
        Normalization::LocalSoftmax => {
            let lse = masked_lse(scores, mask);
            let total: f64 = (0..=v).filter(|&y| mask[y]).map(|y| g[y]).sum();
            for y in 0..=v {
                if mask[y] {
                    let p = (scores[y] - lse).exp();
                    out[y] = g[y] - p * total;
                }
            }
        }
        Normalization::LocalHat => {
            if !has_eps {
                let lse = masked_lse(scores, mask);
                let total: f64 = (0..v).filter(|&y| mask[y]).map(|y| g[y]).sum();
                for y in 0..v {
                    if mask[y] {
                        let p = (scores[y] - lse).exp();
                        out[y] = g[y] - p * total;
                    }
                }
            } else if !any_label {
                // The lone epsilon arc has constant weight 0: no gradient.
            } else {
                let s_eps = scores[v];
                let sig = sigmoid(s_eps);
                let mut label_mask = mask.to_vec();
                label_mask[v] = false;
                let lse = masked_lse(scores, &label_mask);
                let total: f64 = (0..v).filter(|&y| mask[y]).map(|y| g[y]).sum();
                out[v] = g[v] * (1.0 - sig) - sig * total;
                for y in 0..v {
                    if mask[y] {
                        let p = (scores[y] - lse).exp();
                        out[y] = g[y] - p * total;
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

/// Feature encoder. `CausalRnn` output row `t` depends on input rows
/// `0..=t` only; `BidirRnn` sees the whole sequence.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Encoder {
    CausalRnn {
        w_in: Array2<f64>, // (d, d_in)
        w_hh: Array2<f64>, // (d, d)
        bias: Array1<f64>, // (d)
    },
    BidirRnn {
        fwd_in: Array2<f64>,
        fwd_hh: Array2<f64>,
        fwd_bias: Array1<f64>,
        bwd_in: Array2<f64>,
        bwd_hh: Array2<f64>,
        bwd_bias: Array1<f64>,
        w_proj: Array2<f64>, // (d, 2d)
        b_proj: Array1<f64>, // (d)
    },
}

/// Per-sequence state the encoder backward pass needs.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    fwd_hidden: Array2<f64>,
    bwd_hidden: Option<Array2<f64>>,
}

fn uniform_init(rng: &mut impl Rng, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let r = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-r, r);
    Array2::from_shape_fn(shape, |_| dist.sample(rng))
}

fn uniform_init_1d(rng: &mut impl Rng, len: usize, fan_in: usize) -> Array1<f64> {
    let r = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-r, r);
    Array1::from_shape_fn(len, |_| dist.sample(rng))
}

impl Encoder {
    pub fn causal(rng: &mut impl Rng, d_in: usize, d: usize) -> Self {
        Encoder::CausalRnn {
            w_in: uniform_init(rng, (d, d_in), d_in),
            w_hh: uniform_init(rng, (d, d), d),
            bias: uniform_init_1d(rng, d, d),
        }
    }

    pub fn bidir(rng: &mut impl Rng, d_in: usize, d: usize) -> Self {
        Encoder::BidirRnn {
            fwd_in: uniform_init(rng, (d, d_in), d_in),
            fwd_hh: uniform_init(rng, (d, d), d),
            fwd_bias: uniform_init_1d(rng, d, d),
            bwd_in: uniform_init(rng, (d, d_in), d_in),
            bwd_hh: uniform_init(rng, (d, d), d),
            bwd_bias: uniform_init_1d(rng, d, d),
            w_proj: uniform_init(rng, (d, 2 * d), 2 * d),
            b_proj: uniform_init_1d(rng, d, 2 * d),
        }
    }

    pub fn is_streaming(&self) -> bool {
        matches!(self, Encoder::CausalRnn { .. })
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::CausalRnn { w_in, .. } => w_in.nrows(),
            Encoder::BidirRnn { w_proj, .. } => w_proj.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::CausalRnn { w_in, .. } => w_in.ncols(),
            Encoder::BidirRnn { fwd_in, .. } => fwd_in.ncols(),
        }
    }

    /// Run a tanh recurrence over the rows of `x` in the given order.
    fn run_chain(
        w_in: &Array2<f64>,
        w_hh: &Array2<f64>,
        bias: &Array1<f64>,
        x: &ArrayView2<f64>,
        reverse: bool,
    ) -> Array2<f64> {
        let t_len = x.nrows();
        let d = w_in.nrows();
        let mut hidden = Array2::zeros((t_len, d));
        let mut prev = Array1::zeros(d);
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t_len).rev())
        } else {
            Box::new(0..t_len)
        };
        for t in order {
            let mut a = w_in.dot(&x.row(t)) + bias;
            a += &w_hh.dot(&prev);
            let h = a.mapv(f64::tanh);
            hidden.row_mut(t).assign(&h);
            prev = h;
        }
        hidden
    }

    /// Encode a feature sequence into activations, keeping what the backward
    /// pass needs.
    pub fn encode(&self, x: &ArrayView2<f64>) -> Result<(EncoderOutput, EncoderCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input dim {} vs encoder dim {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input".into()));
        }
        match self {
            Encoder::CausalRnn { w_in, w_hh, bias } => {
                let hidden = Self::run_chain(w_in, w_hh, bias, x, false);
                Ok((
                    hidden.clone(),
                    EncoderCache {
                        fwd_hidden: hidden,
                        bwd_hidden: None,
                    },
                ))
            }
            Encoder::BidirRnn {
                fwd_in,
                fwd_hh,
                fwd_bias,
                bwd_in,
                bwd_hh,
                bwd_bias,
                w_proj,
                b_proj,
            } => {
                let fwd = Self::run_chain(fwd_in, fwd_hh, fwd_bias, x, false);
                let bwd = Self::run_chain(bwd_in, bwd_hh, bwd_bias, x, true);
                let d = w_proj.nrows();
                let mut out = Array2::zeros((x.nrows(), d));
                for t in 0..x.nrows() {
                    let mut cat = Array1::zeros(2 * d);
                    cat.slice_mut(ndarray::s![..d]).assign(&fwd.row(t));
                    cat.slice_mut(ndarray::s![d..]).assign(&bwd.row(t));
                    out.row_mut(t).assign(&(w_proj.dot(&cat) + b_proj));
                }
                Ok((
                    out,
                    EncoderCache {
                        fwd_hidden: fwd,
                        bwd_hidden: Some(bwd),
                    },
                ))
            }
        }
    }

    /// Backpropagate through one tanh chain; returns parameter gradients.
    #[allow(clippy::too_many_arguments)]
    fn chain_backward(
        w_hh: &Array2<f64>,
        hidden: &Array2<f64>,
        x: &ArrayView2<f64>,
        d_hidden: &Array2<f64>,
        reverse: bool,
        g_in: &mut Array2<f64>,
        g_hh: &mut Array2<f64>,
        g_bias: &mut Array1<f64>,
    ) {
        let t_len = x.nrows();
        let d = w_hh.nrows();
        let mut carry: Array1<f64> = Array1::zeros(d);
        // Walk the chain in reverse processing order.
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new(0..t_len)
        } else {
            Box::new((0..t_len).rev())
        };
        for t in order {
            let h = hidden.row(t);
            let upstream = &d_hidden.row(t) + &carry;
            let da = Array1::from_shape_fn(d, |i| upstream[i] * (1.0 - h[i] * h[i]));
            for i in 0..d {
                for (j, xv) in x.row(t).iter().enumerate() {
                    g_in[[i, j]] += da[i] * xv;
                }
            }
            let prev_t = if reverse {
                (t + 1 < t_len).then(|| t + 1)
            } else {
                t.checked_sub(1)
            };
            if let Some(pt) = prev_t {
                let prev = hidden.row(pt);
                for i in 0..d {
                    for j in 0..d {
                        g_hh[[i, j]] += da[i] * prev[j];
                    }
                }
            }
            *g_bias += &da;
            carry = w_hh.t().dot(&da);
        }
    }

    /// Gradients of all encoder parameters given the loss gradient with
    /// respect to the activation rows.
    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        cache: &EncoderCache,
        d_out: &Array2<f64>,
    ) -> Encoder {
        let mut grads = self.zeros_like();
        match (self, &mut grads) {
            (
                Encoder::CausalRnn { w_hh, .. },
                Encoder::CausalRnn {
                    w_in: g_in,
                    w_hh: g_hh,
                    bias: g_bias,
                },
            ) => {
                Self::chain_backward(w_hh, &cache.fwd_hidden, x, d_out, false, g_in, g_hh, g_bias);
            }
            (
                Encoder::BidirRnn {
                    fwd_hh,
                    bwd_hh,
                    w_proj,
                    ..
                },
                Encoder::BidirRnn {
                    fwd_in: gf_in,
                    fwd_hh: gf_hh,
                    fwd_bias: gf_bias,
                    bwd_in: gb_in,
                    bwd_hh: gb_hh,
                    bwd_bias: gb_bias,
                    w_proj: g_proj,
                    b_proj: g_bproj,
                },
            ) => {
                let d = w_proj.nrows();
                let t_len = x.nrows();
                let fwd = &cache.fwd_hidden;
                let bwd = cache.bwd_hidden.as_ref().expect("bidir cache");
                let mut d_fwd = Array2::zeros((t_len, d));
                let mut d_bwd = Array2::zeros((t_len, d));
                for t in 0..t_len {
                    let dh = d_out.row(t);
                    for i in 0..d {
                        for j in 0..d {
                            g_proj[[i, j]] += dh[i] * fwd[[t, j]];
                            g_proj[[i, d + j]] += dh[i] * bwd[[t, j]];
                        }
                    }
                    *g_bproj += &dh;
                    let dcat = w_proj.t().dot(&dh);
                    d_fwd.row_mut(t).assign(&dcat.slice(ndarray::s![..d]));
                    d_bwd.row_mut(t).assign(&dcat.slice(ndarray::s![d..]));
                }
                Self::chain_backward(fwd_hh, fwd, x, &d_fwd, false, gf_in, gf_hh, gf_bias);
                Self::chain_backward(bwd_hh, bwd, x, &d_bwd, true, gb_in, gb_hh, gb_bias);
            }
            _ => unreachable!("gradient container matches the encoder variant"),
        }
        grads
    }

    pub fn zeros_like(&self) -> Encoder {
        match self {
            Encoder::CausalRnn { w_in, w_hh, bias } => Encoder::CausalRnn {
                w_in: Array2::zeros(w_in.raw_dim()),
                w_hh: Array2::zeros(w_hh.raw_dim()),
                bias: Array1::zeros(bias.raw_dim()),
            },
            Encoder::BidirRnn {
                fwd_in,
                fwd_hh,
                fwd_bias,
                bwd_in,
                bwd_hh,
                bwd_bias,
                w_proj,
                b_proj,
            } => Encoder::BidirRnn {
                fwd_in: Array2::zeros(fwd_in.raw_dim()),
                fwd_hh: Array2::zeros(fwd_hh.raw_dim()),
                fwd_bias: Array1::zeros(fwd_bias.raw_dim()),
                bwd_in: Array2::zeros(bwd_in.raw_dim()),
                bwd_hh: Array2::zeros(bwd_hh.raw_dim()),
                bwd_bias: Array1::zeros(bwd_bias.raw_dim()),
                w_proj: Array2::zeros(w_proj.raw_dim()),
                b_proj: Array1::zeros(b_proj.raw_dim()),
            },
        }
    }

    /// Named tensors in a fixed order (shared by the optimizer, the model
    /// file, and finite differencing).
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        fn t2(a: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
            (a.shape().to_vec(), a.iter().copied().collect())
        }
        fn t1(a: &Array1<f64>) -> (Vec<usize>, Vec<f64>) {
            (a.shape().to_vec(), a.iter().copied().collect())
        }
        match self {
            Encoder::CausalRnn { w_in, w_hh, bias } => {
                let mut out = Vec::new();
                let (s, d) = t2(w_in);
                out.push(("encoder.w_in", s, d));
                let (s, d) = t2(w_hh);
                out.push(("encoder.w_hh", s, d));
                let (s, d) = t1(bias);
                out.push(("encoder.bias", s, d));
                out
            }
            Encoder::BidirRnn {
                fwd_in,
                fwd_hh,
                fwd_bias,
                bwd_in,
                bwd_hh,
                bwd_bias,
                w_proj,
                b_proj,
            } => {
                let mut out = Vec::new();
                for (name, a) in [
                    ("encoder.fwd_in", fwd_in),
                    ("encoder.fwd_hh", fwd_hh),
                    ("encoder.bwd_in", bwd_in),
                    ("encoder.bwd_hh", bwd_hh),
                    ("encoder.w_proj", w_proj),
                ] {
                    let (s, d) = t2(a);
                    out.push((name, s, d));
                }
                for (name, a) in [
                    ("encoder.fwd_bias", fwd_bias),
                    ("encoder.bwd_bias", bwd_bias),
                    ("encoder.b_proj", b_proj),
                ] {
                    let (s, d) = t1(a);
                    out.push((name, s, d));
                }
                out
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, d)| d).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut at = 0;
        let mut take = |a: &mut [f64]| {
            a.copy_from_slice(&flat[at..at + a.len()]);
            at += a.len();
        };
        match self {
            Encoder::CausalRnn { w_in, w_hh, bias } => {
                take(w_in.as_slice_mut().unwrap());
                take(w_hh.as_slice_mut().unwrap());
                take(bias.as_slice_mut().unwrap());
            }
            Encoder::BidirRnn {
                fwd_in,
                fwd_hh,
                fwd_bias,
                bwd_in,
                bwd_hh,
                bwd_bias,
                w_proj,
                b_proj,
            } => {
                take(fwd_in.as_slice_mut().unwrap());
                take(fwd_hh.as_slice_mut().unwrap());
                take(bwd_in.as_slice_mut().unwrap());
                take(bwd_hh.as_slice_mut().unwrap());
                take(w_proj.as_slice_mut().unwrap());
                take(fwd_bias.as_slice_mut().unwrap());
                take(bwd_bias.as_slice_mut().unwrap());
                take(b_proj.as_slice_mut().unwrap());
            }
        }
        if at != flat.len() {
            return Err(Error::Dimension(format!(
                "flat parameter length {} vs expected {}",
                flat.len(),
                at
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Weight functions
// ---------------------------------------------------------------------------

/// Trainable transition scores. Column layout: labels `0..vocab` in
/// lexicographic order, epsilon at column `vocab`.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum WeightFunction {
    Unshared {
        w: Array3<f64>, // (num_states, vocab + 1, d)
        b: Array2<f64>, // (num_states, vocab + 1)
    },
    SharedEmb {
        emb: Array2<f64>, // (num_states, d)
        w: Array2<f64>,   // (vocab + 1, d)
        b: Array1<f64>,   // (vocab + 1)
    },
    SharedRnn {
        w_in: Array2<f64>,   // (h, vocab)
        w_hh: Array2<f64>,   // (h, h)
        b_h: Array1<f64>,    // (h)
        w_proj: Array2<f64>, // (d, h)
        b_proj: Array1<f64>, // (d)
        w: Array2<f64>,      // (vocab + 1, d)
        b: Array1<f64>,      // (vocab + 1)
    },
}

impl WeightFunction {
    pub fn unshared(rng: &mut impl Rng, num_states: usize, vocab: usize, d: usize) -> Self {
        let r = 1.0 / (d.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-r, r);
        WeightFunction::Unshared {
            w: Array3::from_shape_fn((num_states, vocab + 1, d), |_| dist.sample(rng)),
            b: Array2::from_shape_fn((num_states, vocab + 1), |_| dist.sample(rng)),
        }
    }

    pub fn shared_emb(rng: &mut impl Rng, num_states: usize, vocab: usize, d: usize) -> Self {
        WeightFunction::SharedEmb {
            emb: uniform_init(rng, (num_states, d), d),
            w: uniform_init(rng, (vocab + 1, d), d),
            b: uniform_init_1d(rng, vocab + 1, d),
        }
    }

    pub fn shared_rnn(rng: &mut impl Rng, vocab: usize, d: usize, h: usize) -> Self {
        WeightFunction::SharedRnn {
            w_in: uniform_init(rng, (h, vocab), vocab),
            w_hh: uniform_init(rng, (h, h), h),
            b_h: uniform_init_1d(rng, h, h),
            w_proj: uniform_init(rng, (d, h), h),
            b_proj: uniform_init_1d(rng, d, h),
            w: uniform_init(rng, (vocab + 1, d), d),
            b: uniform_init_1d(rng, vocab + 1, d),
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            WeightFunction::Unshared { b, .. } => b.ncols() - 1,
            WeightFunction::SharedEmb { b, .. } | WeightFunction::SharedRnn { b, .. } => {
                b.len() - 1
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            WeightFunction::Unshared { w, .. } => w.shape()[2],
            WeightFunction::SharedEmb { w, .. } | WeightFunction::SharedRnn { w, .. } => w.ncols(),
        }
    }

    /// Precompute whatever depends only on the parameters and the context
    /// automaton. For the RNN embedding this walks the history tree once,
    /// extending each state's parent by a single step.
    pub fn prepare(&self, ctx: &ContextDependency) -> Result<PreparedWeights> {
        let n = ctx.num_states();
        match self {
            WeightFunction::Unshared { w, b } => {
                if w.shape()[0] != n || b.nrows() != n {
                    return Err(Error::Dimension(format!(
                        "weight function built for {} states, context has {n}",
                        w.shape()[0]
                    )));
                }
                Ok(PreparedWeights {
                    embeddings: None,
                    hiddens: None,
                })
            }
            WeightFunction::SharedEmb { emb, .. } => {
                if emb.nrows() != n {
                    return Err(Error::Dimension(format!(
                        "embedding table has {} rows, context has {n}",
                        emb.nrows()
                    )));
                }
                Ok(PreparedWeights {
                    embeddings: None,
                    hiddens: None,
                })
            }
            WeightFunction::SharedRnn {
                w_in,
                w_hh,
                b_h,
                w_proj,
                b_proj,
                ..
            } => {
                if w_in.ncols() != ctx.vocab() {
                    return Err(Error::Dimension(format!(
                        "rnn input dim {} vs vocab {}",
                        w_in.ncols(),
                        ctx.vocab()
                    )));
                }
                let h = w_hh.nrows();
                let d = w_proj.nrows();
                let mut hiddens = Array2::zeros((n, h));
                let mut embeddings = Array2::zeros((n, d));
                // State 0 is the empty history: zero hidden state.
                embeddings.row_mut(0).assign(b_proj);
                for q in 1..n {
                    let (parent, last) = parent_of(ctx, q);
                    let mut a = w_in.column(last).to_owned() + b_h;
                    a += &w_hh.dot(&hiddens.row(parent));
                    let hq = a.mapv(f64::tanh);
                    embeddings.row_mut(q).assign(&(w_proj.dot(&hq) + b_proj));
                    hiddens.row_mut(q).assign(&hq);
                }
                Ok(PreparedWeights {
                    embeddings: Some(embeddings),
                    hiddens: Some(hiddens),
                })
            }
        }
    }

    /// Raw scores for the given context rows at one feature row: shape
    /// `(rows.len(), vocab + 1)`.
    pub fn raw_scores(
        &self,
        prepared: &PreparedWeights,
        h_row: &ArrayView1<f64>,
        rows: &[usize],
    ) -> Array2<f64> {
        let v = self.vocab();
        let mut out = Array2::zeros((rows.len(), v + 1));
        match self {
            WeightFunction::Unshared { w, b } => {
                for (i, &r) in rows.iter().enumerate() {
                    for y in 0..=v {
                        let wy = w.index_axis(Axis(0), r);
                        out[[i, y]] = wy.row(y).dot(h_row) + b[[r, y]];
                    }
                }
            }
            WeightFunction::SharedEmb { emb, w, b } => {
                for (i, &r) in rows.iter().enumerate() {
                    let u = (h_row + &emb.row(r)).mapv(f64::tanh);
                    out.row_mut(i).assign(&(w.dot(&u) + b));
                }
            }
            WeightFunction::SharedRnn { w, b, .. } => {
                let emb = prepared.embeddings.as_ref().expect("prepared rnn");
                for (i, &r) in rows.iter().enumerate() {
                    let u = (h_row + &emb.row(r)).mapv(f64::tanh);
                    out.row_mut(i).assign(&(w.dot(&u) + b));
                }
            }
        }
        out
    }

    /// Raw scores for every context state at one feature row.
    pub fn raw_scores_all(
        &self,
        prepared: &PreparedWeights,
        ctx: &ContextDependency,
        h_row: &ArrayView1<f64>,
    ) -> Array2<f64> {
        let rows: Vec<usize> = (0..ctx.num_states()).collect();
        self.raw_scores(prepared, h_row, &rows)
    }

    /// Accumulate parameter gradients and feature-row gradients from
    /// per-feature-row score gradients. `score_grads` maps a feature row
    /// index to the full `(num_states, vocab + 1)` matrix of dL/ds.
    pub fn backward(
        &self,
        prepared: &PreparedWeights,
        ctx: &ContextDependency,
        h: &EncoderOutput,
        score_grads: &std::collections::BTreeMap<usize, Array2<f64>>,
        grads: &mut WeightFunction,
        d_h: &mut Array2<f64>,
    ) {
        let v = self.vocab();
        let n = ctx.num_states();
        match (self, grads) {
            (WeightFunction::Unshared { w, .. }, WeightFunction::Unshared { w: g_w, b: g_b }) => {
                for (&t, ds) in score_grads {
                    let h_row = h.row(t);
                    for r in 0..n {
                        for y in 0..=v {
                            let g = ds[[r, y]];
                            if g == 0.0 {
                                continue;
                            }
                            g_b[[r, y]] += g;
                            for k in 0..h_row.len() {
                                g_w[[r, y, k]] += g * h_row[k];
                            }
                            let wy = w.index_axis(Axis(0), r);
                            let mut dh_row = d_h.row_mut(t);
                            for k in 0..h_row.len() {
                                dh_row[k] += g * wy[[y, k]];
                            }
                        }
                    }
                }
            }
            (
                WeightFunction::SharedEmb { emb, w, .. },
                WeightFunction::SharedEmb {
                    emb: g_emb,
                    w: g_w,
                    b: g_b,
                },
            ) => {
                for (&t, ds) in score_grads {
                    let h_row = h.row(t);
                    for r in 0..n {
                        let ds_row = ds.row(r);
                        if ds_row.iter().all(|&g| g == 0.0) {
                            continue;
                        }
                        let u = (&h_row + &emb.row(r)).mapv(f64::tanh);
                        // s = w.dot(u) + b
                        let mut du = Array1::<f64>::zeros(u.len());
                        for y in 0..=v {
                            let g = ds_row[y];
                            if g == 0.0 {
                                continue;
                            }
                            g_b[y] += g;
                            for k in 0..u.len() {
                                g_w[[y, k]] += g * u[k];
                                du[k] += g * w[[y, k]];
                            }
                        }
                        // through tanh into both the embedding and h
                        let mut g_emb_row = g_emb.row_mut(r);
                        let mut dh_row = d_h.row_mut(t);
                        for k in 0..u.len() {
                            let dpre = du[k] * (1.0 - u[k] * u[k]);
                            g_emb_row[k] += dpre;
                            dh_row[k] += dpre;
                        }
                    }
                }
            }
            (
                WeightFunction::SharedRnn {
                    w_hh, w_proj, w, ..
                },
                WeightFunction::SharedRnn {
                    w_in: g_in,
                    w_hh: g_hh,
                    b_h: g_bh,
                    w_proj: g_proj,
                    b_proj: g_bproj,
                    w: g_w,
                    b: g_b,
                },
            ) => {
                let emb = prepared.embeddings.as_ref().expect("prepared rnn");
                let hiddens = prepared.hiddens.as_ref().expect("prepared rnn");
                let d = emb.ncols();
                let mut d_emb = Array2::<f64>::zeros((n, d));
                for (&t, ds) in score_grads {
                    let h_row = h.row(t);
                    for r in 0..n {
                        let ds_row = ds.row(r);
                        if ds_row.iter().all(|&g| g == 0.0) {
                            continue;
                        }
                        let u = (&h_row + &emb.row(r)).mapv(f64::tanh);
                        let mut du = Array1::<f64>::zeros(d);
                        for y in 0..=v {
                            let g = ds_row[y];
                            if g == 0.0 {
                                continue;
                            }
                            g_b[y] += g;
                            for k in 0..d {
                                g_w[[y, k]] += g * u[k];
                                du[k] += g * w[[y, k]];
                            }
                        }
                        let mut d_emb_row = d_emb.row_mut(r);
                        let mut dh_row = d_h.row_mut(t);
                        for k in 0..d {
                            let dpre = du[k] * (1.0 - u[k] * u[k]);
                            d_emb_row[k] += dpre;
                            dh_row[k] += dpre;
                        }
                    }
                }
                // Embedding -> projection -> hidden tree, children before
                // parents (children always have larger indices).
                let hdim = hiddens.ncols();
                let mut d_hidden = Array2::<f64>::zeros((n, hdim));
                for r in 0..n {
                    let de = d_emb.row(r);
                    *g_bproj += &de;
                    for i in 0..d {
                        for j in 0..hdim {
                            g_proj[[i, j]] += de[i] * hiddens[[r, j]];
                        }
                    }
                    let back = w_proj.t().dot(&de);
                    let mut row = d_hidden.row_mut(r);
                    row += &back;
                }
                for q in (1..n).rev() {
                    let (parent, last) = parent_of(ctx, q);
                    let hq = hiddens.row(q);
                    let dq = d_hidden.row(q).to_owned();
                    let da = Array1::from_shape_fn(hdim, |i| dq[i] * (1.0 - hq[i] * hq[i]));
                    for i in 0..hdim {
                        g_in[[i, last]] += da[i];
                        g_bh[i] += da[i];
                        for j in 0..hdim {
                            g_hh[[i, j]] += da[i] * hiddens[[parent, j]];
                        }
                    }
                    let back = w_hh.t().dot(&da);
                    let mut prow = d_hidden.row_mut(parent);
                    prow += &back;
                }
            }
            _ => unreachable!("gradient container matches the weight function variant"),
        }
    }

    pub fn zeros_like(&self) -> WeightFunction {
        match self {
            WeightFunction::Unshared { w, b } => WeightFunction::Unshared {
                w: Array3::zeros(w.raw_dim()),
                b: Array2::zeros(b.raw_dim()),
            },
            WeightFunction::SharedEmb { emb, w, b } => WeightFunction::SharedEmb {
                emb: Array2::zeros(emb.raw_dim()),
                w: Array2::zeros(w.raw_dim()),
                b: Array1::zeros(b.raw_dim()),
            },
            WeightFunction::SharedRnn {
                w_in,
                w_hh,
                b_h,
                w_proj,
                b_proj,
                w,
                b,
            } => WeightFunction::SharedRnn {
                w_in: Array2::zeros(w_in.raw_dim()),
                w_hh: Array2::zeros(w_hh.raw_dim()),
                b_h: Array1::zeros(b_h.raw_dim()),
                w_proj: Array2::zeros(w_proj.raw_dim()),
                b_proj: Array1::zeros(b_proj.raw_dim()),
                w: Array2::zeros(w.raw_dim()),
                b: Array1::zeros(b.raw_dim()),
            },
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        match self {
            WeightFunction::Unshared { w, b } => vec![
                ("weights.w", w.shape().to_vec(), w.iter().copied().collect()),
                ("weights.b", b.shape().to_vec(), b.iter().copied().collect()),
            ],
            WeightFunction::SharedEmb { emb, w, b } => vec![
                (
                    "weights.emb",
                    emb.shape().to_vec(),
                    emb.iter().copied().collect(),
                ),
                ("weights.w", w.shape().to_vec(), w.iter().copied().collect()),
                ("weights.b", b.shape().to_vec(), b.iter().copied().collect()),
            ],
            WeightFunction::SharedRnn {
                w_in,
                w_hh,
                b_h,
                w_proj,
                b_proj,
                w,
                b,
            } => vec![
                (
                    "weights.rnn_in",
                    w_in.shape().to_vec(),
                    w_in.iter().copied().collect(),
                ),
                (
                    "weights.rnn_hh",
                    w_hh.shape().to_vec(),
                    w_hh.iter().copied().collect(),
                ),
                (
                    "weights.rnn_bias",
                    b_h.shape().to_vec(),
                    b_h.iter().copied().collect(),
                ),
                (
                    "weights.proj",
                    w_proj.shape().to_vec(),
                    w_proj.iter().copied().collect(),
                ),
                (
                    "weights.proj_bias",
                    b_proj.shape().to_vec(),
                    b_proj.iter().copied().collect(),
                ),
                ("weights.w", w.shape().to_vec(), w.iter().copied().collect()),
                ("weights.b", b.shape().to_vec(), b.iter().copied().collect()),
            ],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, d)| d).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let mut at = 0;
        let mut take = |a: &mut [f64]| {
            a.copy_from_slice(&flat[at..at + a.len()]);
            at += a.len();
        };
        match self {
            WeightFunction::Unshared { w, b } => {
                take(w.as_slice_mut().unwrap());
                take(b.as_slice_mut().unwrap());
            }
            WeightFunction::SharedEmb { emb, w, b } => {
                take(emb.as_slice_mut().unwrap());
                take(w.as_slice_mut().unwrap());
                take(b.as_slice_mut().unwrap());
            }
            WeightFunction::SharedRnn {
                w_in,
                w_hh,
                b_h,
                w_proj,
                b_proj,
                w,
                b,
            } => {
                take(w_in.as_slice_mut().unwrap());
                take(w_hh.as_slice_mut().unwrap());
                take(b_h.as_slice_mut().unwrap());
                take(w_proj.as_slice_mut().unwrap());
                take(b_proj.as_slice_mut().unwrap());
                take(w.as_slice_mut().unwrap());
                take(b.as_slice_mut().unwrap());
            }
        }
        if at != flat.len() {
            return Err(Error::Dimension(format!(
                "flat parameter length {} vs expected {}",
                flat.len(),
                at
            )));
        }
        Ok(())
    }
}

/// Parent state and last history label of a non-initial context state.
fn parent_of(ctx: &ContextDependency, state: usize) -> (usize, usize) {
    let h = ctx.history_of(state);
    let last = *h.last().expect("non-initial state");
    let parent = ctx.state_index(&h[..h.len() - 1]).expect("valid prefix");
    (parent, last)
}

/// Parameter-derived caches for one weight function instance. Invalidated
/// whenever parameters change.
#[derive(Debug, Clone, Default)]
pub struct PreparedWeights {
    embeddings: Option<Array2<f64>>,
    hiddens: Option<Array2<f64>>,
}

impl PreparedWeights {
    pub fn embeddings(&self) -> Option<&Array2<f64>> {
        self.embeddings.as_ref()
    }
}

// ---------------------------------------------------------------------------
// Per-sequence score tables
// ---------------------------------------------------------------------------

/// Which arcs exist at an alignment state. Every context state has all
/// labels available, so the mask only distinguishes the label block from
/// epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MaskKind {
    Full,
    LabelsOnly,
    EpsilonOnly,
}

impl MaskKind {
    pub fn new(has_labels: bool, has_epsilon: bool) -> Option<MaskKind> {
        match (has_labels, has_epsilon) {
            (true, true) => Some(MaskKind::Full),
            (true, false) => Some(MaskKind::LabelsOnly),
            (false, true) => Some(MaskKind::EpsilonOnly),
            (false, false) => None,
        }
    }

    pub fn to_bools(self, vocab: usize) -> Vec<bool> {
        let mut mask = vec![false; vocab + 1];
        match self {
            MaskKind::Full => mask.fill(true),
            MaskKind::LabelsOnly => mask[..vocab].fill(true),
            MaskKind::EpsilonOnly => mask[vocab] = true,
        }
        mask
    }
}

type MatrixCache<K> = std::cell::RefCell<std::collections::HashMap<K, std::rc::Rc<Array2<f64>>>>;

/// Lazy cache of raw and normalized transition-weight matrices for one
/// sequence. Keyed by feature row so alignment states sharing a frame share
/// the computation. Single-threaded by construction; every batch item owns
/// its table.
pub struct OmegaTable<'a> {
    wf: &'a WeightFunction,
    prepared: &'a PreparedWeights,
    ctx: &'a ContextDependency,
    h: &'a EncoderOutput,
    norm: Normalization,
    raw: MatrixCache<usize>,
    normalized: MatrixCache<(usize, MaskKind)>,
}

impl<'a> OmegaTable<'a> {
    pub fn new(
        wf: &'a WeightFunction,
        prepared: &'a PreparedWeights,
        ctx: &'a ContextDependency,
        h: &'a EncoderOutput,
        norm: Normalization,
    ) -> Self {
        OmegaTable {
            wf,
            prepared,
            ctx,
            h,
            norm,
            raw: Default::default(),
            normalized: Default::default(),
        }
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    pub fn context(&self) -> &ContextDependency {
        self.ctx
    }

    pub fn vocab(&self) -> usize {
        self.ctx.vocab()
    }

    pub fn frames(&self) -> usize {
        self.h.nrows()
    }

    /// Map an alignment state's feature index to a row of `h`. Label
    /// lattices read a whole-sequence summary: the final activation row.
    pub fn feature_row(&self, fi: crate::alignment::FeatureIndex) -> Result<usize> {
        match fi {
            crate::alignment::FeatureIndex::Frame(t) => {
                if t >= self.h.nrows() {
                    return Err(Error::Dimension(format!(
                        "frame {t} out of range for {} activation rows",
                        self.h.nrows()
                    )));
                }
                Ok(t)
            }
            crate::alignment::FeatureIndex::Pooled => {
                if self.h.nrows() == 0 {
                    return Err(Error::Dimension(
                        "label lattice with arcs needs at least one frame".into(),
                    ));
                }
                Ok(self.h.nrows() - 1)
            }
        }
    }

    /// Raw scores for every context state at the given feature row.
    pub fn raw(&self, row: usize) -> Result<std::rc::Rc<Array2<f64>>> {
        if let Some(m) = self.raw.borrow().get(&row) {
            return Ok(m.clone());
        }
        let m = self
            .wf
            .raw_scores_all(self.prepared, self.ctx, &self.h.row(row));
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("scores at feature row {row}")));
        }
        let rc = std::rc::Rc::new(m);
        self.raw.borrow_mut().insert(row, rc.clone());
        Ok(rc)
    }

    /// Normalized log-domain weights for every context state at the given
    /// feature row and arc mask.
    pub fn normalized(&self, row: usize, mask: MaskKind) -> Result<std::rc::Rc<Array2<Weight>>> {
        if let Some(m) = self.normalized.borrow().get(&(row, mask)) {
            return Ok(m.clone());
        }
        let raw = self.raw(row)?;
        let bools = mask.to_bools(self.vocab());
        let m = normalize_rows(self.norm, &raw.view(), &bools)?;
        let rc = std::rc::Rc::new(m);
        self.normalized.borrow_mut().insert((row, mask), rc.clone());
        Ok(rc)
    }
}

// ---------------------------------------------------------------------------
// Model = encoder + weight function
// ---------------------------------------------------------------------------

/// Full trainable model.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Encoder,
    pub wf: WeightFunction,
}

impl Model {
    pub fn zeros_like(&self) -> Model {
        Model {
            encoder: self.encoder.zeros_like(),
            wf: self.wf.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        let mut out = self.encoder.tensors();
        out.extend(self.wf.tensors());
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.encoder.flatten();
        out.extend(self.wf.flatten());
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let enc_len = self.encoder.flatten().len();
        if flat.len() < enc_len {
            return Err(Error::Dimension("flat parameter vector too short".into()));
        }
        self.encoder.load_flat(&flat[..enc_len])?;
        self.wf.load_flat(&flat[enc_len..])
    }
}
