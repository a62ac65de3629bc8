//! Spatial-temporal feature decoupling head.
//!
//! Two parallel linear branches over a `[J, T, C]` feature map:
//!
//! * spatial: mean over frames → `[J, C]` → `· W_θ` → `[J, C/r]` → flatten
//!   joint-major → `· W_ζ` → `s ∈ R^D`
//! * temporal: mean over joints → `[T, C]` → `· W_φ` → `[T, C/r]` → flatten
//!   frame-major → `· W_σ` → `t ∈ R^D`
//!
//! No nonlinearity or normalisation is applied; the head is linear in its
//! input. Normalisation happens at the memory-bank boundary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradcheck::{check_gradients, GradCheckReport, OP_TOLERANCE};
use crate::param::Param;
use crate::probe;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StfdConfig {
    /// Channel reduction rate `r`.
    pub reduction: usize,
    /// Embedding dimension `D`.
    pub embedding_dim: usize,
}

impl Default for StfdConfig {
    fn default() -> Self {
        Self { reduction: 8, embedding_dim: 256 }
    }
}

impl StfdConfig {
    pub fn validate(&self, channels: usize) -> std::result::Result<(), String> {
        if self.reduction == 0 || self.embedding_dim == 0 {
            return Err("stfd reduction and embedding_dim must be positive".into());
        }
        if channels < self.reduction || channels % self.reduction != 0 {
            return Err(format!(
                "encoder channels {} must be a positive multiple of the reduction rate {}",
                channels, self.reduction
            ));
        }
        Ok(())
    }
}

/// Weights of both branches. Parameter order is
/// `[w_theta, w_phi, w_zeta, w_sigma]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StfdParams {
    joints: usize,
    frames: usize,
    channels: usize,
    cfg: StfdConfig,
    params: Vec<Param>,
}

impl StfdParams {
    /// `frames` is the encoder's output frame count `T`.
    pub fn new(joints: usize, frames: usize, channels: usize, cfg: &StfdConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let red = channels / cfg.reduction.max(1);
        let d = cfg.embedding_dim;
        let params = vec![
            Param::uniform("stfd.w_theta", vec![channels, red], channels, &mut rng),
            Param::uniform("stfd.w_phi", vec![channels, red], channels, &mut rng),
            Param::uniform("stfd.w_zeta", vec![joints * red, d], joints * red, &mut rng),
            Param::uniform("stfd.w_sigma", vec![frames * red, d], frames * red, &mut rng),
        ];
        Self { joints, frames, channels, cfg: cfg.clone(), params }
    }

    /// Build from explicit weights; shapes are checked against each other.
    pub fn from_weights(
        w_theta: Tensor,
        w_phi: Tensor,
        w_zeta: Tensor,
        w_sigma: Tensor,
    ) -> Result<Self> {
        let bad = |detail: String| TensorError::Dimension { op: "stfd", detail };
        let (c, red) = match w_theta.shape() {
            [c, red] => (*c, *red),
            s => return Err(bad(format!("w_theta must be 2-D, got {s:?}"))),
        };
        if w_phi.shape() != [c, red] {
            return Err(bad(format!("w_phi {:?} must match w_theta {:?}", w_phi.shape(), w_theta.shape())));
        }
        let (zr, d) = match w_zeta.shape() {
            [a, b] => (*a, *b),
            s => return Err(bad(format!("w_zeta must be 2-D, got {s:?}"))),
        };
        let (sr, d2) = match w_sigma.shape() {
            [a, b] => (*a, *b),
            s => return Err(bad(format!("w_sigma must be 2-D, got {s:?}"))),
        };
        if red == 0 || c % red != 0 || zr % red != 0 || sr % red != 0 || d != d2 || d == 0 {
            return Err(bad(format!(
                "inconsistent shapes theta {:?} zeta {:?} sigma {:?}",
                w_theta.shape(),
                w_zeta.shape(),
                w_sigma.shape()
            )));
        }
        let cfg = StfdConfig { reduction: c / red, embedding_dim: d };
        let mk = |name: &str, mut t: Tensor| {
            t.set_requires_grad(true);
            Param::new(name, t)
        };
        Ok(Self {
            joints: zr / red,
            frames: sr / red,
            channels: c,
            cfg,
            params: vec![
                mk("stfd.w_theta", w_theta),
                mk("stfd.w_phi", w_phi),
                mk("stfd.w_zeta", w_zeta),
                mk("stfd.w_sigma", w_sigma),
            ],
        })
    }

    pub fn config(&self) -> &StfdConfig {
        &self.cfg
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim
    }

    pub fn reduced_channels(&self) -> usize {
        self.channels / self.cfg.reduction
    }

    /// `[J, T, C]` this head accepts.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.joints, self.frames, self.channels]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}

/// Spatial and temporal embeddings of one instance, tagged for bank addressing.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledPair {
    pub s: Tensor,
    pub t: Tensor,
    pub label: usize,
    pub dataset_index: usize,
}

/// Intermediate values of one decoupling pass, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct DecoupledVars {
    pub spatial_pooled: Var,
    pub spatial_reduced: Var,
    pub temporal_pooled: Var,
    pub temporal_reduced: Var,
    pub s: Var,
    pub t: Var,
}

/// Record the decoupling head on `tape`. `weights` are the four bound
/// parameters in `StfdParams` order.
pub fn decouple_on_tape(tape: &mut Tape, x: Var, head: &StfdParams, weights: &[Var]) -> Result<DecoupledVars> {
    probe::stfd_eval();
    let expected = head.input_shape();
    if tape.shape(x) != expected {
        return Err(TensorError::Dimension {
            op: "decouple",
            detail: format!("feature map {:?} does not match head input {:?}", tape.shape(x), expected),
        });
    }
    let [joints, frames, _] = expected;
    let red = head.reduced_channels();
    let d = head.embedding_dim();

    let spatial_pooled = tape.mean_over_axes(x, &[1])?;
    let spatial_reduced = tape.matmul(spatial_pooled, weights[0])?;
    let flat = tape.reshape(spatial_reduced, vec![1, joints * red])?;
    let s = tape.matmul(flat, weights[2])?;
    let s = tape.reshape(s, vec![d])?;

    let temporal_pooled = tape.mean_over_axes(x, &[0])?;
    let temporal_reduced = tape.matmul(temporal_pooled, weights[1])?;
    let flat = tape.reshape(temporal_reduced, vec![1, frames * red])?;
    let t = tape.matmul(flat, weights[3])?;
    let t = tape.reshape(t, vec![d])?;

    Ok(DecoupledVars { spatial_pooled, spatial_reduced, temporal_pooled, temporal_reduced, s, t })
}

/// Value-level decoupling of a `[J, T, C]` feature map.
pub fn decouple(x: &Tensor, head: &StfdParams, label: usize, dataset_index: usize) -> Result<DecoupledPair> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x)?;
    let weights = crate::param::bind(&mut tape, head.params(), false)?;
    let out = decouple_on_tape(&mut tape, xv, head, &weights)?;
    Ok(DecoupledPair {
        s: Tensor::vector(tape.value(out.s).to_vec()),
        t: Tensor::vector(tape.value(out.t).to_vec()),
        label,
        dataset_index,
    })
}

/// Gradient check of `‖s‖² + ‖t‖²` with respect to the input feature map
/// and all four weight blocks. Failing blocks are named in the report.
pub fn stfd_gradcheck(head: &StfdParams, x: &Tensor) -> Result<GradCheckReport> {
    let mut inputs = vec![("x".to_string(), x.clone())];
    for p in head.params() {
        let short = p.name.trim_start_matches("stfd.").to_string();
        inputs.push((short, p.value.clone()));
    }
    let shape_holder = head.clone();
    check_gradients(
        "stfd",
        &inputs,
        move |tape, v| {
            let out = decouple_on_tape(tape, v[0], &shape_holder, &v[1..])?;
            let ss = tape.mul(out.s, out.s)?;
            let tt = tape.mul(out.t, out.t)?;
            let ss = tape.sum(ss)?;
            let tt = tape.sum(tt)?;
            tape.add(ss, tt)
        },
        OP_TOLERANCE,
        None,
    )
}

pub(crate) fn random_feature_map(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Tensor {
    crate::gradcheck::uniform(rng, shape.to_vec(), -1.0, 1.0)
}
