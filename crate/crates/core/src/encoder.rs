//! Skeleton encoder, global average pooling and the classifier head.
//!
//! This is the complete inference path: `encode → GAP → FC → argmax`.

use std::fmt::Debug;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SkeletonSequence;
use crate::param::Param;
use crate::tensor::{Real, Result, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Joint mixing over a fixed chain adjacency interleaved with temporal
    /// convolutions.
    #[default]
    TemporalGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Output channels `C`.
    pub channels: usize,
    /// Width of the first joint-mixing layer.
    pub hidden: usize,
    /// Temporal convolution kernel (odd).
    pub kernel: usize,
    /// Frame stride of the first temporal convolution; `T = ceil(T0 / stride)`.
    pub temporal_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { kind: EncoderKind::TemporalGraph, channels: 64, hidden: 32, kernel: 3, temporal_stride: 2 }
    }
}

impl EncoderConfig {
    pub fn out_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.temporal_stride.max(1))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.channels == 0 || self.hidden == 0 {
            return Err("encoder channels and hidden width must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(format!("encoder kernel {} must be odd", self.kernel));
        }
        if self.temporal_stride == 0 {
            return Err("encoder temporal_stride must be >= 1".into());
        }
        Ok(())
    }
}

/// A learned map from a `[J, T0, 3]` sequence to a `[J, T, C]` feature map.
pub trait SkeletonEncoder: Debug + Send + Sync {
    fn kind(&self) -> EncoderKind;
    /// `(J, T0)` the encoder was built for.
    fn input_dims(&self) -> (usize, usize);
    /// `[J, T, C]`.
    fn output_shape(&self) -> [usize; 3];
    fn params(&self) -> &[Param];
    fn params_mut(&mut self) -> &mut [Param];
    /// `params` are this encoder's parameters bound on `tape`, in order.
    fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var>;
    fn clone_box(&self) -> Box<dyn SkeletonEncoder>;
}

impl Clone for Box<dyn SkeletonEncoder> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

pub fn build_encoder(cfg: &EncoderConfig, joints: usize, frames: usize, seed: u64) -> Box<dyn SkeletonEncoder> {
    match cfg.kind {
        EncoderKind::TemporalGraph => Box::new(TemporalGraphEncoder::new(cfg, joints, frames, seed)),
    }
}

/// Symmetrically normalised chain adjacency with self loops.
pub fn chain_mixing(joints: usize) -> Vec<Real> {
    let mut a = vec![0.0; joints * joints];
    for j in 0..joints {
        a[j * joints + j] = 1.0;
        if j + 1 < joints {
            a[j * joints + j + 1] = 1.0;
            a[(j + 1) * joints + j] = 1.0;
        }
    }
    let deg: Vec<Real> = (0..joints).map(|i| a[i * joints..(i + 1) * joints].iter().sum()).collect();
    for i in 0..joints {
        for j in 0..joints {
            a[i * joints + j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    a
}

/// Two blocks of (joint mixing → channel map → ReLU) followed by
/// (temporal convolution → ReLU).
#[derive(Debug, Clone)]
pub struct TemporalGraphEncoder {
    cfg: EncoderConfig,
    joints: usize,
    frames: usize,
    mixing: Vec<Real>,
    params: Vec<Param>,
}

impl TemporalGraphEncoder {
    pub fn new(cfg: &EncoderConfig, joints: usize, frames: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let (h, c, k) = (cfg.hidden, cfg.channels, cfg.kernel);
        let params = vec![
            Param::uniform("encoder.gcn1.weight", vec![3, h], 3, &mut rng),
            Param::zeros("encoder.gcn1.bias", vec![h]),
            Param::uniform("encoder.tcn1.weight", vec![k * h, c], k * h, &mut rng),
            Param::zeros("encoder.tcn1.bias", vec![c]),
            Param::uniform("encoder.gcn2.weight", vec![c, c], c, &mut rng),
            Param::zeros("encoder.gcn2.bias", vec![c]),
            Param::uniform("encoder.tcn2.weight", vec![k * c, c], k * c, &mut rng),
            Param::zeros("encoder.tcn2.bias", vec![c]),
        ];
        Self { cfg: cfg.clone(), joints, frames, mixing: chain_mixing(joints), params }
    }

    fn joint_block(&self, tape: &mut Tape, x: Var, frames: usize, w: Var, b: Var) -> Result<Var> {
        let ch = tape.shape(x)[2];
        let j = self.joints;
        let a = tape.constant(vec![j, j], self.mixing.clone())?;
        let flat = tape.reshape(x, vec![j, frames * ch])?;
        let mixed = tape.matmul(a, flat)?;
        let rows = tape.reshape(mixed, vec![j * frames, ch])?;
        let y = tape.matmul(rows, w)?;
        let y = tape.add_bias(y, b)?;
        let y = tape.relu(y)?;
        let out_ch = tape.shape(y)[1];
        tape.reshape(y, vec![j, frames, out_ch])
    }

    fn temporal_block(&self, tape: &mut Tape, x: Var, stride: usize, w: Var, b: Var) -> Result<Var> {
        let frames = tape.shape(x)[1];
        let cols = tape.unfold_time(x, self.cfg.kernel, stride)?;
        let y = tape.matmul(cols, w)?;
        let y = tape.add_bias(y, b)?;
        let y = tape.relu(y)?;
        let out_ch = tape.shape(y)[1];
        tape.reshape(y, vec![self.joints, frames.div_ceil(stride), out_ch])
    }
}

impl SkeletonEncoder for TemporalGraphEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::TemporalGraph
    }

    fn input_dims(&self) -> (usize, usize) {
        (self.joints, self.frames)
    }

    fn output_shape(&self) -> [usize; 3] {
        [self.joints, self.cfg.out_frames(self.frames), self.cfg.channels]
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape, p: &[Var], input: Var) -> Result<Var> {
        if p.len() != self.params.len() {
            return Err(TensorError::Dimension {
                op: "encode",
                detail: format!("expected {} parameters, got {}", self.params.len(), p.len()),
            });
        }
        let expected = [self.joints, self.frames, 3];
        if tape.shape(input) != expected {
            return Err(TensorError::Dimension {
                op: "encode",
                detail: format!("input {:?} does not match encoder input {:?}", tape.shape(input), expected),
            });
        }
        let x = self.joint_block(tape, input, self.frames, p[0], p[1])?;
        let x = self.temporal_block(tape, x, self.cfg.temporal_stride, p[2], p[3])?;
        let t = tape.shape(x)[1];
        let x = self.joint_block(tape, x, t, p[4], p[5])?;
        self.temporal_block(tape, x, 1, p[6], p[7])
    }

    fn clone_box(&self) -> Box<dyn SkeletonEncoder> {
        Box::new(self.clone())
    }
}

/// Place a sequence on the tape as a constant `[J, T0, 3]` tensor.
pub fn sequence_input(tape: &mut Tape, seq: &SkeletonSequence) -> Result<Var> {
    let data = seq.coords.iter().map(|&v| v as Real).collect();
    tape.constant(vec![seq.joints, seq.frames, 3], data)
}

/// Linear classifier on the globally pooled feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    params: Vec<Param>,
}

impl ClassifierHead {
    pub fn new(channels: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            params: vec![
                Param::uniform("head.weight", vec![channels, classes], channels, &mut rng),
                Param::zeros("head.bias", vec![classes]),
            ],
        }
    }

    pub fn from_params(weight: Param, bias: Param) -> Self {
        Self { params: vec![weight, bias] }
    }

    pub fn channels(&self) -> usize {
        self.params[0].value.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.params[1].value.len()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}

/// Mean over the joint and frame axes: `[J, T, C] → [C]`.
pub fn global_average_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    if tape.shape(x).len() != 3 {
        return Err(TensorError::Dimension {
            op: "gap",
            detail: format!("expected [J, T, C], got {:?}", tape.shape(x)),
        });
    }
    tape.mean_over_axes(x, &[0, 1])
}

/// `logits = GAP(x)ᵀ W + b`. `head` holds the bound `[weight, bias]`.
pub fn classify(tape: &mut Tape, x: Var, head: &[Var]) -> Result<Var> {
    let g = global_average_pool(tape, x)?;
    let c = tape.shape(g)[0];
    if tape.shape(head[0]).first() != Some(&c) {
        return Err(TensorError::Dimension {
            op: "classify",
            detail: format!("feature has {c} channels, head expects {:?}", tape.shape(head[0])),
        });
    }
    let row = tape.reshape(g, vec![1, c])?;
    let z = tape.matmul(row, head[0])?;
    let z = tape.add_bias(z, head[1])?;
    let k = tape.shape(z)[1];
    tape.reshape(z, vec![k])
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::bind;

    fn small() -> (EncoderConfig, TemporalGraphEncoder) {
        let cfg = EncoderConfig { channels: 6, hidden: 4, kernel: 3, temporal_stride: 2, ..Default::default() };
        let enc = TemporalGraphEncoder::new(&cfg, 4, 7, 1);
        (cfg, enc)
    }

    fn seq(coords: Vec<f32>) -> SkeletonSequence {
        SkeletonSequence::new(0, 0, 4, 7, coords).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let (_, enc) = small();
        let mut tape = Tape::new();
        let p = bind(&mut tape, enc.params(), false).unwrap();
        let x = sequence_input(&mut tape, &seq(vec![0.0; 84])).unwrap();
        let y = enc.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 6]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_sequences_identical_features() {
        let (_, enc) = small();
        let coords: Vec<f32> = (0..84).map(|i| (i as f32 * 0.31).sin()).collect();
        let run = || {
            let mut tape = Tape::new();
            let p = bind(&mut tape, enc.params(), false).unwrap();
            let x = sequence_input(&mut tape, &seq(coords.clone())).unwrap();
            let y = enc.forward(&mut tape, &p, x).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_rejects_wrong_input_shape() {
        let (_, enc) = small();
        let mut tape = Tape::new();
        let p = bind(&mut tape, enc.params(), false).unwrap();
        let x = tape.constant(vec![3, 7, 3], vec![0.0; 63]).unwrap();
        assert!(matches!(enc.forward(&mut tape, &p, x), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn mixing_is_symmetric_with_unit_spectral_radius_bound() {
        let a = chain_mixing(5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(a[i * 5 + j], a[j * 5 + i]);
            }
        }
        // D^-1/2 (I+A) D^-1/2 maps sqrt(deg) to itself
        let deg = [2.0, 3.0, 3.0, 3.0, 2.0f64];
        for i in 0..5 {
            let v: Real = (0..5).map(|j| a[i * 5 + j] * (deg[j] as Real).sqrt()).sum();
            assert!((v - (deg[i] as Real).sqrt()).abs() < 1e-12);
        }
    }

    fn head_with(tape: &mut Tape, c: usize, k: usize, w: Vec<Real>, b: Vec<Real>) -> Vec<Var> {
        vec![tape.constant(vec![c, k], w).unwrap(), tape.constant(vec![k], b).unwrap()]
    }

    #[test]
    fn classify_constant_feature_identity_head() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3, 4], vec![1.5; 24]).unwrap();
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 4 + i] = 1.0);
        let head = head_with(&mut tape, 4, 4, eye, vec![0.0; 4]);
        let z = classify(&mut tape, x, &head).unwrap();
        assert_eq!(tape.value(z), &[1.5; 4]);
    }

    #[test]
    fn classify_zero_weight_returns_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3, 4], (0..24).map(|v| v as Real).collect()).unwrap();
        let head = head_with(&mut tape, 4, 3, vec![0.0; 12], vec![0.5, -1.0, 2.0]);
        let z = classify(&mut tape, x, &head).unwrap();
        assert_eq!(tape.value(z), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[0.1, 2.0, -1.0]), 1);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
