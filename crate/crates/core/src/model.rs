use serde::{Deserialize, Serialize};

use crate::data::SkeletonSequence;
use crate::encoder::{argmax, build_encoder, classify, sequence_input, ClassifierHead, EncoderConfig, SkeletonEncoder};
use crate::error::{Error, Result};
use crate::param::{bind, Param};
use crate::stfd::{decouple_on_tape, DecoupledPair, StfdConfig, StfdParams};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub joints: usize,
    /// Input frame count `T0`.
    pub frames: usize,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    /// Present when the decoupling head is trained alongside the classifier.
    pub stfd: Option<StfdConfig>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.joints < 2 || self.frames < 2 {
            return Err(Error::Config("model joints and frames must both be >= 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        self.encoder.validate().map_err(Error::Config)?;
        if let Some(stfd) = &self.stfd {
            stfd.validate(self.encoder.channels).map_err(Error::Config)?;
        }
        Ok(())
    }

    /// Encoder output frame count `T`.
    pub fn feature_frames(&self) -> usize {
        self.encoder.out_frames(self.frames)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    encoder: Box<dyn SkeletonEncoder>,
    head: ClassifierHead,
    stfd: Option<StfdParams>,
}

/// A model's parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: Vec<Var>,
    pub head: Vec<Var>,
    pub stfd: Option<Vec<Var>>,
}

impl BoundModel {
    /// All bound parameters in [`Model::params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.encoder.clone();
        v.extend(&self.head);
        if let Some(s) = &self.stfd {
            v.extend(s);
        }
        v
    }
}

impl Model {
    /// Freshly initialised parameters drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let encoder = build_encoder(&spec.encoder, spec.joints, spec.frames, seed);
        let [j, t, c] = encoder.output_shape();
        let head = ClassifierHead::new(c, spec.num_classes, seed);
        let stfd = spec.stfd.as_ref().map(|cfg| StfdParams::new(j, t, c, cfg, seed));
        Ok(Self { spec, encoder, head, stfd })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &dyn SkeletonEncoder {
        self.encoder.as_ref()
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn stfd(&self) -> Option<&StfdParams> {
        self.stfd.as_ref()
    }

    /// The same classifier with the decoupling head dropped.
    pub fn without_framework(&self) -> Model {
        let mut spec = self.spec.clone();
        spec.stfd = None;
        Model { spec, encoder: self.encoder.clone(), head: self.head.clone(), stfd: None }
    }

    /// Encoder, head, then decoupling-head parameters.
    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.encoder.params().iter().collect();
        v.extend(self.head.params());
        if let Some(s) = &self.stfd {
            v.extend(s.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.encoder.params_mut().iter_mut().collect();
        v.extend(self.head.params_mut());
        if let Some(s) = &mut self.stfd {
            v.extend(s.params_mut());
        }
        v
    }

    /// Classifier parameters only (encoder and head), the test-time model.
    pub fn classifier_params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.encoder.params().iter().collect();
        v.extend(self.head.params());
        v
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel> {
        Ok(BoundModel {
            encoder: bind(tape, self.encoder.params(), trainable)?,
            head: bind(tape, self.head.params(), trainable)?,
            stfd: match &self.stfd {
                Some(s) => Some(bind(tape, s.params(), trainable)?),
                None => None,
            },
        })
    }

    fn check_input(&self, seq: &SkeletonSequence) -> Result<()> {
        if seq.joints != self.spec.joints || seq.frames != self.spec.frames {
            return Err(Error::Shape(format!(
                "sequence {} is {}×{} but the model expects {}×{}",
                seq.index, seq.joints, seq.frames, self.spec.joints, self.spec.frames
            )));
        }
        Ok(())
    }

    /// Encoder output `[J, T, C]` for one sequence.
    pub fn feature_map(&self, seq: &SkeletonSequence) -> Result<Tensor> {
        self.check_input(seq)?;
        let mut tape = Tape::new();
        let p = bind(&mut tape, self.encoder.params(), false)?;
        let x = sequence_input(&mut tape, seq)?;
        let y = self.encoder.forward(&mut tape, &p, x)?;
        Ok(Tensor::new(tape.shape(y).to_vec(), tape.value(y).to_vec())?)
    }

    /// Inference logits: encoder, global pooling and classifier only.
    pub fn logits(&self, seq: &SkeletonSequence) -> Result<Vec<Real>> {
        self.check_input(seq)?;
        let mut tape = Tape::new();
        let enc = bind(&mut tape, self.encoder.params(), false)?;
        let head = bind(&mut tape, self.head.params(), false)?;
        let x = sequence_input(&mut tape, seq)?;
        let features = self.encoder.forward(&mut tape, &enc, x)?;
        let z = classify(&mut tape, features, &head)?;
        Ok(tape.value(z).to_vec())
    }

    /// Predicted class; ties go to the lowest index.
    pub fn predict(&self, seq: &SkeletonSequence) -> Result<usize> {
        Ok(argmax(&self.logits(seq)?))
    }

    /// Spatial and temporal embeddings of one sequence. Analysis only; needs
    /// the decoupling head.
    pub fn decoupled(&self, seq: &SkeletonSequence) -> Result<DecoupledPair> {
        let head = self
            .stfd
            .as_ref()
            .ok_or_else(|| Error::Config("model has no decoupling head".into()))?;
        self.check_input(seq)?;
        let mut tape = Tape::new();
        let enc = bind(&mut tape, self.encoder.params(), false)?;
        let w = bind(&mut tape, head.params(), false)?;
        let x = sequence_input(&mut tape, seq)?;
        let features = self.encoder.forward(&mut tape, &enc, x)?;
        let out = decouple_on_tape(&mut tape, features, head, &w)?;
        Ok(DecoupledPair {
            s: Tensor::vector(tape.value(out.s).to_vec()),
            t: Tensor::vector(tape.value(out.t).to_vec()),
            label: seq.label,
            dataset_index: seq.index,
        })
    }

    /// Overwrite parameter values by name. Every parameter must be supplied
    /// with its exact shape.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        for p in self.params_mut() {
            let (_, t) = values
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe;

    pub(crate) fn tiny_spec(stfd: bool) -> ModelSpec {
        ModelSpec {
            joints: 4,
            frames: 6,
            num_classes: 3,
            encoder: EncoderConfig { channels: 8, hidden: 4, kernel: 3, temporal_stride: 2, ..Default::default() },
            stfd: stfd.then_some(StfdConfig { reduction: 2, embedding_dim: 5 }),
        }
    }

    fn seq() -> SkeletonSequence {
        SkeletonSequence::new(0, 1, 4, 6, (0..72).map(|i| (i as f32 * 0.17).cos()).collect()).unwrap()
    }

    #[test]
    fn inference_never_touches_stfd_or_banks() {
        let m = Model::new(tiny_spec(true), 3).unwrap();
        let before = probe::snapshot();
        let _ = m.predict(&seq()).unwrap();
        assert!(probe::snapshot().since(before).is_zero());
        let _ = m.decoupled(&seq()).unwrap();
        assert_eq!(probe::snapshot().since(before).stfd_evals, 1);
    }

    #[test]
    fn framework_head_does_not_change_logits() {
        let with = Model::new(tiny_spec(true), 3).unwrap();
        let without = with.without_framework();
        let a = with.logits(&seq()).unwrap();
        let b = without.logits(&seq()).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        // initialisation of encoder and head is independent of the head choice
        let fresh = Model::new(tiny_spec(false), 3).unwrap();
        assert_eq!(fresh.logits(&seq()).unwrap(), a);
    }

    #[test]
    fn gap_invariance_over_frame_and_joint_permutations() {
        let m = Model::new(tiny_spec(false), 5).unwrap();
        let x = m.feature_map(&seq()).unwrap();
        let [j, t, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let logits_of = |data: Vec<Real>| {
            let mut tape = Tape::new();
            let xv = tape.constant(vec![j, t, c], data).unwrap();
            let head = bind(&mut tape, m.head().params(), false).unwrap();
            let z = classify(&mut tape, xv, &head).unwrap();
            tape.value(z).to_vec()
        };
        let base = logits_of(x.data().to_vec());
        let mut permuted = vec![0.0; j * t * c];
        for jj in 0..j {
            for tt in 0..t {
                let (sj, st) = ((jj + 1) % j, (t - 1 - tt));
                permuted[(jj * t + tt) * c..(jj * t + tt + 1) * c]
                    .copy_from_slice(&x.data()[(sj * t + st) * c..(sj * t + st + 1) * c]);
            }
        }
        for (a, b) in base.iter().zip(logits_of(permuted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_sequence() {
        let m = Model::new(tiny_spec(false), 5).unwrap();
        let bad = SkeletonSequence::new(0, 0, 4, 5, vec![0.0; 60]).unwrap();
        assert!(matches!(m.predict(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny_spec(true);
        s.stfd = Some(StfdConfig { reduction: 3, embedding_dim: 5 });
        assert!(Model::new(s, 0).is_err());
    }
}
