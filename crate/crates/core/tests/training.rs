use stdcl_core::contrast::{DualBank, PendingUpdate, SamplerRng};
use stdcl_core::encoder::EncoderConfig;
use stdcl_core::model::Model;
use stdcl_core::train::{fit, forward_batch, model_spec, LossWeights, SampleSource};
use stdcl_core::{
    generate_synthetic, Checkpoint, ContrastConfig, Dataset, Real, RunConfig, SkeletonSequence, StfdConfig, SyntheticSpec,
    Tape,
};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = EncoderConfig { channels: 8, hidden: 4, ..Default::default() };
    cfg.stfd = StfdConfig { reduction: 2, embedding_dim: 6 };
    cfg.contrast = ContrastConfig { n_pos_hard: 4, n_neg_hard: 4, n_neg_rand: 4, ..Default::default() };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg
}

fn data() -> Dataset {
    generate_synthetic(&SyntheticSpec { instances_per_class: 4, joints: 5, frames: 8, ..Default::default() }).unwrap()
}

/// Gradient norm per parameter name for a loss with the given weights,
/// against banks filled from the model's own embeddings.
fn gradient_norms(weights: LossWeights) -> Vec<(String, Real)> {
    let data = data();
    let cfg = small_config();
    let model = Model::new(model_spec(&data, &cfg).unwrap(), 1).unwrap();
    let mut banks = DualBank::new(data.len(), 6);
    for seq in data.sequences() {
        let p = model.decoupled(seq).unwrap();
        banks
            .apply(&PendingUpdate { index: seq.index, label: seq.label, s: p.s.data().to_vec(), t: p.t.data().to_vec() })
            .unwrap();
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true).unwrap();
    let batch: Vec<&SkeletonSequence> = data.sequences()[..4].iter().collect();
    let mut rng = SamplerRng::new(0);
    let fwd = forward_batch(&mut tape, &model, &bound, &batch, Some(&banks), &cfg.contrast, weights, SampleSource::Draw(&mut rng))
        .unwrap();
    let grads = tape.backward(fwd.total).unwrap();
    model
        .params()
        .iter()
        .zip(bound.all())
        .map(|(p, v)| {
            let g = grads.get_or_zeros(v, p.value.len());
            (p.name.clone(), g.iter().map(|x| x * x).sum::<Real>().sqrt())
        })
        .collect()
}

#[test]
fn cross_entropy_never_reaches_the_decoupling_head() {
    for (name, norm) in gradient_norms(LossWeights { ce: 1.0, spa: 0.0, tem: 0.0 }) {
        if name.starts_with("stfd.") {
            assert_eq!(norm, 0.0, "{name}");
        } else if name.ends_with("weight") {
            assert!(norm > 0.0, "{name}");
        }
    }
}

#[test]
fn contrast_never_reaches_the_classifier_head() {
    let norms = gradient_norms(LossWeights { ce: 0.0, spa: 1.0, tem: 1.0 });
    for (name, norm) in &norms {
        if name.starts_with("head.") {
            assert_eq!(*norm, 0.0, "{name}");
        }
    }
    assert!(norms.iter().any(|(n, g)| n.starts_with("encoder.") && *g > 0.0), "contrast trains the encoder");
    assert!(norms.iter().any(|(n, g)| n.starts_with("stfd.") && *g > 0.0), "contrast trains the decoupling head");
}

#[test]
fn spatial_loss_only_trains_the_spatial_branch() {
    for (name, norm) in gradient_norms(LossWeights { ce: 0.0, spa: 1.0, tem: 0.0 }) {
        if name == "stfd.w_phi" || name == "stfd.w_sigma" {
            assert_eq!(norm, 0.0, "{name}");
        }
        if name == "stfd.w_theta" || name == "stfd.w_zeta" {
            assert!(norm > 0.0, "{name}");
        }
    }
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let data = data();
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&data, &small_config(), None, Some(dir.path())).unwrap();
    let restored = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap().into_model().unwrap();
    for seq in data.sequences() {
        assert_eq!(out.model.predict(seq).unwrap(), restored.predict(seq).unwrap());
        let (a, b) = (out.model.logits(seq).unwrap(), restored.logits(seq).unwrap());
        for (x, y) in a.iter().zip(&b) {
            // parameters are stored as f32
            assert!((x - y).abs() < 1e-4 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn metrics_csv_has_step_and_epoch_rows() {
    let data = data();
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&data, &small_config(), None, Some(dir.path())).unwrap();
    let mut rdr = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    let steps = rows.iter().filter(|r| &r[0] == "step").count();
    let epochs = rows.iter().filter(|r| &r[0] == "epoch").count();
    assert_eq!(steps, out.steps.len());
    assert_eq!(epochs, 2);
    for r in rows.iter().filter(|r| &r[0] == "epoch") {
        let acc: Real = r[10].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
