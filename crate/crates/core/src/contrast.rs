//! Dual memory banks, hard-mining sampler and the InfoNCE losses.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe;
use crate::tensor::{Real, Tape, TensorError, Var, NORM_EPS};

/// Lower clamp for the literal-form denominator.
pub const LITERAL_DENOM_EPS: Real = 1e-8;
/// Tolerance on stored row norms.
pub const UNIT_NORM_TOL: Real = 1e-6;

#[derive(Debug, Error)]
pub enum ContrastError {
    #[error("bank {bank}: index {index} outside [0, {len})")]
    Index { bank: BankKind, index: usize, len: usize },
    #[error("bank {bank}: row {index} holds label {stored}, refusing to overwrite with label {given}")]
    LabelConflict { bank: BankKind, index: usize, stored: usize, given: usize },
    #[error("bank {bank}: feature of length {got} for dimension {dim}")]
    Dimension { bank: BankKind, got: usize, dim: usize },
    #[error("bank {bank}: feature for row {index} is not finite")]
    NonFinite { bank: BankKind, index: usize },
    #[error("degenerate vector: norm {norm:e} is below {eps:e}")]
    Degenerate { norm: f64, eps: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ContrastError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Spatial,
    Temporal,
}

impl std::fmt::Display for BankKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BankKind::Spatial => "spatial",
            BankKind::Temporal => "temporal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossForm {
    /// `−log(exp(⟨a,p⟩/τ) / (exp(⟨a,p⟩/τ) + Σ exp(⟨a,n⟩/τ)))`.
    #[default]
    Exponentiated,
    /// The same ratio over raw scaled similarities, no exponential.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub tau: Real,
    pub n_pos_hard: usize,
    pub n_neg_hard: usize,
    pub n_neg_rand: usize,
    pub loss_form: LossForm,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self { tau: 0.8, n_pos_hard: 128, n_neg_hard: 512, n_neg_rand: 512, loss_form: LossForm::Exponentiated }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(format!("contrast.tau must be a positive finite number, got {}", self.tau));
        }
        Ok(())
    }
}

/// `L × D` store of unit-norm features addressed by dataset index.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    kind: BankKind,
    dim: usize,
    features: Vec<Real>,
    labels: Vec<Option<usize>>,
    valid: Vec<bool>,
}

impl MemoryBank {
    /// An empty bank: zero rows, none valid.
    pub fn new(kind: BankKind, len: usize, dim: usize) -> Self {
        Self { kind, dim, features: vec![0.0; len * dim], labels: vec![None; len], valid: vec![false; len] }
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid.get(i).copied().unwrap_or(false)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.get(i).copied().flatten()
    }

    /// Row `i`, if it has been written.
    pub fn row(&self, i: usize) -> Option<&[Real]> {
        if !self.is_valid(i) {
            return None;
        }
        probe::bank_read();
        Some(&self.features[i * self.dim..(i + 1) * self.dim])
    }

    /// Store `feat / ‖feat‖` at row `i`. The label of a row is fixed by its
    /// first write.
    pub fn update(&mut self, i: usize, feat: &[Real], label: usize) -> Result<()> {
        if i >= self.len() {
            return Err(ContrastError::Index { bank: self.kind, index: i, len: self.len() });
        }
        if feat.len() != self.dim {
            return Err(ContrastError::Dimension { bank: self.kind, got: feat.len(), dim: self.dim });
        }
        if feat.iter().any(|v| !v.is_finite()) {
            return Err(ContrastError::NonFinite { bank: self.kind, index: i });
        }
        if let Some(stored) = self.labels[i] {
            if stored != label {
                return Err(ContrastError::LabelConflict { bank: self.kind, index: i, stored, given: label });
            }
        }
        let unit = normalized(feat)?;
        probe::bank_write();
        self.features[i * self.dim..(i + 1) * self.dim].copy_from_slice(&unit);
        self.labels[i] = Some(label);
        self.valid[i] = true;
        Ok(())
    }

    /// Tab-separated snapshot: `index label valid f0 … f{D-1}`. Unwritten
    /// rows carry label `-1`.
    pub fn write_tsv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "index\tlabel\tvalid")?;
        for d in 0..self.dim {
            write!(out, "\tf{d}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            let label = self.labels[i].map_or_else(|| "-1".to_string(), |l| l.to_string());
            write!(out, "{i}\t{label}\t{}", u8::from(self.valid[i]))?;
            for v in &self.features[i * self.dim..(i + 1) * self.dim] {
                write!(out, "\t{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn export_tsv(&self, path: &Path) -> Result<()> {
        let io = |source| ContrastError::Io { path: path.to_path_buf(), source };
        let file = std::fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_tsv(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }
}

fn normalized(v: &[Real]) -> Result<Vec<Real>> {
    let norm = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    if !(norm > NORM_EPS) {
        return Err(ContrastError::Degenerate { norm: norm as f64, eps: NORM_EPS as f64 });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// `u·v / (‖u‖ ‖v‖)`.
pub fn cosine_similarity(u: &[Real], v: &[Real]) -> Result<Real> {
    if u.len() != v.len() {
        return Err(TensorError::Dimension {
            op: "cosine_similarity",
            detail: format!("lengths {} and {} differ", u.len(), v.len()),
        }
        .into());
    }
    let nu = u.iter().map(|x| x * x).sum::<Real>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    for n in [nu, nv] {
        if !(n > NORM_EPS) {
            return Err(ContrastError::Degenerate { norm: n as f64, eps: NORM_EPS as f64 });
        }
    }
    let dot: Real = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Bank indices selected for one anchor.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ContrastSample {
    pub positives: Vec<usize>,
    pub hard_negatives: Vec<usize>,
    pub random_negatives: Vec<usize>,
}

impl ContrastSample {
    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.hard_negatives.iter().chain(&self.random_negatives).copied()
    }

    pub fn negative_count(&self) -> usize {
        self.hard_negatives.len() + self.random_negatives.len()
    }
}

/// Hard mining plus random negatives over the valid rows of `bank`,
/// excluding `anchor_index`.
///
/// Positives are the `n_pos_hard` same-label rows least similar to the
/// anchor; hard negatives the `n_neg_hard` different-label rows most similar;
/// random negatives `n_neg_rand` rows drawn without replacement from the
/// remaining different-label rows. Ties break by ascending index. A short
/// pool is taken whole.
pub fn sample_contrast(
    bank: &MemoryBank,
    anchor: &[Real],
    anchor_label: usize,
    anchor_index: usize,
    cfg: &ContrastConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ContrastSample> {
    if anchor.len() != bank.dim {
        return Err(ContrastError::Dimension { bank: bank.kind, got: anchor.len(), dim: bank.dim });
    }
    let a = normalized(anchor)?;
    let mut pos: Vec<(Real, usize)> = Vec::new();
    let mut neg: Vec<(Real, usize)> = Vec::new();
    for i in 0..bank.len() {
        if i == anchor_index {
            continue;
        }
        let Some(row) = bank.row(i) else { continue };
        let sim: Real = a.iter().zip(row).map(|(x, y)| x * y).sum();
        if bank.labels[i] == Some(anchor_label) {
            pos.push((sim, i));
        } else {
            neg.push((sim, i));
        }
    }
    let by_sim_then_index = |x: &(Real, usize), y: &(Real, usize)| -> Ordering {
        x.0.total_cmp(&y.0).then(x.1.cmp(&y.1))
    };
    pos.sort_by(by_sim_then_index);
    neg.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let positives = pos.iter().take(cfg.n_pos_hard).map(|p| p.1).collect();
    let n_hard = cfg.n_neg_hard.min(neg.len());
    let hard_negatives = neg[..n_hard].iter().map(|p| p.1).collect();
    let mut pool: Vec<usize> = neg[n_hard..].iter().map(|p| p.1).collect();
    pool.sort_unstable();
    let random_negatives = if cfg.n_neg_rand >= pool.len() {
        pool
    } else {
        let mut picked: Vec<usize> =
            sample_indices(rng, pool.len(), cfg.n_neg_rand).into_iter().map(|k| pool[k]).collect();
        picked.sort_unstable();
        picked
    };
    Ok(ContrastSample { positives, hard_negatives, random_negatives })
}

/// Result of one InfoNCE evaluation on a tape.
#[derive(Debug, Clone, Copy)]
pub struct NceOutcome {
    /// Sum over positive terms; `None` when every term was skipped or no
    /// positive was available.
    pub loss: Option<Var>,
    pub terms: usize,
    pub skipped_terms: usize,
}

/// InfoNCE of `anchor` against the rows of `bank` named by `sample`.
///
/// The anchor is L2-normalised on the tape; bank rows enter as constants, so
/// gradients reach the anchor only.
pub fn info_nce(
    tape: &mut Tape,
    anchor: Var,
    sample: &ContrastSample,
    bank: &MemoryBank,
    cfg: &ContrastConfig,
) -> Result<NceOutcome> {
    let p = sample.positives.len();
    if p == 0 {
        return Ok(NceOutcome { loss: None, terms: 0, skipped_terms: 0 });
    }
    let d = bank.dim;
    if tape.shape(anchor) != [d] {
        return Err(ContrastError::Dimension { bank: bank.kind, got: tape.value(anchor).len(), dim: d });
    }
    let n = sample.negative_count();
    let order: Vec<usize> = sample.positives.iter().copied().chain(sample.negatives()).collect();
    // columns of `[D × (P+N)]`: positives first, then negatives
    let mut cols = vec![0.0; d * order.len()];
    for (c, &idx) in order.iter().enumerate() {
        let row = bank.row(idx).ok_or(ContrastError::Index { bank: bank.kind, index: idx, len: bank.len() })?;
        for (r, &v) in row.iter().enumerate() {
            cols[r * order.len() + c] = v;
        }
    }
    let a = tape.l2_normalize(anchor)?;
    let a = tape.reshape(a, vec![1, d])?;
    let m = tape.constant(vec![d, order.len()], cols)?;
    let sims = tape.matmul(a, m)?;
    let sims = tape.reshape(sims, vec![order.len()])?;
    let logits = tape.scalar_mul(sims, 1.0 / cfg.tau)?;

    let mut terms = Vec::with_capacity(p);
    let mut skipped = 0;
    match cfg.loss_form {
        LossForm::Exponentiated => {
            if n == 0 {
                // −log(e^x / e^x) vanishes identically
                let zero = tape.constant(Vec::new(), vec![0.0])?;
                return Ok(NceOutcome { loss: Some(zero), terms: p, skipped_terms: 0 });
            }
            for k in 0..p {
                let idx: Vec<usize> = std::iter::once(k).chain(p..p + n).collect();
                let row = tape.gather(logits, &idx)?;
                terms.push(tape.softmax_cross_entropy(row, 0)?);
            }
        }
        LossForm::Literal => {
            let values = tape.value(logits).to_vec();
            let neg_sum: Real = values[p..].iter().sum();
            for k in 0..p {
                let num = values[k];
                let den = num + neg_sum;
                let ratio = num / den.max(LITERAL_DENOM_EPS);
                if !(num > 0.0) || !(ratio > 0.0) {
                    skipped += 1;
                    continue;
                }
                let num_v = tape.gather(logits, &[k])?;
                let den_v = if den < LITERAL_DENOM_EPS {
                    tape.constant(vec![1], vec![LITERAL_DENOM_EPS])?
                } else {
                    let idx: Vec<usize> = std::iter::once(k).chain(p..p + n).collect();
                    let parts = tape.gather(logits, &idx)?;
                    let s = tape.sum(parts)?;
                    tape.reshape(s, vec![1])?
                };
                let ln_den = tape.log(den_v)?;
                let ln_num = tape.log(num_v)?;
                let t = tape.sub(ln_den, ln_num)?;
                terms.push(tape.reshape(t, Vec::new())?);
            }
            if terms.is_empty() {
                log::warn!("literal InfoNCE: all {p} positive terms non-positive, contributing 0");
                return Ok(NceOutcome { loss: None, terms: 0, skipped_terms: skipped });
            }
        }
    }
    let loss = if terms.len() == 1 {
        terms[0]
    } else {
        let all = tape.concat_flatten(&terms)?;
        tape.sum(all)?
    };
    Ok(NceOutcome { loss: Some(loss), terms: terms.len(), skipped_terms: skipped })
}

/// Independent random streams for the two banks' negative draws.
#[derive(Debug, Clone)]
pub struct SamplerRng {
    pub spatial: ChaCha8Rng,
    pub temporal: ChaCha8Rng,
}

impl SamplerRng {
    pub fn new(seed: u64) -> Self {
        let mut spatial = ChaCha8Rng::seed_from_u64(seed);
        spatial.set_stream(10);
        let mut temporal = ChaCha8Rng::seed_from_u64(seed);
        temporal.set_stream(11);
        Self { spatial, temporal }
    }
}

/// The spatial and temporal banks, always sized alike.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBank {
    pub spatial: MemoryBank,
    pub temporal: MemoryBank,
}

impl DualBank {
    pub fn new(len: usize, dim: usize) -> Self {
        Self { spatial: MemoryBank::new(BankKind::Spatial, len, dim), temporal: MemoryBank::new(BankKind::Temporal, len, dim) }
    }

    pub fn len(&self) -> usize {
        self.spatial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spatial.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spatial.dim()
    }
}

/// A deferred bank write for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingUpdate {
    pub index: usize,
    pub label: usize,
    pub s: Vec<Real>,
    pub t: Vec<Real>,
}

impl DualBank {
    pub fn apply(&mut self, update: &PendingUpdate) -> Result<()> {
        self.spatial.update(update.index, &update.s, update.label)?;
        self.temporal.update(update.index, &update.t, update.label)
    }
}

/// Both InfoNCE losses for one instance.
#[derive(Debug, Clone, Copy)]
pub struct PairLosses {
    pub spatial: NceOutcome,
    pub temporal: NceOutcome,
}

/// Sample from both banks and record both losses. Does not write the banks.
pub fn contrast_losses(
    tape: &mut Tape,
    s: Var,
    t: Var,
    label: usize,
    index: usize,
    banks: &DualBank,
    cfg: &ContrastConfig,
    rng: &mut SamplerRng,
) -> Result<(PairLosses, ContrastSample, ContrastSample)> {
    let s_sample = sample_contrast(&banks.spatial, tape.value(s), label, index, cfg, &mut rng.spatial)?;
    let t_sample = sample_contrast(&banks.temporal, tape.value(t), label, index, cfg, &mut rng.temporal)?;
    let spatial = info_nce(tape, s, &s_sample, &banks.spatial, cfg)?;
    let temporal = info_nce(tape, t, &t_sample, &banks.temporal, cfg)?;
    Ok((PairLosses { spatial, temporal }, s_sample, t_sample))
}

/// Single-instance contrast step: sample and score against both banks, then
/// write the instance's features at its index. Returns `(L_spa, L_tem)`;
/// a loss without positives is reported as 0.
pub fn contrast_step(
    pair: &crate::stfd::DecoupledPair,
    banks: &mut DualBank,
    cfg: &ContrastConfig,
    rng: &mut SamplerRng,
) -> Result<(Real, Real)> {
    let mut tape = Tape::new();
    let s = tape.leaf(&pair.s)?;
    let t = tape.leaf(&pair.t)?;
    let (losses, _, _) = contrast_losses(&mut tape, s, t, pair.label, pair.dataset_index, banks, cfg, rng)?;
    let value = |o: NceOutcome| o.loss.map_or(0.0, |v| tape.scalar(v));
    let out = (value(losses.spatial), value(losses.temporal));
    banks.apply(&PendingUpdate {
        index: pair.dataset_index,
        label: pair.label,
        s: pair.s.data().to_vec(),
        t: pair.t.data().to_vec(),
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(p: usize, nh: usize, nr: usize) -> ContrastConfig {
        ContrastConfig { tau: 1.0, n_pos_hard: p, n_neg_hard: nh, n_neg_rand: nr, loss_form: LossForm::Exponentiated }
    }

    #[test]
    fn fresh_update_normalises_and_validates() {
        let mut b = MemoryBank::new(BankKind::Spatial, 5, 2);
        b.update(3, &[3.0, 4.0], 1).unwrap();
        assert_eq!(b.valid_count(), 1);
        assert!(b.is_valid(3));
        let row = b.row(3).unwrap();
        assert!((row[0] - 0.6).abs() < 1e-15 && (row[1] - 0.8).abs() < 1e-15);
        assert!(b.row(2).is_none());
    }

    #[test]
    fn second_write_wins() {
        let mut b = MemoryBank::new(BankKind::Temporal, 4, 2);
        b.update(1, &[1.0, 0.0], 2).unwrap();
        b.update(1, &[0.0, 2.0], 2).unwrap();
        assert_eq!(b.valid_count(), 1);
        assert_eq!(b.row(1).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn conflicting_label_is_an_integrity_error() {
        let mut b = MemoryBank::new(BankKind::Spatial, 4, 2);
        b.update(0, &[1.0, 0.0], 2).unwrap();
        assert!(matches!(b.update(0, &[1.0, 1.0], 3), Err(ContrastError::LabelConflict { .. })));
        assert!(matches!(b.update(4, &[1.0, 1.0], 3), Err(ContrastError::Index { .. })));
        assert!(matches!(b.update(1, &[0.0, 0.0], 3), Err(ContrastError::Degenerate { .. })));
    }

    #[test]
    fn cosine_examples() {
        let u = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<Real> = u.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[0.0, 1.0]).is_err());
    }

    /// Unit vector in the plane at cosine `c` to the x axis.
    fn at_cos(c: Real) -> [Real; 2] {
        [c, (1.0 - c * c).sqrt()]
    }

    #[test]
    fn hardest_positives_have_lowest_similarity() {
        let mut b = MemoryBank::new(BankKind::Spatial, 6, 2);
        for (i, c) in [(0, 0.9), (1, 0.1), (2, 0.5)] {
            b.update(i, &at_cos(c), 0).unwrap();
        }
        b.update(3, &at_cos(0.3), 1).unwrap();
        b.update(4, &at_cos(0.7), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_contrast(&b, &[1.0, 0.0], 0, 5, &cfg(2, 1, 0), &mut rng).unwrap();
        assert_eq!(s.positives, vec![1, 2]);
        assert_eq!(s.hard_negatives, vec![4]);
        assert!(s.random_negatives.is_empty());
    }

    #[test]
    fn single_label_bank_has_no_negatives() {
        let mut b = MemoryBank::new(BankKind::Spatial, 4, 2);
        for i in 0..4 {
            b.update(i, &at_cos(0.2 * i as Real), 7).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_contrast(&b, &[1.0, 0.0], 7, 0, &cfg(10, 10, 10), &mut rng).unwrap();
        assert_eq!(s.positives.len(), 3);
        assert_eq!(s.negative_count(), 0);
    }

    #[test]
    fn anchor_row_is_excluded() {
        let mut b = MemoryBank::new(BankKind::Spatial, 3, 2);
        for i in 0..3 {
            b.update(i, &[1.0, 0.1 * i as Real], 0).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_contrast(&b, &[1.0, 0.0], 0, 1, &cfg(10, 0, 0), &mut rng).unwrap();
        assert!(!s.positives.contains(&1));
        assert_eq!(s.positives.len(), 2);
    }

    fn one_term_loss(cos_p: Real, negs: &[Real], tau: Real, form: LossForm) -> (Real, NceOutcome) {
        let mut b = MemoryBank::new(BankKind::Spatial, 1 + negs.len(), 2);
        b.update(0, &at_cos(cos_p), 0).unwrap();
        for (i, &c) in negs.iter().enumerate() {
            b.update(i + 1, &at_cos(c), 1).unwrap();
        }
        let sample = ContrastSample {
            positives: vec![0],
            hard_negatives: (1..=negs.len()).collect(),
            random_negatives: vec![],
        };
        let mut tape = Tape::new();
        let a = tape.variable(vec![2], vec![1.0, 0.0]).unwrap();
        let c = ContrastConfig { tau, loss_form: form, ..ContrastConfig::default() };
        let out = info_nce(&mut tape, a, &sample, &b, &c).unwrap();
        (out.loss.map_or(0.0, |v| tape.scalar(v)), out)
    }

    #[test]
    fn lone_perfect_positive_costs_nothing() {
        let (l, out) = one_term_loss(1.0, &[], 1.0, LossForm::Exponentiated);
        assert_eq!(l, 0.0);
        assert_eq!(out.terms, 1);
    }

    #[test]
    fn symmetric_pair_costs_ln_two() {
        let (l, _) = one_term_loss(1.0, &[1.0], 1.0, LossForm::Exponentiated);
        assert!((l - (2.0 as Real).ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn literal_form_skips_non_positive_ratios() {
        let (_, out) = one_term_loss(-0.5, &[0.2], 1.0, LossForm::Literal);
        assert!(out.loss.is_none());
        assert_eq!(out.skipped_terms, 1);
        let (l, out) = one_term_loss(0.5, &[0.5], 1.0, LossForm::Literal);
        assert_eq!(out.terms, 1);
        assert!((l - (2.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn no_positives_means_no_loss() {
        let b = MemoryBank::new(BankKind::Spatial, 2, 2);
        let mut tape = Tape::new();
        let a = tape.variable(vec![2], vec![1.0, 0.0]).unwrap();
        let out = info_nce(&mut tape, a, &ContrastSample::default(), &b, &cfg(1, 1, 1)).unwrap();
        assert!(out.loss.is_none());
    }

    #[test]
    fn cold_start_then_one_positive() {
        let mut banks = DualBank::new(4, 3);
        let mut rng = SamplerRng::new(1);
        let c = cfg(4, 4, 4);
        let pair = |i: usize, v: [Real; 3]| crate::stfd::DecoupledPair {
            s: Tensor::vector(v.to_vec()),
            t: Tensor::vector(v.iter().rev().copied().collect()),
            label: 0,
            dataset_index: i,
        };
        let (ls, lt) = contrast_step(&pair(0, [1.0, 0.5, 0.2]), &mut banks, &c, &mut rng).unwrap();
        assert_eq!((ls, lt), (0.0, 0.0));
        assert_eq!(banks.spatial.valid_count(), 1);
        assert_eq!(banks.temporal.valid_count(), 1);

        let mut tape = Tape::new();
        let s = tape.variable(vec![3], vec![0.1, 1.0, 0.0]).unwrap();
        let t = tape.variable(vec![3], vec![0.0, 1.0, 0.1]).unwrap();
        let (_, ss, ts) = contrast_losses(&mut tape, s, t, 0, 1, &banks, &c, &mut rng).unwrap();
        assert_eq!(ss.positives, vec![0]);
        assert_eq!(ts.positives, vec![0]);
    }

    #[test]
    fn tsv_export_has_header_and_rows() {
        let mut b = MemoryBank::new(BankKind::Spatial, 2, 2);
        b.update(1, &[0.0, 2.0], 5).unwrap();
        let mut out = Vec::new();
        b.write_tsv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "index\tlabel\tvalid\tf0\tf1");
        assert_eq!(lines[1], "0\t-1\t0\t0\t0");
        assert_eq!(lines[2], "1\t5\t1\t0\t1");
    }
}
