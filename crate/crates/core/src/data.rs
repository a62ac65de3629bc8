//! Skeleton sequences, datasets, their two on-disk formats and a synthetic
//! generator with separable spatial and temporal class factors.
//!
//! # JSON lines
//!
//! The first line is a header, every following line one sequence:
//!
//! ```text
//! {"format":"stdcl-skeleton","version":1,"joints":J,"frames":T0,"num_classes":K,"length":L}
//! {"index":0,"label":2,"joints":J,"frames":T,"coords":[x,y,z, x,y,z, ...]}
//! ```
//!
//! `coords` is the `J × T × 3` array flattened joint-major (all frames of
//! joint 0 first). A record may have a different `frames` count from the
//! header; it is linearly resampled to the header's `frames` on load. External
//! data (NTU, NW-UCLA, ...) is adapted offline by writing this layout; no
//! centering or view alignment is applied here.
//!
//! # Packed binary
//!
//! Little-endian throughout: magic `SKL1`, then `J, T0, K, L` as `u32`, then
//! `L·J·T0·3` `f32` coordinates in index order, then `L` `u32` labels, then
//! `L` `u32` dataset indices.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BINARY_MAGIC: &[u8; 4] = b"SKL1";
pub const JSONL_FORMAT: &str = "stdcl-skeleton";
pub const JSONL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at record {record}: {detail}")]
    Parse { record: usize, detail: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One skeleton sequence of `joints × frames × 3` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub index: usize,
    pub label: usize,
    pub joints: usize,
    pub frames: usize,
    /// Joint-major: `coords[(j * frames + t) * 3 + axis]`.
    pub coords: Vec<f32>,
}

impl SkeletonSequence {
    pub fn new(index: usize, label: usize, joints: usize, frames: usize, coords: Vec<f32>) -> Result<Self> {
        let seq = Self { index, label, joints, frames, coords };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints < 2 || self.frames < 2 {
            return Err(DataError::Invalid(format!(
                "sequence {} has {} joints and {} frames; both must be >= 2",
                self.index, self.joints, self.frames
            )));
        }
        if self.coords.len() != self.joints * self.frames * 3 {
            return Err(DataError::Invalid(format!(
                "sequence {} holds {} coordinates, expected {}",
                self.index,
                self.coords.len(),
                self.joints * self.frames * 3
            )));
        }
        if self.coords.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("sequence {} has non-finite coordinates", self.index)));
        }
        Ok(())
    }

    pub fn coord(&self, joint: usize, frame: usize, axis: usize) -> f32 {
        self.coords[(joint * self.frames + frame) * 3 + axis]
    }
}

/// Linear interpolation along the frame axis to `target` frames. The first
/// and last frames are preserved exactly.
pub fn resample_time(seq: &SkeletonSequence, target: usize) -> Result<SkeletonSequence> {
    if target < 2 {
        return Err(DataError::Parameter(format!("target frame count {target} must be >= 2")));
    }
    if seq.frames < 2 {
        return Err(DataError::Parameter(format!("sequence {} has fewer than 2 frames", seq.index)));
    }
    if target == seq.frames {
        return Ok(seq.clone());
    }
    let src = seq.frames;
    let mut coords = Vec::with_capacity(seq.joints * target * 3);
    for j in 0..seq.joints {
        for u in 0..target {
            // position u·(src−1)/(target−1), kept as an exact rational split
            let num = u * (src - 1);
            let lo = num / (target - 1);
            let frac = (num % (target - 1)) as f64 / (target - 1) as f64;
            for axis in 0..3 {
                let a = seq.coord(j, lo, axis) as f64;
                let v = if frac == 0.0 {
                    a
                } else {
                    let b = seq.coord(j, lo + 1, axis) as f64;
                    a + (b - a) * frac
                };
                coords.push(v as f32);
            }
        }
    }
    Ok(SkeletonSequence { coords, frames: target, ..seq.clone() })
}

/// An indexed collection of labelled sequences. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sequences: Vec<SkeletonSequence>,
    num_classes: usize,
}

impl Dataset {
    /// Validates and orders by dataset index. Indices must be exactly `0..L`.
    pub fn new(mut sequences: Vec<SkeletonSequence>, num_classes: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(DataError::Invalid("dataset is empty".into()));
        }
        if num_classes == 0 {
            return Err(DataError::Invalid("num_classes must be positive".into()));
        }
        sequences.sort_by_key(|s| s.index);
        let joints = sequences[0].joints;
        let mut seen = vec![false; num_classes];
        for (pos, s) in sequences.iter().enumerate() {
            s.validate()?;
            if s.index != pos {
                return Err(DataError::Invalid(format!(
                    "dataset indices must be unique and cover 0..{}; found {} at position {}",
                    sequences.len(),
                    s.index,
                    pos
                )));
            }
            if s.joints != joints {
                return Err(DataError::Schema(format!(
                    "sequence {} has {} joints, dataset has {}",
                    s.index, s.joints, joints
                )));
            }
            if s.label >= num_classes {
                return Err(DataError::Invalid(format!(
                    "sequence {} has label {} outside [0, {})",
                    s.index, s.label, num_classes
                )));
            }
            seen[s.label] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(DataError::Invalid(format!("class {missing} has no sequences")));
        }
        Ok(Self { sequences, num_classes })
    }

    pub fn sequences(&self) -> &[SkeletonSequence] {
        &self.sequences
    }

    pub fn get(&self, index: usize) -> Option<&SkeletonSequence> {
        self.sequences.get(index)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn joints(&self) -> usize {
        self.sequences[0].joints
    }

    /// The shared frame count, or `None` when sequences differ in length.
    pub fn frames(&self) -> Option<usize> {
        let t = self.sequences[0].frames;
        self.sequences.iter().all(|s| s.frames == t).then_some(t)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.label).collect()
    }

    /// Copy with every sequence resampled to `frames`.
    pub fn resampled(&self, frames: usize) -> Result<Self> {
        let sequences = self.sequences.iter().map(|s| resample_time(s, frames)).collect::<Result<_>>()?;
        Self::new(sequences, self.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Jsonl,
    Binary,
}

impl DataFormat {
    /// `.jsonl`/`.json` are JSON lines, anything else is packed binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => DataFormat::Jsonl,
            _ => DataFormat::Binary,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlHeader {
    format: String,
    version: u32,
    joints: usize,
    frames: usize,
    num_classes: usize,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    index: usize,
    label: usize,
    joints: usize,
    frames: usize,
    coords: Vec<f32>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let file = File::open(path).map_err(io_err(path))?;
    match format {
        DataFormat::Jsonl => read_jsonl(BufReader::new(file), path),
        DataFormat::Binary => {
            let mut bytes = Vec::new();
            BufReader::new(file).read_to_end(&mut bytes).map_err(io_err(path))?;
            decode_binary(&bytes)
        }
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    match format {
        DataFormat::Jsonl => write_jsonl(dataset, &mut out).map_err(io_err(path))?,
        DataFormat::Binary => {
            let bytes = encode_binary(dataset)?;
            out.write_all(&bytes).map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

fn read_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Dataset> {
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DataError::Parse { record: 0, detail: "missing header line".into() })?
        .map_err(io_err(path))?;
    let header: JsonlHeader = serde_json::from_str(&header_line)
        .map_err(|e| DataError::Parse { record: 0, detail: format!("header: {e}") })?;
    if header.format != JSONL_FORMAT || header.version != JSONL_VERSION {
        return Err(DataError::Schema(format!(
            "unsupported format {:?} version {}",
            header.format, header.version
        )));
    }
    if header.frames < 2 {
        return Err(DataError::Schema(format!("header frames {} must be >= 2", header.frames)));
    }

    let mut sequences = Vec::with_capacity(header.length);
    for (n, line) in lines.enumerate() {
        let record_no = n + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse { record: record_no, detail: e.to_string() })?;
        if rec.joints != header.joints {
            return Err(DataError::Schema(format!(
                "record {record_no} has {} joints, header declares {}",
                rec.joints, header.joints
            )));
        }
        if rec.coords.len() != rec.joints * rec.frames * 3 {
            return Err(DataError::Parse {
                record: record_no,
                detail: format!(
                    "{} coordinates for {} joints × {} frames",
                    rec.coords.len(),
                    rec.joints,
                    rec.frames
                ),
            });
        }
        let seq = SkeletonSequence::new(rec.index, rec.label, rec.joints, rec.frames, rec.coords)
            .map_err(|e| DataError::Parse { record: record_no, detail: e.to_string() })?;
        sequences.push(resample_time(&seq, header.frames)?);
    }
    if sequences.len() != header.length {
        return Err(DataError::Schema(format!(
            "header declares {} sequences, found {}",
            header.length,
            sequences.len()
        )));
    }
    Dataset::new(sequences, header.num_classes)
}

fn write_jsonl<W: Write>(dataset: &Dataset, out: &mut W) -> std::io::Result<()> {
    let header = JsonlHeader {
        format: JSONL_FORMAT.into(),
        version: JSONL_VERSION,
        joints: dataset.joints(),
        frames: dataset.frames().unwrap_or(dataset.sequences[0].frames),
        num_classes: dataset.num_classes,
        length: dataset.len(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for s in &dataset.sequences {
        let rec = JsonlRecord {
            index: s.index,
            label: s.label,
            joints: s.joints,
            frames: s.frames,
            coords: s.coords.clone(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| DataError::Invalid(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode_binary(dataset: &Dataset) -> Result<Vec<u8>> {
    let frames = dataset
        .frames()
        .ok_or_else(|| DataError::Invalid("binary format needs a uniform frame count".into()))?;
    let (j, l) = (dataset.joints(), dataset.len());
    let mut buf = Vec::with_capacity(20 + l * (j * frames * 12 + 8));
    buf.extend_from_slice(BINARY_MAGIC);
    for (v, what) in [(j, "joints"), (frames, "frames"), (dataset.num_classes, "classes"), (l, "length")] {
        buf.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    for s in &dataset.sequences {
        for c in &s.coords {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    for s in &dataset.sequences {
        buf.extend_from_slice(&to_u32(s.label, "label")?.to_le_bytes());
    }
    for s in &dataset.sequences {
        buf.extend_from_slice(&to_u32(s.index, "index")?.to_le_bytes());
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, record: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Parse {
                record,
                detail: format!("truncated payload while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, record: usize, what: &str) -> Result<u32> {
        let b = self.take(4, record, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, record: usize, what: &str) -> Result<f32> {
        let b = self.take(4, record, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decode a packed binary dataset. Record numbers in errors are 1-based
/// sequence positions; 0 denotes the header.
pub fn decode_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, 0, "magic")? != BINARY_MAGIC {
        return Err(DataError::Parse { record: 0, detail: "bad magic, expected SKL1".into() });
    }
    let joints = cur.u32(0, "joints")? as usize;
    let frames = cur.u32(0, "frames")? as usize;
    let classes = cur.u32(0, "classes")? as usize;
    let length = cur.u32(0, "length")? as usize;
    let per_seq = joints
        .checked_mul(frames)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| DataError::Parse { record: 0, detail: "header sizes overflow".into() })?;
    let expected = per_seq
        .checked_mul(4)
        .and_then(|v| v.checked_add(8))
        .and_then(|v| v.checked_mul(length))
        .ok_or_else(|| DataError::Parse { record: 0, detail: "header sizes overflow".into() })?;
    if bytes.len() - cur.pos < expected {
        return Err(DataError::Parse {
            record: 0,
            detail: format!(
                "truncated payload: header needs {} bytes, {} present",
                expected,
                bytes.len() - cur.pos
            ),
        });
    }

    let mut coords = Vec::with_capacity(length);
    for r in 0..length {
        let mut c = Vec::with_capacity(per_seq);
        for _ in 0..per_seq {
            c.push(cur.f32(r + 1, "coordinates")?);
        }
        coords.push(c);
    }
    let labels = (0..length).map(|r| cur.u32(r + 1, "label")).collect::<Result<Vec<_>>>()?;
    let indices = (0..length).map(|r| cur.u32(r + 1, "index")).collect::<Result<Vec<_>>>()?;
    if cur.pos != bytes.len() {
        return Err(DataError::Parse {
            record: length,
            detail: format!("{} trailing bytes after payload", bytes.len() - cur.pos),
        });
    }
    let sequences = coords
        .into_iter()
        .zip(labels)
        .zip(indices)
        .enumerate()
        .map(|(r, ((c, label), index))| {
            SkeletonSequence::new(index as usize, label as usize, joints, frames, c)
                .map_err(|e| DataError::Parse { record: r + 1, detail: e.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(sequences, classes)
}

/// Parameters of the synthetic dataset. Class `a·B + b` combines spatial
/// motif `a` with temporal motif `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub spatial_motifs: usize,
    pub temporal_motifs: usize,
    pub instances_per_class: usize,
    pub noise_std: f64,
    pub joints: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            spatial_motifs: 2,
            temporal_motifs: 2,
            instances_per_class: 50,
            noise_std: 0.05,
            joints: 8,
            frames: 16,
            seed: 0,
        }
    }
}

/// Peak-to-RMS scale of the static per-joint offsets.
pub const SPATIAL_AMPLITUDE: f64 = 0.5;
/// RMS of the per-frame trajectory envelopes.
pub const TEMPORAL_AMPLITUDE: f64 = 0.5;

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.spatial_motifs * self.temporal_motifs
    }

    pub fn spatial_motif_of(&self, label: usize) -> usize {
        label / self.temporal_motifs
    }

    pub fn temporal_motif_of(&self, label: usize) -> usize {
        label % self.temporal_motifs
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_motifs < 2 {
            return Err(DataError::Parameter(format!(
                "spatial motif count must be >= 2, got {}",
                self.spatial_motifs
            )));
        }
        if self.temporal_motifs < 2 {
            return Err(DataError::Parameter(format!(
                "temporal motif count must be >= 2, got {}",
                self.temporal_motifs
            )));
        }
        if self.joints < 2 || self.frames < 2 {
            return Err(DataError::Parameter("joints and frames must both be >= 2".into()));
        }
        if self.spatial_motifs >= self.joints {
            return Err(DataError::Parameter(format!(
                "{} spatial motifs need at least {} joints",
                self.spatial_motifs,
                self.spatial_motifs + 1
            )));
        }
        if self.instances_per_class == 0 {
            return Err(DataError::Parameter("instances per class must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DataError::Parameter(format!("noise_std {} must be finite and >= 0", self.noise_std)));
        }
        Ok(())
    }
}

fn base_pose(joints: usize) -> Vec<[f64; 3]> {
    (0..joints)
        .map(|j| {
            let jf = j as f64;
            [0.3 * (0.7 * jf).sin(), 0.2 * jf, 0.1 * (1.3 * jf).cos()]
        })
        .collect()
}

/// Orthogonal, zero-sum per-joint offset pattern (a DCT-II basis vector,
/// skipping the constant one) along a motif-specific direction.
pub fn spatial_motif(motif: usize, joints: usize) -> Vec<[f64; 3]> {
    let freq = (motif + 1) as f64;
    let j_f = joints as f64;
    let dir = {
        let mut d = [0.0f64; 3];
        d[motif % 3] = 1.0;
        d[(motif + 1) % 3] = 0.5;
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        d.map(|v| v / n)
    };
    (0..joints)
        .map(|j| {
            let h = 2f64.sqrt() * (std::f64::consts::PI * freq * (j as f64 + 0.5) / j_f).cos();
            dir.map(|d| SPATIAL_AMPLITUDE * h * d)
        })
        .collect()
}

/// Zero-mean, unit-RMS (times amplitude) trajectory shared by every joint:
/// motif 0 rises linearly, motif `b > 0` oscillates with `b` periods.
pub fn temporal_motif(motif: usize, frames: usize) -> Vec<[f64; 3]> {
    let raw: Vec<f64> = (0..frames)
        .map(|t| {
            let u = t as f64 / (frames - 1) as f64;
            if motif == 0 {
                2.0 * u - 1.0
            } else {
                (2.0 * std::f64::consts::PI * motif as f64 * u).sin()
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / frames as f64;
    let centered: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let rms = (centered.iter().map(|v| v * v).sum::<f64>() / frames as f64).sqrt();
    let scale = if rms > 0.0 { TEMPORAL_AMPLITUDE / rms } else { 0.0 };
    let axis = motif % 3;
    centered
        .into_iter()
        .map(|v| {
            let mut p = [0.0; 3];
            p[axis] = v * scale;
            p
        })
        .collect()
}

/// Generate the synthetic dataset. Sequence `i` has class `i mod K`, so any
/// prefix of the dataset is close to balanced.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.num_classes();
    let (joints, frames) = (spec.joints, spec.frames);
    let base = base_pose(joints);
    let spatial: Vec<_> = (0..spec.spatial_motifs).map(|a| spatial_motif(a, joints)).collect();
    let temporal: Vec<_> = (0..spec.temporal_motifs).map(|b| temporal_motif(b, frames)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| DataError::Parameter(format!("noise_std: {e}")))?;

    let total = k * spec.instances_per_class;
    let mut sequences = Vec::with_capacity(total);
    for index in 0..total {
        let label = index % k;
        let (a, b) = (spec.spatial_motif_of(label), spec.temporal_motif_of(label));
        let mut coords = Vec::with_capacity(joints * frames * 3);
        for j in 0..joints {
            for t in 0..frames {
                for axis in 0..3 {
                    let clean = base[j][axis] + spatial[a][j][axis] + temporal[b][t][axis];
                    let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    coords.push((clean + n) as f32);
                }
            }
        }
        sequences.push(SkeletonSequence { index, label, joints, frames, coords });
    }
    Dataset::new(sequences, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_seq(frames: usize) -> SkeletonSequence {
        let coords = (0..2)
            .flat_map(|j| (0..frames).flat_map(move |t| [t as f32, 2.0 * t as f32 + j as f32, -(t as f32)]))
            .collect();
        SkeletonSequence::new(0, 0, 2, frames, coords).unwrap()
    }

    #[test]
    fn resample_identity() {
        let s = linear_seq(5);
        assert_eq!(resample_time(&s, 5).unwrap(), s);
    }

    #[test]
    fn upsample_two_to_three_inserts_midpoint() {
        let s = linear_seq(2);
        let up = resample_time(&s, 3).unwrap();
        assert_eq!(up.frames, 3);
        for j in 0..2 {
            for axis in 0..3 {
                let (a, b) = (s.coord(j, 0, axis), s.coord(j, 1, axis));
                assert_eq!(up.coord(j, 0, axis), a);
                assert_eq!(up.coord(j, 1, axis), (a + b) / 2.0);
                assert_eq!(up.coord(j, 2, axis), b);
            }
        }
    }

    #[test]
    fn down_then_up_recovers_linear_trajectory() {
        let s = linear_seq(9);
        let down = resample_time(&s, 5).unwrap();
        let back = resample_time(&down, 9).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn resample_preserves_endpoints() {
        let s = SkeletonSequence::new(0, 0, 2, 7, (0..42).map(|v| (v as f32 * 0.37).sin()).collect()).unwrap();
        let r = resample_time(&s, 4).unwrap();
        for j in 0..2 {
            for axis in 0..3 {
                assert_eq!(r.coord(j, 0, axis), s.coord(j, 0, axis));
                assert_eq!(r.coord(j, 3, axis), s.coord(j, 6, axis));
            }
        }
    }

    #[test]
    fn resample_rejects_short_target() {
        assert!(matches!(resample_time(&linear_seq(3), 1), Err(DataError::Parameter(_))));
    }

    #[test]
    fn synthetic_counts() {
        let spec = SyntheticSpec { instances_per_class: 10, ..SyntheticSpec::default() };
        let d = generate_synthetic(&spec).unwrap();
        assert_eq!(d.len(), 40);
        assert_eq!(d.num_classes(), 4);
        let mut counts = [0; 4];
        d.labels().iter().for_each(|&l| counts[l] += 1);
        assert_eq!(counts, [10; 4]);
    }

    #[test]
    fn synthetic_noise_free_is_identical_within_class() {
        let spec = SyntheticSpec { noise_std: 0.0, instances_per_class: 3, ..SyntheticSpec::default() };
        let d = generate_synthetic(&spec).unwrap();
        let k = spec.num_classes();
        assert_eq!(d.sequences()[1].coords, d.sequences()[1 + k].coords);
        assert_ne!(d.sequences()[0].coords, d.sequences()[1].coords);
    }

    #[test]
    fn synthetic_rejects_single_motif() {
        let spec = SyntheticSpec { spatial_motifs: 1, ..SyntheticSpec::default() };
        let err = generate_synthetic(&spec).unwrap_err().to_string();
        assert!(err.contains("spatial motif count must be >= 2"), "{err}");
    }

    #[test]
    fn motifs_have_zero_means() {
        for a in 0..3 {
            let m = spatial_motif(a, 8);
            for axis in 0..3 {
                assert!(m.iter().map(|p| p[axis]).sum::<f64>().abs() < 1e-12);
            }
        }
        for b in 0..3 {
            let m = temporal_motif(b, 16);
            for axis in 0..3 {
                assert!(m.iter().map(|p| p[axis]).sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_motifs_are_orthogonal() {
        let (m0, m1) = (spatial_motif(0, 8), spatial_motif(3, 8));
        // same direction (0 and 3 share axis pattern), different frequency
        let dot: f64 = m0.iter().zip(&m1).map(|(p, q)| p[0] * q[0] + p[1] * q[1] + p[2] * q[2]).sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn dataset_rejects_duplicate_index_and_missing_class() {
        let s = |i, l| SkeletonSequence::new(i, l, 2, 2, vec![0.0; 12]).unwrap();
        assert!(Dataset::new(vec![s(0, 0), s(0, 1)], 2).is_err());
        assert!(Dataset::new(vec![s(0, 0), s(1, 0)], 2).is_err());
        assert!(Dataset::new(vec![s(1, 1), s(0, 0)], 2).is_ok());
    }

    #[test]
    fn binary_truncation_is_a_parse_error() {
        let spec = SyntheticSpec { instances_per_class: 2, ..SyntheticSpec::default() };
        let bytes = encode_binary(&generate_synthetic(&spec).unwrap()).unwrap();
        for cut in [3, 10, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_binary(&bytes[..cut]), Err(DataError::Parse { .. })), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_binary(&extra).is_err());
        assert!(decode_binary(&bytes).is_ok());
    }
}
