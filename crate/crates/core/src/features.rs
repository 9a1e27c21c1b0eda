//! Cached per-video feature records, their binary container, the
//! chronological split and the synthetic corpus generator.
//!
//! Container layout (little-endian):
//!
//! ```text
//! b"MGC3" | u32 version = 1 | u64 header_len | JSON header | f32 payload
//! ```
//!
//! The header lists every record with its tensor shapes, byte offsets into
//! the payload and a CRC32 of the record's payload bytes.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 4] = b"MGC3";
pub const CONTAINER_VERSION: u32 = 1;
pub const NUM_VIEWS: usize = 3;
pub const VIEW_NAMES: [&str; NUM_VIEWS] = ["neutral", "formal", "sensational"];

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// 0 = real, 1 = fake.
    pub label: u8,
    pub timestamp: i64,
    pub text: Tensor,
    /// Rewrites in [`VIEW_NAMES`] order, each shaped like `text`.
    pub rewrites: Vec<Tensor>,
    pub visual: Tensor,
    pub audio: Tensor,
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a feature container (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("record {id}: shape/offset mismatch: {reason}")]
    ShapeOffset { id: String, reason: String },
    #[error("record {id}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { id: String, stored: u32, computed: u32 },
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("no records")]
    Empty,
    #[error("split: {0}")]
    Split(String),
}

impl FeatureRecord {
    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |reason: String| FeatureError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if self.label > 1 {
            return Err(bad(format!("label {} not in {{0,1}}", self.label)));
        }
        if self.rewrites.len() != NUM_VIEWS {
            return Err(bad(format!(
                "expected {NUM_VIEWS} rewrites, got {}",
                self.rewrites.len()
            )));
        }
        let d = self.dim();
        if d == 0 {
            return Err(bad("feature dimension is zero".into()));
        }
        if self.text.rows() == 0 {
            return Err(bad("text has no tokens".into()));
        }
        if self.visual.rows() == 0 {
            return Err(bad("visual has no frames".into()));
        }
        if self.audio.rows() < 2 {
            return Err(bad("audio needs at least two frames".into()));
        }
        for (name, t) in self.named_tensors() {
            if t.cols() != d {
                return Err(bad(format!("{name} has dimension {}, expected {d}", t.cols())));
            }
            if !t.is_finite() {
                return Err(bad(format!("{name} has non-finite values")));
            }
        }
        for (v, r) in self.rewrites.iter().enumerate() {
            if r.rows() != self.text.rows() {
                return Err(bad(format!(
                    "rewrite {} has {} tokens, text has {}",
                    VIEW_NAMES[v],
                    r.rows(),
                    self.text.rows()
                )));
            }
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("text".to_string(), &self.text)];
        for (v, r) in self.rewrites.iter().enumerate() {
            out.push((format!("rewrite_{}", VIEW_NAMES.get(v).unwrap_or(&"extra")), r));
        }
        out.push(("visual".into(), &self.visual));
        out.push(("audio".into(), &self.audio));
        out
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct RecordEntry {
    id: String,
    label: u8,
    timestamp: i64,
    tensors: Vec<TensorEntry>,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    records: Vec<RecordEntry>,
}

/// Serializes records into container bytes.
pub fn encode_container(records: &[FeatureRecord]) -> Result<Vec<u8>, FeatureError> {
    if records.is_empty() {
        return Err(FeatureError::Empty);
    }
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        let start = payload.len();
        let mut tensors = Vec::new();
        for (name, t) in r.named_tensors() {
            let offset = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape: t.shape(),
                offset,
                len: t.len() * 4,
            });
        }
        entries.push(RecordEntry {
            id: r.id.clone(),
            label: r.label,
            timestamp: r.timestamp,
            tensors,
            crc32: crc32fast::hash(&payload[start..]),
        });
    }
    let header = serde_json::to_vec(&ContainerHeader { records: entries })
        .map_err(|e| FeatureError::MalformedHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_container<W: Write>(records: &[FeatureRecord], mut w: W) -> Result<usize, FeatureError> {
    let bytes = encode_container(records)?;
    w.write_all(&bytes)?;
    Ok(bytes.len())
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<FeatureRecord>, FeatureError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_container(&bytes)
}

pub fn decode_container(bytes: &[u8]) -> Result<Vec<FeatureRecord>, FeatureError> {
    if bytes.len() < 16 {
        return Err(FeatureError::Truncated {
            need: 16,
            have: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != CONTAINER_MAGIC {
        return Err(FeatureError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(FeatureError::Version(version));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            FeatureError::MalformedHeader(format!("header length {hlen} exceeds file size {}", bytes.len()))
        })?;
    let header: ContainerHeader =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| FeatureError::MalformedHeader(e.to_string()))?;
    if header.records.is_empty() {
        return Err(FeatureError::Empty);
    }
    let payload = &bytes[hend..];
    let mut records = Vec::with_capacity(header.records.len());
    let mut expected_offset = 0usize;
    for entry in header.records {
        let mismatch = |reason: String| FeatureError::ShapeOffset {
            id: entry.id.clone(),
            reason,
        };
        let expected_names = 2 + NUM_VIEWS + 1;
        if entry.tensors.len() != expected_names {
            return Err(mismatch(format!(
                "expected {expected_names} tensors, found {}",
                entry.tensors.len()
            )));
        }
        let start = entry.tensors[0].offset;
        let mut end = start;
        let mut tensors = Vec::with_capacity(entry.tensors.len());
        for t in &entry.tensors {
            let [rows, cols] = t.shape;
            if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(t.len) {
                return Err(mismatch(format!(
                    "{}: byte length {} does not match shape {:?}",
                    t.name, t.len, t.shape
                )));
            }
            if t.offset != end || t.offset != expected_offset {
                return Err(mismatch(format!(
                    "{}: offset {} is not contiguous (expected {})",
                    t.name, t.offset, expected_offset
                )));
            }
            end = t.offset + t.len;
            expected_offset = end;
            if end > payload.len() {
                return Err(FeatureError::Truncated {
                    need: end,
                    have: payload.len(),
                });
            }
            let data = payload[t.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(rows, cols, data).map_err(|e| mismatch(e.to_string()))?);
        }
        let computed = crc32fast::hash(&payload[start..end]);
        if computed != entry.crc32 {
            return Err(FeatureError::Checksum {
                id: entry.id,
                stored: entry.crc32,
                computed,
            });
        }
        let mut it = tensors.into_iter();
        let text = it.next().expect("text");
        let rewrites: Vec<Tensor> = (&mut it).take(NUM_VIEWS).collect();
        let visual = it.next().expect("visual");
        let audio = it.next().expect("audio");
        let rec = FeatureRecord {
            id: entry.id,
            label: entry.label,
            timestamp: entry.timestamp,
            text,
            rewrites,
            visual,
            audio,
        };
        rec.validate()?;
        records.push(rec);
    }
    if expected_offset != payload.len() {
        return Err(FeatureError::ShapeOffset {
            id: "<container>".into(),
            reason: format!("{} trailing payload bytes", payload.len() - expected_offset),
        });
    }
    Ok(records)
}

/// Earliest `ratios.0` of records (by timestamp, ties broken by id) go to
/// train, the next `ratios.1` to validation, the rest to test.
pub fn chronological_split(
    records: &[FeatureRecord],
    ratios: (f64, f64, f64),
) -> Result<(Vec<FeatureRecord>, Vec<FeatureRecord>, Vec<FeatureRecord>), FeatureError> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-6 {
        return Err(FeatureError::Split(format!(
            "ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let n = records.len();
    let sizes = split_sizes(n, ratios);
    if sizes.iter().any(|&s| s == 0) {
        return Err(FeatureError::Split(format!(
            "{n} records cannot fill three non-empty splits (sizes {sizes:?})"
        )));
    }
    let mut sorted: Vec<&FeatureRecord> = records.iter().collect();
    sorted.sort_by(|x, y| x.timestamp.cmp(&y.timestamp).then_with(|| x.id.cmp(&y.id)));
    let train = sorted[..sizes[0]].iter().map(|r| (*r).clone()).collect();
    let val = sorted[sizes[0]..sizes[0] + sizes[1]]
        .iter()
        .map(|r| (*r).clone())
        .collect();
    let test = sorted[sizes[0] + sizes[1]..].iter().map(|r| (*r).clone()).collect();
    Ok((train, val, test))
}

/// `[floor(n a), floor(n b), rest]`, with a tiny epsilon so products like
/// `20 * 0.7` land on the integer they denote.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> [usize; 3] {
    let train = ((n as f64) * ratios.0 + 1e-9).floor() as usize;
    let val = ((n as f64) * ratios.1 + 1e-9).floor() as usize;
    let train = train.min(n);
    let val = val.min(n - train);
    [train, val, n - train - val]
}

/// Per-class `(mean, std)` targets for the planted text-visual,
/// text-audio and visual-audio alignment strengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub real: [(f64, f64); 3],
    pub fake: [(f64, f64); 3],
    pub n_real: usize,
    pub n_fake: usize,
    pub d: usize,
    pub l_t: usize,
    pub k: usize,
    pub t: usize,
    pub seed: u64,
    /// Rewrite style-offset magnitude for real and fake samples.
    pub style_real: f64,
    pub style_fake: f64,
    /// Per-entry Gaussian noise added to every token.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            real: [(0.82, 0.32), (0.50, 0.20), (0.89, 0.02)],
            fake: [(0.16, 0.27), (0.88, 0.13), (0.89, 0.02)],
            n_real: 1400,
            n_fake: 1400,
            d: 32,
            l_t: 16,
            k: 8,
            t: 24,
            seed: 7,
            style_real: 0.5,
            style_fake: 1.0,
            noise: 0.1,
        }
    }
}

/// Orthonormal directions assigned to each latent factor.
struct Basis {
    content: Vec<Vec<f64>>,
    affect: Vec<Vec<f64>>,
    shared: Vec<Vec<f64>>,
    ground: Vec<f64>,
    intensity: Vec<f64>,
    style: Vec<Vec<f64>>,
}

/// Smallest feature dimension that holds every latent subspace.
pub const MIN_SYNTHETIC_DIM: usize = 16;

impl Basis {
    fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let q = random_orthonormal(d, rng);
        // content : affect : shared = 3 : 2 : 2 of what is left after the
        // two text-only directions and the three style directions
        let rest = d - 5;
        let n_content = rest * 3 / 7;
        let n_affect = rest * 2 / 7;
        let n_shared = rest - n_content - n_affect;
        let mut it = q.into_iter();
        let content = (&mut it).take(n_content).collect();
        let affect = (&mut it).take(n_affect).collect();
        let shared = (&mut it).take(n_shared).collect();
        let ground = it.next().expect("ground direction");
        let intensity = it.next().expect("intensity direction");
        let style = it.take(3).collect();
        Self {
            content,
            affect,
            shared,
            ground,
            intensity,
            style,
        }
    }
}

fn random_orthonormal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Unit-norm random vector inside the span of `dirs`.
fn latent(dirs: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = dirs[0].len();
    let z: Vec<f64> = dirs.iter().map(|_| StandardNormal.sample(rng)).collect();
    let n = z.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut out = vec![0.0; d];
    for (zi, dir) in z.iter().zip(dirs) {
        for (o, x) in out.iter_mut().zip(dir) {
            *o += zi / n * x;
        }
    }
    out
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn to_tensor(rows: Vec<Vec<f64>>) -> Tensor {
    let r = rows.len();
    let c = rows[0].len();
    Tensor::new(r, c, rows.into_iter().flatten().map(|v| v as f32).collect()).expect("rectangular")
}

/// Planted per-sample alignment strengths, kept next to each record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedAlignment {
    pub tv: f64,
    pub ta: f64,
    pub va: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub records: Vec<FeatureRecord>,
    pub planted: Vec<PlantedAlignment>,
    pub warnings: Vec<String>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), String> {
        for (cls, targets) in [("real", &self.real), ("fake", &self.fake)] {
            for (i, &(m, s)) in targets.iter().enumerate() {
                if !(0.0..=1.0).contains(&m) {
                    return Err(format!("{cls} target {i} mean {m} outside [0,1]"));
                }
                if !(s > 0.0) {
                    return Err(format!("{cls} target {i} std {s} must be positive"));
                }
            }
        }
        if self.n_real + self.n_fake == 0 {
            return Err("corpus must contain at least one sample".into());
        }
        if self.d < MIN_SYNTHETIC_DIM {
            return Err(format!("d = {} is below the minimum {MIN_SYNTHETIC_DIM}", self.d));
        }
        if self.l_t == 0 || self.k == 0 || self.t < 2 {
            return Err("need L_t >= 1, K >= 1, T >= 2".into());
        }
        if !(self.noise >= 0.0) || !(self.style_real >= 0.0) || !(self.style_fake >= 0.0) {
            return Err("noise and style magnitudes must be non-negative".into());
        }
        Ok(())
    }
}

/// Builds a labelled corpus whose modalities share content according to
/// per-sample alignment strengths drawn from the spec's class targets.
///
/// * text tokens mix content events, affect beats, a grounding direction
///   scaled by the text-visual strength and an intensity direction scaled
///   by the text-audio strength;
/// * visual frame `k` carries event `k` with weight `sqrt(m_tv)` and an
///   unrelated event otherwise, audio frames carry the affect beats with
///   weight `sqrt(m_ta)`, so the marginal distribution of each of these
///   modalities does not depend on the label;
/// * visual and audio frames share a smooth latent trajectory with weight
///   `sqrt(m_va)`;
/// * rewrites add a per-view style offset, larger for fake samples.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = Basis::new(spec.d, &mut rng);
    let n = spec.n_real + spec.n_fake;
    let mut labels: Vec<u8> = std::iter::repeat_n(0u8, spec.n_real)
        .chain(std::iter::repeat_n(1u8, spec.n_fake))
        .collect();
    labels.shuffle(&mut rng);

    // draw the strengths first so the clipping rate can be reported
    let mut clipped = [[0usize; 3]; 2];
    let mut counts = [0usize; 2];
    let mut planted = Vec::with_capacity(n);
    for &y in &labels {
        let targets = if y == 0 { &spec.real } else { &spec.fake };
        counts[y as usize] += 1;
        let mut m = [0.0; 3];
        for (i, &(mean, std)) in targets.iter().enumerate() {
            let v: f64 = Normal::new(mean, std).expect("valid std").sample(&mut rng);
            if !(0.0..=1.0).contains(&v) {
                clipped[y as usize][i] += 1;
            }
            m[i] = v.clamp(0.0, 1.0);
        }
        planted.push(PlantedAlignment {
            tv: m[0],
            ta: m[1],
            va: m[2],
        });
    }
    let mut warnings = Vec::new();
    for (c, cls) in ["real", "fake"].iter().enumerate() {
        for (i, pair) in ["tv", "ta", "va"].iter().enumerate() {
            if counts[c] > 0 {
                let frac = clipped[c][i] as f64 / counts[c] as f64;
                if frac > 0.2 {
                    warnings.push(format!(
                        "{cls} {pair} target clips {:.1}% of draws into [0,1]",
                        100.0 * frac
                    ));
                }
            }
        }
    }

    let mut records = Vec::with_capacity(n);
    for (i, (&y, m)) in labels.iter().zip(&planted).enumerate() {
        records.push(sample_record(spec, &basis, i, y, m, &mut rng));
    }
    Ok(SyntheticCorpus {
        records,
        planted,
        warnings,
    })
}

fn sample_record(
    spec: &SyntheticSpec,
    basis: &Basis,
    index: usize,
    label: u8,
    m: &PlantedAlignment,
    rng: &mut ChaCha8Rng,
) -> FeatureRecord {
    let d = spec.d;
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("noise");
    let noisy = |mut v: Vec<f64>, rng: &mut ChaCha8Rng| {
        if spec.noise > 0.0 {
            for x in v.iter_mut() {
                *x += noise.sample(rng);
            }
        }
        v
    };
    let n_beats = spec.t.div_ceil(4).max(2);
    let events: Vec<Vec<f64>> = (0..spec.k).map(|_| latent(&basis.content, rng)).collect();
    let beats: Vec<Vec<f64>> = (0..n_beats).map(|_| latent(&basis.affect, rng)).collect();
    // smooth shared trajectory between two anchor points
    let g0 = latent(&basis.shared, rng);
    let g1 = latent(&basis.shared, rng);
    let shared_at = |tau: f64| -> Vec<f64> {
        let a = (std::f64::consts::FRAC_PI_2 * tau).cos();
        let b = (std::f64::consts::FRAC_PI_2 * tau).sin();
        g0.iter().zip(&g1).map(|(x, y)| a * x + b * y).collect()
    };
    let jitter = |rng: &mut ChaCha8Rng| -> f64 { Normal::new(0.0, 0.15).expect("jitter").sample(rng) };
    let ground = 2.0 * m.tv + jitter(rng);
    let intensity = 2.0 * m.ta + jitter(rng);

    let text: Vec<Vec<f64>> = (0..spec.l_t)
        .map(|j| {
            let mut v = vec![0.0; d];
            axpy(&mut v, 1.0, &events[rng.random_range(0..spec.k)]);
            axpy(&mut v, 1.0, &beats[(j * n_beats) / spec.l_t]);
            axpy(&mut v, ground, &basis.ground);
            axpy(&mut v, intensity, &basis.intensity);
            noisy(v, rng)
        })
        .collect();

    let (wt, wt_off) = (m.tv.sqrt(), (1.0 - m.tv).sqrt());
    let (wa, wa_off) = (m.ta.sqrt(), (1.0 - m.ta).sqrt());
    let (ws, ws_off) = (m.va.sqrt(), (1.0 - m.va).sqrt());
    let visual: Vec<Vec<f64>> = (0..spec.k)
        .map(|k| {
            let tau = if spec.k > 1 {
                k as f64 / (spec.k - 1) as f64
            } else {
                0.0
            };
            let mut v = vec![0.0; d];
            axpy(&mut v, wt, &events[k]);
            axpy(&mut v, wt_off, &latent(&basis.content, rng));
            axpy(&mut v, ws, &shared_at(tau));
            axpy(&mut v, ws_off, &latent(&basis.shared, rng));
            noisy(v, rng)
        })
        .collect();
    let audio: Vec<Vec<f64>> = (0..spec.t)
        .map(|t| {
            let tau = t as f64 / (spec.t - 1) as f64;
            let mut v = vec![0.0; d];
            axpy(&mut v, wa, &beats[(t * n_beats) / spec.t]);
            axpy(&mut v, wa_off, &latent(&basis.affect, rng));
            axpy(&mut v, ws, &shared_at(tau));
            axpy(&mut v, ws_off, &latent(&basis.shared, rng));
            noisy(v, rng)
        })
        .collect();

    let magnitude = if label == 0 { spec.style_real } else { spec.style_fake };
    let rewrites: Vec<Tensor> = (0..NUM_VIEWS)
        .map(|v| {
            let scale = magnitude * (1.0 + jitter(rng));
            let mut offset = vec![0.0; d];
            axpy(&mut offset, 1.0, &basis.style[v]);
            axpy(&mut offset, StandardNormal.sample(rng), &basis.ground);
            axpy(&mut offset, StandardNormal.sample(rng), &basis.intensity);
            let rows = text
                .iter()
                .map(|tok| {
                    let mut r = tok.clone();
                    axpy(&mut r, scale, &offset);
                    noisy(r, rng)
                })
                .collect();
            to_tensor(rows)
        })
        .collect();

    FeatureRecord {
        id: format!("syn-{index:06}"),
        label,
        timestamp: 1_600_000_000 + 60 * index as i64,
        text: to_tensor(text),
        rewrites,
        visual: to_tensor(visual),
        audio: to_tensor(audio),
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    ab / (aa.sqrt() * bb.sqrt()).max(1e-12)
}

/// Mean over rows of `a` of the best cosine match among rows of `b`.
pub fn best_match_alignment(a: &Tensor, b: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let best = (0..b.rows())
            .map(|j| cosine(a.row_slice(i), b.row_slice(j)))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    total / a.rows() as f64
}

/// Geometric alignment proxies `(text-visual, text-audio, visual-audio)`
/// measured directly on the features.
pub fn alignment_proxies(r: &FeatureRecord) -> [f64; 3] {
    [
        best_match_alignment(&r.text, &r.visual),
        best_match_alignment(&r.text, &r.audio),
        best_match_alignment(&r.visual, &r.audio),
    ]
}
