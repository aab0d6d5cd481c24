//! Synthetic two-domain moving-sprite videos.
//!
//! The class of a clip is the direction its sprite travels in (8 classes by
//! default, 45° apart, wrapping around the frame edges). Source clips sit on
//! smooth static colour gradients; target clips sit on a textured grating in a
//! different palette that can drift slowly. Sprite motion statistics are the
//! same in both domains.

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::adapt::PseudoLabelRecord;
use crate::config::{derive_seed, invalid, ConfigError, KvConfig};
use crate::tokenizer::{TokenizerError, VideoTensor};

pub const VIDEO_MAGIC: &[u8; 4] = b"LMFT";
pub const VIDEO_VERSION: u32 = 1;
const MAX_VIDEO_VALUES: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}: not a video file (bad magic)")]
    BadMagic(PathBuf),
    #[error("{path}: unsupported video version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: header declares {expected} bytes of samples, file has {got}")]
    Truncated { path: PathBuf, expected: usize, got: usize },
    #[error("{path}: extents {extents:?} overflow")]
    ExtentOverflow { path: PathBuf, extents: [u32; 4] },
    #[error("{path}: {source}")]
    Video { path: PathBuf, source: TokenizerError },
    #[error("{path}:{line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },
    #[error("manifest entry {0} does not exist")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub frames: usize,
    pub size: usize,
    pub channels: usize,
    pub sprite_size: f64,
    /// Pixels per frame.
    pub sprite_speed: f64,
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
    /// Per-pixel Gaussian noise std.
    pub noise: f64,
    /// Target grating amplitude.
    pub texture_contrast: f64,
    /// Target grating drift, pixels per frame.
    pub drift: f64,
    /// Use the source background family for the target too.
    pub shared_background: bool,
    pub sprite: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            frames: 16,
            size: 64,
            channels: 3,
            sprite_size: 12.0,
            sprite_speed: 2.0,
            source_train: 400,
            target_train: 400,
            target_val: 200,
            noise: 0.02,
            texture_contrast: 0.25,
            drift: 0.2,
            shared_background: false,
            sprite: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn from_config(mut c: KvConfig) -> Result<Self, DataError> {
        let d = Self::default();
        let spec = Self {
            n_classes: c.take_or("n_classes", d.n_classes)?,
            frames: c.take_or("frames", d.frames)?,
            size: c.take_or("size", d.size)?,
            channels: c.take_or("channels", d.channels)?,
            sprite_size: c.take_or("sprite_size", d.sprite_size)?,
            sprite_speed: c.take_or("sprite_speed", d.sprite_speed)?,
            source_train: c.take_or("source_train", d.source_train)?,
            target_train: c.take_or("target_train", d.target_train)?,
            target_val: c.take_or("target_val", d.target_val)?,
            noise: c.take_or("noise", d.noise)?,
            texture_contrast: c.take_or("texture_contrast", d.texture_contrast)?,
            drift: c.take_or("drift", d.drift)?,
            shared_background: c.take_or("shared_background", d.shared_background)?,
            sprite: c.take_or("sprite", d.sprite)?,
            seed: c.take_or("seed", d.seed)?,
        };
        c.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_classes == 0 {
            return Err(invalid("n_classes", self.n_classes, "must be positive"));
        }
        if self.frames == 0 || self.size == 0 || self.channels == 0 {
            return Err(invalid("frames/size/channels", self.size, "must be positive"));
        }
        if !(self.sprite_size > 0.0 && self.sprite_size < self.size as f64) {
            return Err(invalid("sprite_size", self.sprite_size, "must lie in (0, size)"));
        }
        if !(self.noise >= 0.0 && self.texture_contrast >= 0.0 && self.sprite_speed >= 0.0 && self.drift >= 0.0) {
            return Err(invalid("noise", self.noise, "noise, contrast, speed and drift must be nonnegative"));
        }
        Ok(())
    }

    /// Unit direction of class `k`.
    pub fn direction(&self, k: usize) -> (f64, f64) {
        let a = std::f64::consts::TAU * k as f64 / self.n_classes as f64;
        (a.cos(), a.sin())
    }
}

/// One generated clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub id: String,
    pub label: usize,
    pub domain: Domain,
    pub video: VideoTensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source_train: Vec<SynthVideo>,
    pub target_train: Vec<SynthVideo>,
    pub target_val: Vec<SynthVideo>,
}

/// Fraction of the pixel interval `[i, i+1)` covered by a sprite spanning
/// `[start, start + len)` on a ring of circumference `size`.
fn coverage(i: usize, start: f64, len: f64, size: f64) -> f64 {
    let rel = (i as f64 - start).rem_euclid(size);
    let overlap = |a: f64, b: f64| (rel + 1.0).min(b) - rel.max(a);
    overlap(0.0, len).max(0.0) + overlap(size, size + len).max(0.0)
}

const SOURCE_PALETTE: [[f64; 3]; 4] = [[0.15, 0.25, 0.45], [0.1, 0.35, 0.4], [0.2, 0.2, 0.35], [0.25, 0.4, 0.5]];
const TARGET_PALETTE: [[f64; 3]; 4] = [[0.5, 0.3, 0.15], [0.45, 0.4, 0.1], [0.4, 0.2, 0.2], [0.55, 0.35, 0.25]];

fn palette_colour(palette: &[[f64; 3]; 4], rng: &mut ChaCha8Rng, c: usize) -> f64 {
    let base = palette[rng.random_range(0..palette.len())];
    (base[c % 3] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
}

enum Background {
    Gradient { from: Vec<f64>, to: Vec<f64>, angle: f64 },
    Grating { base: Vec<f64>, tint: Vec<f64>, freq: (f64, f64), phase: f64, drift: (f64, f64) },
}

impl Background {
    fn sample(spec: &SyntheticSpec, domain: Domain, rng: &mut ChaCha8Rng) -> Self {
        let ch = spec.channels;
        if domain == Domain::Source || spec.shared_background {
            let from = (0..ch).map(|c| palette_colour(&SOURCE_PALETTE, rng, c)).collect();
            let to = (0..ch).map(|c| palette_colour(&SOURCE_PALETTE, rng, c)).collect();
            Background::Gradient {
                from,
                to,
                angle: rng.random_range(0.0..std::f64::consts::TAU),
            }
        } else {
            let base = (0..ch).map(|c| palette_colour(&TARGET_PALETTE, rng, c)).collect();
            let tint = (0..ch).map(|_| rng.random_range(0.5..1.0)).collect();
            let orient: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let period: f64 = rng.random_range(6.0..12.0);
            let freq = (orient.cos() / period, orient.sin() / period);
            let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Background::Grating {
                base,
                tint,
                freq,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                drift: (spec.drift * heading.cos(), spec.drift * heading.sin()),
            }
        }
    }

    fn value(&self, spec: &SyntheticSpec, t: usize, c: usize, y: usize, x: usize) -> f64 {
        let n = spec.size as f64;
        match self {
            Background::Gradient { from, to, angle } => {
                let s = ((x as f64 - n / 2.0) * angle.cos() + (y as f64 - n / 2.0) * angle.sin()) / n + 0.5;
                let s = s.clamp(0.0, 1.0);
                from[c] * (1.0 - s) + to[c] * s
            }
            Background::Grating {
                base,
                tint,
                freq,
                phase,
                drift,
            } => {
                let (xs, ys) = (x as f64 - drift.0 * t as f64, y as f64 - drift.1 * t as f64);
                let arg = std::f64::consts::TAU * (freq.0 * xs + freq.1 * ys) + phase;
                base[c] + spec.texture_contrast * tint[c] * arg.sin()
            }
        }
    }
}

/// Renders one clip of class `label`.
pub fn render_video(spec: &SyntheticSpec, domain: Domain, label: usize, seed: u64) -> VideoTensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, ch, frames) = (spec.size, spec.channels, spec.frames);
    let bg = Background::sample(spec, domain, &mut rng);
    let colour: Vec<f64> = (0..ch).map(|_| rng.random_range(0.75..1.0)).collect();
    let start = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
    let (dy, dx) = spec.direction(label);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("nonnegative std");
    let mut values = Vec::with_capacity(frames * ch * n * n);
    let mut cov_y = vec![0.0; n];
    let mut cov_x = vec![0.0; n];
    for t in 0..frames {
        let sy = start.0 + dy * spec.sprite_speed * t as f64;
        let sx = start.1 + dx * spec.sprite_speed * t as f64;
        for i in 0..n {
            cov_y[i] = if spec.sprite { coverage(i, sy, spec.sprite_size, n as f64) } else { 0.0 };
            cov_x[i] = if spec.sprite { coverage(i, sx, spec.sprite_size, n as f64) } else { 0.0 };
        }
        for (c, &col) in colour.iter().enumerate() {
            for y in 0..n {
                for x in 0..n {
                    let a = cov_y[y] * cov_x[x];
                    let mut v = (1.0 - a) * bg.value(spec, t, c, y, x) + a * col;
                    if spec.noise > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    values.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    VideoTensor::new(frames, ch, n, n, values).expect("extents match the buffer")
}

fn split(spec: &SyntheticSpec, name: &str, domain: Domain, count: usize) -> Vec<SynthVideo> {
    (0..count)
        .map(|i| {
            let label = i % spec.n_classes;
            let seed = derive_seed(spec.seed, &format!("{name}/{i}"));
            SynthVideo {
                id: format!("{name}/{i:05}"),
                label,
                domain,
                video: render_video(spec, domain, label, seed),
            }
        })
        .collect()
}

/// Deterministic source-train / target-train / target-val clips.
pub fn generate_domain_pair(spec: &SyntheticSpec) -> DomainPair {
    DomainPair {
        source_train: split(spec, "source_train", Domain::Source, spec.source_train),
        target_train: split(spec, "target_train", Domain::Target, spec.target_train),
        target_val: split(spec, "target_val", Domain::Target, spec.target_val),
    }
}

pub fn write_video(w: &mut impl Write, v: &VideoTensor<f32>) -> io::Result<()> {
    w.write_all(VIDEO_MAGIC)?;
    w.write_all(&VIDEO_VERSION.to_le_bytes())?;
    for d in [v.t, v.c, v.h, v.w] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(v.values().len() * 4);
    for x in v.values() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn save_video(path: &Path, v: &VideoTensor<f32>) -> Result<(), DataError> {
    let mut f = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    write_video(&mut f, v).and_then(|_| f.flush()).map_err(io_err(path))
}

/// Parses a `.vten` buffer; `path` only labels errors.
pub fn decode_video(path: &Path, bytes: &[u8]) -> Result<VideoTensor<f32>, DataError> {
    if bytes.len() < 4 || &bytes[..4] != VIDEO_MAGIC {
        return Err(DataError::BadMagic(path.to_path_buf()));
    }
    let header = 4 + 4 * 5;
    if bytes.len() < header {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: header,
            got: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != VIDEO_VERSION {
        return Err(DataError::Version {
            path: path.to_path_buf(),
            version,
        });
    }
    let extents = [word(1), word(2), word(3), word(4)];
    let count = extents
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d as usize))
        .filter(|&n| n <= MAX_VIDEO_VALUES)
        .ok_or_else(|| DataError::ExtentOverflow {
            path: path.to_path_buf(),
            extents,
        })?;
    let payload = &bytes[header..];
    if payload.len() != count * 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: count * 4,
            got: payload.len(),
        });
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let [t, c, h, w] = extents.map(|d| d as usize);
    VideoTensor::new(t, c, h, w, values).map_err(|source| DataError::Video {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_video(path: &Path) -> Result<VideoTensor<f32>, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_video(path, &bytes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: Option<usize>,
    pub domain: String,
}

impl ManifestEntry {
    /// The path without its `.vten` extension, as used in pseudo-label files.
    pub fn video_id(&self) -> String {
        self.path.with_extension("").to_string_lossy().replace('\\', "/")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let bad = |line: usize, reason: String| DataError::Manifest {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let [p, label, domain] = cols[..] else {
                return Err(bad(i + 1, format!("expected 3 tab-separated columns, got {}", cols.len())));
            };
            let label: i64 = label.trim().parse().map_err(|_| bad(i + 1, format!("bad label `{label}`")))?;
            let label = match label {
                -1 => None,
                l if l >= 0 => Some(l as usize),
                l => return Err(bad(i + 1, format!("bad label `{l}`"))),
            };
            let entry = ManifestEntry {
                path: PathBuf::from(p),
                label,
                domain: domain.trim().to_string(),
            };
            if !root.join(&entry.path).is_file() {
                return Err(DataError::MissingFile(root.join(&entry.path)));
            }
            entries.push(entry);
        }
        let split = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self { split, root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut text = String::new();
        for e in &self.entries {
            let label = e.label.map_or(-1, |l| l as i64);
            text.push_str(&format!("{}\t{}\t{}\n", e.path.display(), label, e.domain));
        }
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load_videos(&self) -> Result<Vec<(String, VideoTensor<f32>)>, DataError> {
        self.entries
            .iter()
            .map(|e| Ok((e.video_id(), load_video(&self.root.join(&e.path))?)))
            .collect()
    }
}

pub const SOURCE_MANIFEST: &str = "source_train.tsv";
pub const TARGET_MANIFEST: &str = "target_train.tsv";
pub const VAL_MANIFEST: &str = "target_val.tsv";
/// Hidden ground truth of the unlabeled target split (for the oracle only).
pub const TARGET_TRUTH: &str = "target_train.truth.tsv";

/// Writes the clips and the manifests under `dir`.
pub fn write_domain_pair(pair: &DomainPair, dir: &Path) -> Result<(), DataError> {
    let parts: [(&str, &[SynthVideo], bool); 3] = [
        (SOURCE_MANIFEST, &pair.source_train, true),
        (TARGET_MANIFEST, &pair.target_train, false),
        (VAL_MANIFEST, &pair.target_val, true),
    ];
    for (manifest, videos, labelled) in parts {
        let mut entries = Vec::with_capacity(videos.len());
        for v in videos {
            let rel = PathBuf::from(format!("{}.vten", v.id));
            let full = dir.join(&rel);
            if let Some(parent) = full.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            save_video(&full, &v.video)?;
            entries.push(ManifestEntry {
                path: rel,
                label: labelled.then_some(v.label),
                domain: v.domain.tag().to_string(),
            });
        }
        let m = DatasetManifest {
            split: manifest.trim_end_matches(".tsv").to_string(),
            root: dir.to_path_buf(),
            entries,
        };
        m.save(&dir.join(manifest))?;
    }
    let truth: String = pair.target_train.iter().map(|v| format!("{}\t{}\n", v.id, v.label)).collect();
    let path = dir.join(TARGET_TRUTH);
    fs::write(&path, truth).map_err(io_err(&path))
}

pub fn load_truth(path: &Path) -> Result<Vec<(String, usize)>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (id, label) = l.split_once('\t').ok_or_else(|| DataError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected `id<TAB>label`".into(),
            })?;
            let label = label.trim().parse().map_err(|_| DataError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("bad label `{label}`"),
            })?;
            Ok((id.to_string(), label))
        })
        .collect()
}

/// Noisy stand-in for a zero-shot labeler:
/// `softmax(one_hot(label) / noise_temp + N(0, noise_std²))`.
pub fn oracle_probabilities(truth: &[(String, usize)], n_classes: usize, noise_temp: f64, noise_std: f64, seed: u64) -> Vec<PseudoLabelRecord> {
    assert!(noise_temp > 0.0 && noise_std >= 0.0, "oracle needs noise_temp > 0 and noise_std ≥ 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    truth
        .iter()
        .map(|(id, label)| {
            let logits: Vec<f64> = (0..n_classes)
                .map(|k| {
                    let hot = if k == *label { 1.0 / noise_temp } else { 0.0 };
                    let z: f64 = StandardNormal.sample(&mut rng);
                    hot + noise_std * z
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            PseudoLabelRecord {
                video_id: id.clone(),
                probs: e.iter().map(|v| v / s).collect(),
            }
        })
        .collect()
}
