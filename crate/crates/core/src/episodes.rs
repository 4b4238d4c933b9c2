//! Datasets, disjoint splits, episode sampling and segment frame sampling.
//!
//! A manifest is a JSON-lines file with one record per clip:
//!
//! ```text
//! {"id": "v001", "label": "wave", "split": "train", "feature_file": "features/v001.bin"}
//! {"id": "v002", "label": "jump", "split": "test", "frames": ["v002/0.jpg", "v002/1.jpg"]}
//! ```
//!
//! Feature files hold a little-endian `f32` matrix, row-major, preceded by
//! two little-endian `u32` dimensions (frames, feature width).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// One frame of a clip: either an image on disk or a raw feature vector.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameRef {
    Path(PathBuf),
    Feature(Arc<[f64]>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub label: String,
    pub frames: Vec<FrameRef>,
}

impl VideoSample {
    pub fn new(id: impl Into<String>, label: impl Into<String>, frames: Vec<FrameRef>) -> Result<Self> {
        let (id, label) = (id.into(), label.into());
        if label.is_empty() {
            return Err(Error::Input(format!("sample {id} has an empty label")));
        }
        if frames.is_empty() {
            return Err(Error::Input(format!("sample {id} has no frames")));
        }
        Ok(Self { id, label, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Train, Part::Val, Part::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Part {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Samples grouped by class within each part. Class sets of the parts are
/// pairwise disjoint; construct through [`DatasetSplit::new`] to enforce it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    parts: [BTreeMap<String, Vec<VideoSample>>; 3],
}

impl DatasetSplit {
    pub fn new(samples: impl IntoIterator<Item = (Part, VideoSample)>) -> Result<Self> {
        let mut parts: [BTreeMap<String, Vec<VideoSample>>; 3] = Default::default();
        for (part, s) in samples {
            parts[part as usize].entry(s.label.clone()).or_default().push(s);
        }
        let split = Self { parts };
        split.check_disjoint()?;
        Ok(split)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut shared = BTreeSet::new();
        for a in 0..3 {
            for b in a + 1..3 {
                for class in self.parts[a].keys() {
                    if self.parts[b].contains_key(class) {
                        shared.insert(class.clone());
                    }
                }
            }
        }
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::SplitViolation(shared.into_iter().collect()))
        }
    }

    pub fn part(&self, part: Part) -> &BTreeMap<String, Vec<VideoSample>> {
        &self.parts[part as usize]
    }

    pub fn classes(&self, part: Part) -> Vec<&str> {
        self.part(part).keys().map(String::as_str).collect()
    }

    pub fn num_samples(&self) -> usize {
        self.parts.iter().flat_map(|p| p.values()).map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Part, &VideoSample)> {
        Part::ALL
            .into_iter()
            .flat_map(move |p| self.part(p).values().flatten().map(move |s| (p, s)))
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRecord {
    id: String,
    label: String,
    split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_file: Option<String>,
}

/// Reads a JSON-lines manifest. Relative paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetSplit> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let record_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { record: record_no, message };
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.label.is_empty() {
            return Err(parse_err("empty label".into()));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(parse_err(format!("duplicate id {:?}", rec.id)));
        }
        let part: Part = rec.split.parse().map_err(|e: Error| parse_err(e.to_string()))?;
        let frames = match (rec.frames, rec.feature_file) {
            (Some(frames), None) => frames.into_iter().map(|f| FrameRef::Path(base.join(f))).collect(),
            (None, Some(file)) => read_feature_file(&base.join(file))?
                .into_iter()
                .map(|row| FrameRef::Feature(row.into()))
                .collect(),
            _ => return Err(parse_err("exactly one of `frames` or `feature_file` is required".into())),
        };
        let sample = VideoSample::new(rec.id, rec.label, frames).map_err(|e| parse_err(e.to_string()))?;
        samples.push((part, sample));
    }
    DatasetSplit::new(samples)
}

pub fn read_feature_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Input(format!("{}: truncated feature header", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 8 + rows * cols * 4 {
        return Err(Error::Input(format!(
            "{}: expected {rows}x{cols} f32 values, found {} payload bytes",
            path.display(),
            bytes.len() - 8
        )));
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(values.chunks(cols.max(1)).take(rows).map(<[f64]>::to_vec).collect())
}

pub fn write_feature_file(path: &Path, rows: &[&[f64]]) -> Result<()> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut buf = Vec::with_capacity(8 + rows.len() * cols * 4);
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for r in rows {
        if r.len() != cols {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        for &v in *r {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.jsonl` plus one feature file per clip under `dir`.
/// Clips referencing image paths keep their paths.
pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<PathBuf> {
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    let manifest = dir.join("manifest.jsonl");
    let file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    for (part, s) in split.iter() {
        let mut rec = ManifestRecord {
            id: s.id.clone(),
            label: s.label.clone(),
            split: part.to_string(),
            frames: None,
            feature_file: None,
        };
        let feats: Option<Vec<&[f64]>> = s
            .frames
            .iter()
            .map(|f| match f {
                FrameRef::Feature(v) => Some(&v[..]),
                FrameRef::Path(_) => None,
            })
            .collect();
        match feats {
            Some(rows) => {
                let rel = format!("features/{}.bin", s.id);
                write_feature_file(&dir.join(&rel), &rows)?;
                rec.feature_file = Some(rel);
            }
            None => {
                rec.frames = Some(
                    s.frames
                        .iter()
                        .map(|f| match f {
                            FrameRef::Path(p) => p.display().to_string(),
                            FrameRef::Feature(_) => String::new(),
                        })
                        .collect(),
                );
            }
        }
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// One N-way K-shot task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub class_set: Vec<String>,
    /// Class-major: the `K` shots of `class_set[0]` first, and so on.
    pub support: Vec<VideoSample>,
    pub queries: Vec<VideoSample>,
    /// Index into `class_set` of each query's true class.
    pub query_truth: Vec<usize>,
    pub seed: u64,
}

impl Episode {
    pub fn query_count(&self) -> usize {
        self.queries.len()
    }

    pub fn support_of(&self, class_idx: usize) -> &[VideoSample] {
        &self.support[class_idx * self.shot..(class_idx + 1) * self.shot]
    }
}

pub fn sample_episode(
    split: &DatasetSplit,
    part: Part,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    if way < 2 || shot < 1 || queries < 1 {
        return Err(Error::Parameter(format!(
            "episode needs way >= 2, shot >= 1, queries >= 1 (got {way}, {shot}, {queries})"
        )));
    }
    let pool = split.part(part);
    if pool.len() < way {
        return Err(Error::Capacity(format!(
            "{part} split has {} classes, {way}-way episode requested",
            pool.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let names: Vec<&String> = pool.keys().collect();
    let class_set: Vec<String> = names.choose_multiple(&mut rng, way).map(|s| (*s).clone()).collect();

    // Balanced query labels: class j % way for the j-th query, then shuffled.
    let mut query_truth: Vec<usize> = (0..queries).map(|j| j % way).collect();
    query_truth.shuffle(&mut rng);
    let mut per_class_queries = vec![0usize; way];
    for &c in &query_truth {
        per_class_queries[c] += 1;
    }

    let mut support = Vec::with_capacity(way * shot);
    let mut leftovers: Vec<Vec<&VideoSample>> = Vec::with_capacity(way);
    for (c, name) in class_set.iter().enumerate() {
        let samples = &pool[name];
        let need = shot + per_class_queries[c].max(1);
        if samples.len() < need {
            return Err(Error::Capacity(format!(
                "class {name:?} has {} samples, episode needs {need}",
                samples.len()
            )));
        }
        let mut order: Vec<&VideoSample> = samples.iter().collect();
        order.shuffle(&mut rng);
        support.extend(order[..shot].iter().map(|s| (*s).clone()));
        leftovers.push(order[shot..].to_vec());
    }
    let mut taken = vec![0usize; way];
    let queries = query_truth
        .iter()
        .map(|&c| {
            let s = leftovers[c][taken[c]].clone();
            taken[c] += 1;
            s
        })
        .collect();
    Ok(Episode { way, shot, class_set, support, queries, query_truth, seed })
}

/// Segment-based sparse sampling: the clip is cut into `m` equal segments and
/// one frame is taken from each. Deterministic mode takes segment centres,
/// `floor((2i + 1) * len / (2m))`; stochastic mode draws uniformly within each
/// segment. Clips shorter than `m` repeat frames, keeping the order.
pub fn frame_indices(len: usize, m: usize, deterministic: bool, rng: &mut impl Rng) -> Vec<usize> {
    assert!(len >= 1 && m >= 1, "need at least one frame and one segment");
    (0..m)
        .map(|i| {
            if deterministic {
                ((2 * i + 1) * len) / (2 * m)
            } else {
                let start = i * len / m;
                let end = ((i + 1) * len / m).max(start + 1);
                rng.gen_range(start..end)
            }
        })
        .collect()
}

pub fn sample_frames(v: &VideoSample, m: usize, deterministic: bool, seed: u64) -> Result<Vec<FrameRef>> {
    if m == 0 {
        return Err(Error::Parameter("frame count m must be >= 1".into()));
    }
    let mut rng = seed::rng(seed);
    Ok(frame_indices(v.len(), m, deterministic, &mut rng).into_iter().map(|i| v.frames[i].clone()).collect())
}

/// Parameters of the synthetic motif dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub d_raw: usize,
    /// Number of keyframe directions in a class motif.
    pub motif_len: usize,
    /// Raw frames per clip.
    pub frames: usize,
    pub noise_sigma: f64,
    /// Per-coordinate standard deviation of the static scene vector.
    pub scene_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            per_class: 20,
            d_raw: 32,
            motif_len: 4,
            frames: 64,
            noise_sigma: 0.05,
            scene_scale: 4.0,
            seed: 7,
        }
    }
}

/// Generates a disjoint train/val/test split of motif clips.
///
/// Each class owns `motif_len` random keyframe directions; the motif is the
/// piecewise-linear trajectory through them, spanning half the clip. A clip
/// places the motif at a random offset on top of a static scene vector and
/// adds i.i.d. Gaussian noise. The scene is drawn from a stream keyed by
/// `(class, offset)`, so noiseless clips of one class at one offset coincide.
/// Static appearance carries no class information across offsets; only the
/// motion does.
pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetSplit> {
    if cfg.num_classes < 3 {
        return Err(Error::Capacity(format!(
            "synthetic data needs at least 3 classes for train/val/test, got {}",
            cfg.num_classes
        )));
    }
    if cfg.per_class == 0 || cfg.d_raw == 0 || cfg.motif_len == 0 || cfg.frames < 2 {
        return Err(Error::Parameter("synthetic data needs per_class, d_raw, motif_len >= 1 and frames >= 2".into()));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.scene_scale >= 0.0) {
        return Err(Error::Parameter("noise and scene scales must be non-negative".into()));
    }
    let n = cfg.num_classes;
    let n_val = ((n as f64 * 0.2).round() as usize).max(1);
    let n_test = ((n as f64 * 0.2).round() as usize).max(1);
    let n_train = n - n_val - n_test;

    let mut rng = seed::derived_rng(cfg.seed, seed::stream::SYNTH, 0);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let span = (cfg.frames / 2).max(1);
    let max_offset = cfg.frames - span;
    let mut samples = Vec::with_capacity(n * cfg.per_class);
    for c in 0..n {
        let label = format!("action-{c:02}");
        let part = if c < n_train {
            Part::Train
        } else if c < n_train + n_val {
            Part::Val
        } else {
            Part::Test
        };
        let keyframes: Vec<Vec<f64>> =
            (0..cfg.motif_len).map(|_| (0..cfg.d_raw).map(|_| std_normal.sample(&mut rng)).collect()).collect();
        for k in 0..cfg.per_class {
            let offset = rng.gen_range(0..=max_offset);
            let mut scene_rng = seed::derived_rng(cfg.seed, seed::stream::SYNTH, ((c as u64) << 32) | offset as u64 | 1 << 63);
            let scene: Vec<f64> =
                (0..cfg.d_raw).map(|_| cfg.scene_scale * std_normal.sample(&mut scene_rng)).collect();
            let frames = (0..cfg.frames)
                .map(|t| {
                    let motif = motif_at(&keyframes, t as isize - offset as isize, span);
                    let row: Vec<f64> = (0..cfg.d_raw)
                        .map(|d| {
                            let noise = if cfg.noise_sigma > 0.0 {
                                cfg.noise_sigma * std_normal.sample(&mut rng)
                            } else {
                                0.0
                            };
                            let m = motif.as_ref().map_or(0.0, |m| m[d]);
                            // Stored at f32 precision so written datasets reload bit-exactly.
                            (scene[d] + m + noise) as f32 as f64
                        })
                        .collect();
                    FrameRef::Feature(row.into())
                })
                .collect();
            samples.push((part, VideoSample::new(format!("{label}-{k:03}"), label.clone(), frames)?));
        }
    }
    DatasetSplit::new(samples)
}

/// Position `t` along the motif trajectory, or `None` outside the motif span.
fn motif_at(keyframes: &[Vec<f64>], t: isize, span: usize) -> Option<Vec<f64>> {
    if t < 0 || t as usize >= span {
        return None;
    }
    if keyframes.len() == 1 {
        return Some(keyframes[0].clone());
    }
    let pos = t as f64 / (span.max(2) - 1) as f64 * (keyframes.len() - 1) as f64;
    let lo = (pos.floor() as usize).min(keyframes.len() - 2);
    let w = pos - lo as f64;
    Some(keyframes[lo].iter().zip(&keyframes[lo + 1]).map(|(a, b)| (1.0 - w) * a + w * b).collect())
}
