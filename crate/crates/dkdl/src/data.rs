//! Recordings, window splits, feature extraction and batching.
//!
//! Each recording is cut at `split_ratio` of its length. Test windows are
//! taken back to back from the tail; training windows come from the head
//! with a hop chosen so the requested count fits, overlapping when needed.
//! No test window shares a sample with a training window.

use std::path::{Path, PathBuf};

use dkdl_core::model::{INPUT_LEN, NUM_CLASSES};
use dkdl_core::signal::window_features;
use dkdl_core::synth::{synth_recording, SAMPLE_RATE};
use dkdl_core::Tensor;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{read, sha256_hex, write_atomic};
use crate::mat::read_mat;
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const FEATURE_MAGIC: &[u8; 4] = b"DKDW";

/// Drive-end 12 kHz recordings at 0 hp load, one file per class.
pub const DEFAULT_LABEL_MAP: &str = "\
# file glob\tlabel\tfault size (mm)
97.mat\t0\t-
118.mat\t1\t0.18
185.mat\t2\t0.36
222.mat\t3\t0.53
130.mat\t4\t0.18
197.mat\t5\t0.36
234.mat\t6\t0.53
105.mat\t7\t0.18
169.mat\t8\t0.36
209.mat\t9\t0.53
";

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Health", "Ball-0.18", "Ball-0.36", "Ball-0.53", "OR-0.18", "OR-0.36", "OR-0.53", "IR-0.18", "IR-0.36", "IR-0.53",
];

#[derive(Debug, Clone)]
pub struct LabelRule {
    pub pattern: glob::Pattern,
    pub label: usize,
    pub fault_size_mm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LabelMap {
    pub rules: Vec<LabelRule>,
}

impl LabelMap {
    /// Parses `glob <tab> label <tab> fault_mm` lines. Blank lines and lines
    /// starting with `#` are ignored; `-` marks a missing fault size.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::Data(format!("label map line {}: {m}", n + 1));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad("expected three tab-separated columns"));
            }
            let pattern = glob::Pattern::new(cols[0].trim()).map_err(|e| bad(&e.to_string()))?;
            let label: usize = cols[1].trim().parse().map_err(|_| bad("label is not an integer"))?;
            if label >= NUM_CLASSES {
                return Err(bad("label out of range"));
            }
            let fault_size_mm = match cols[2].trim() {
                "-" | "" => None,
                s => Some(s.parse().map_err(|_| bad("fault size is not a number"))?),
            };
            rules.push(LabelRule { pattern, label, fault_size_mm });
        }
        Ok(Self { rules })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// First rule whose glob matches the file name.
    pub fn lookup(&self, file_name: &str) -> Option<&LabelRule> {
        self.rules.iter().find(|r| r.pattern.matches(file_name))
    }
}

impl Default for LabelMap {
    fn default() -> Self {
        Self::parse(DEFAULT_LABEL_MAP).expect("built-in label map parses")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Directory { data_dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub variable: String,
    pub label: usize,
    pub fault_size_mm: Option<f64>,
    pub length: usize,
    pub train_hop: usize,
    pub train_offsets: Vec<usize>,
    pub test_offsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub source: Source,
    pub seed: u64,
    pub split_ratio: f64,
    pub window_raw: usize,
    pub fft_bins: usize,
    pub per_class: usize,
    pub entries: Vec<ManifestEntry>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    /// SHA-256 of this document with `hash` empty.
    pub hash: String,
}

impl Manifest {
    fn compute_hash(&self) -> String {
        let mut m = self.clone();
        m.hash.clear();
        sha256_hex(&serde_json::to_vec(&m).expect("manifest serializes"))
    }

    fn seal(mut self) -> Self {
        self.hash = self.compute_hash();
        self
    }

    pub fn verify_hash(&self) -> Result<()> {
        if self.compute_hash() != self.hash {
            return Err(Error::Data("manifest hash does not match its contents".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = crate::io::read_json(path)?;
        m.verify_hash()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

/// Train and test window counts per class for `per_class` windows.
pub fn split_counts(per_class: usize, split_ratio: f64) -> (usize, usize) {
    let train = ((per_class as f64 * split_ratio).round() as usize).min(per_class);
    (train, per_class - train)
}

fn cut_point(len: usize, split_ratio: f64) -> usize {
    ((len as f64 * split_ratio).floor() as usize).min(len)
}

/// Test windows that fit back to back after the cut.
pub fn test_capacity(len: usize, window: usize, split_ratio: f64) -> usize {
    (len - cut_point(len, split_ratio)) / window
}

/// Offsets of `n_train` head windows and `n_test` tail windows, plus the
/// training hop. `None` when they do not fit.
pub fn plan_windows(
    len: usize,
    window: usize,
    split_ratio: f64,
    n_train: usize,
    n_test: usize,
) -> Option<(usize, Vec<usize>, Vec<usize>)> {
    let cut = cut_point(len, split_ratio);
    if n_test > test_capacity(len, window, split_ratio) {
        return None;
    }
    let test = (0..n_test).map(|i| cut + i * window).collect();
    let (hop, train) = match n_train {
        0 => (0, Vec::new()),
        1 if cut >= window => (window, vec![0]),
        n => {
            if cut < window || (cut - window) / (n - 1) == 0 {
                return None;
            }
            let hop = ((cut - window) / (n - 1)).min(window);
            (hop, (0..n).map(|i| i * hop).collect())
        }
    };
    Some((hop, train, test))
}

/// Splits `total` into `parts` near-equal shares, larger shares first.
fn shares(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

struct Recording {
    file: String,
    variable: String,
    label: usize,
    fault_size_mm: Option<f64>,
    length: usize,
}

fn plan(
    source: Source,
    recordings: Vec<Recording>,
    per_class: usize,
    split_ratio: f64,
    window_raw: usize,
    seed: u64,
) -> Result<Manifest> {
    let mut missing = Vec::new();
    for c in 0..NUM_CLASSES {
        if !recordings.iter().any(|r| r.label == c) {
            missing.push(c);
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("no recordings for labels {missing:?}")));
    }
    let (n_train, n_test_target) = split_counts(per_class, split_ratio);
    // Equal test counts across classes, capped by the shortest class.
    let n_test = (0..NUM_CLASSES)
        .map(|c| {
            recordings
                .iter()
                .filter(|r| r.label == c)
                .map(|r| test_capacity(r.length, window_raw, split_ratio))
                .sum::<usize>()
        })
        .min()
        .unwrap_or(0)
        .min(n_test_target);
    if n_test < n_test_target {
        warn!("recordings hold only {n_test} non-overlapping test windows per class; requested {n_test_target}");
    }
    let mut entries = Vec::new();
    for c in 0..NUM_CLASSES {
        let files: Vec<&Recording> = recordings.iter().filter(|r| r.label == c).collect();
        let train_shares = shares(n_train, files.len());
        let mut test_left = n_test;
        for (r, n_tr) in files.into_iter().zip(train_shares) {
            let n_te = test_left.min(test_capacity(r.length, window_raw, split_ratio));
            test_left -= n_te;
            let (hop, train_offsets, test_offsets) = plan_windows(r.length, window_raw, split_ratio, n_tr, n_te)
                .ok_or_else(|| {
                    Error::Data(format!(
                        "{}: {} samples cannot hold {n_tr} training windows of {window_raw}",
                        r.file, r.length
                    ))
                })?;
            entries.push(ManifestEntry {
                file: r.file.clone(),
                variable: r.variable.clone(),
                label: r.label,
                fault_size_mm: r.fault_size_mm,
                length: r.length,
                train_hop: hop,
                train_offsets,
                test_offsets,
            });
        }
    }
    let count = |f: fn(&ManifestEntry) -> usize| -> Vec<usize> {
        (0..NUM_CLASSES).map(|c| entries.iter().filter(|e| e.label == c).map(f).sum()).collect()
    };
    let train_counts = count(|e| e.train_offsets.len());
    let test_counts = count(|e| e.test_offsets.len());
    Ok(Manifest {
        version: MANIFEST_VERSION,
        source,
        seed,
        split_ratio,
        window_raw,
        fft_bins: window_raw / 2,
        per_class,
        entries,
        train_counts,
        test_counts,
        hash: String::new(),
    }
    .seal())
}

fn synth_len(per_class: usize, window_raw: usize) -> usize {
    per_class * window_raw
}

fn synth_file(label: usize) -> String {
    format!("synthetic/class-{label}")
}

/// Manifest for one synthetic recording per class, long enough that every
/// window is disjoint at the requested ratio.
pub fn synth_manifest(per_class: usize, split_ratio: f64, window_raw: usize, seed: u64) -> Result<Manifest> {
    let recordings = (0..NUM_CLASSES)
        .map(|c| Recording {
            file: synth_file(c),
            variable: format!("synth_{:.0}Hz", SAMPLE_RATE),
            label: c,
            fault_size_mm: None,
            length: synth_len(per_class, window_raw),
        })
        .collect();
    plan(Source::Synthetic, recordings, per_class, split_ratio, window_raw, seed)
}

/// Picks the drive-end channel of a recording, preferring the variable
/// whose number matches the file name (`X097_DE_time` in `97.mat`).
fn pick_variable<'a>(file: &'a crate::mat::MatFile, stem: &str) -> Option<&'a str> {
    let mut de: Vec<&str> = file
        .arrays
        .iter()
        .filter(|a| a.name.ends_with("_DE_time"))
        .map(|a| a.name.as_str())
        .collect();
    de.sort_unstable();
    if let Ok(n) = stem.parse::<u32>() {
        let want = format!("X{n:03}_DE_time");
        if let Some(v) = de.iter().find(|v| **v == want) {
            return Some(v);
        }
    }
    de.first().copied()
}

fn read_signal(path: &Path, variable: Option<&str>) -> Result<(String, Vec<f64>)> {
    let mat = read_mat(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let name = match variable {
        Some(v) => v.to_owned(),
        None => pick_variable(&mat, stem)
            .ok_or_else(|| Error::Data(format!("{}: no drive-end (`*_DE_time`) variable", path.display())))?
            .to_owned(),
    };
    let arr = mat
        .get(&name)
        .ok_or_else(|| Error::Data(format!("{}: variable {name} not found", path.display())))?;
    if arr.rows != 1 && arr.cols != 1 {
        return Err(Error::Data(format!("{}: {name} is {}x{}, not a vector", path.display(), arr.rows, arr.cols)));
    }
    if !arr.data.iter().all(|v| v.is_finite()) {
        return Err(Error::Data(format!("{}: {name} contains non-finite samples", path.display())));
    }
    Ok((name, arr.data.clone()))
}

/// Scans `data_dir` recursively for `.mat` files and labels them with
/// `labels`. Files matching no rule are ignored.
pub fn build_manifest(
    data_dir: &Path,
    labels: &LabelMap,
    per_class: usize,
    split_ratio: f64,
    window_raw: usize,
    seed: u64,
) -> Result<Manifest> {
    if !data_dir.is_dir() {
        return Err(Error::Data(format!("{}: not a directory", data_dir.display())));
    }
    let pattern = format!("{}/**/*.mat", glob::Pattern::escape(&data_dir.to_string_lossy()));
    let mut files: Vec<PathBuf> = glob::glob(&pattern)
        .map_err(|e| Error::Data(e.to_string()))?
        .filter_map(|p| p.ok())
        .collect();
    files.sort();
    let mut recordings = Vec::new();
    for path in files {
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        let Some(rule) = labels.lookup(name) else {
            info!("ignoring unlabelled file {}", path.display());
            continue;
        };
        let (variable, signal) = read_signal(&path, None)?;
        if signal.len() < window_raw {
            warn!("{}: {} samples is shorter than one window; skipped", path.display(), signal.len());
            continue;
        }
        let rel = path.strip_prefix(data_dir).unwrap_or(&path).to_string_lossy().into_owned();
        recordings.push(Recording {
            file: rel,
            variable,
            label: rule.label,
            fault_size_mm: rule.fault_size_mm,
            length: signal.len(),
        });
    }
    plan(Source::Directory { data_dir: data_dir.to_owned() }, recordings, per_class, split_ratio, window_raw, seed)
}

/// Feature windows of one split. Values are rounded to `f32` precision so
/// the feature cache reproduces them exactly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    /// `(entry index, sample offset)` of each window.
    pub origins: Vec<(usize, usize)>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.features[i * INPUT_LEN..(i + 1) * INPUT_LEN]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; NUM_CLASSES];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Split,
    pub test: Split,
}

fn signal_for(manifest: &Manifest, entry: &ManifestEntry) -> Result<Vec<f64>> {
    match &manifest.source {
        Source::Synthetic => Ok(synth_recording(entry.label, entry.length, manifest.seed)),
        Source::Directory { data_dir } => {
            let path = data_dir.join(&entry.file);
            let (_, s) = read_signal(&path, Some(&entry.variable))?;
            if s.len() != entry.length {
                return Err(Error::Data(format!("{}: length changed since the manifest was built", path.display())));
            }
            Ok(s)
        }
    }
}

fn push_window(split: &mut Split, signal: &[f64], window: usize, entry_idx: usize, label: usize, offset: usize) -> Result<()> {
    let f = window_features(&signal[offset..offset + window])?;
    split.features.extend(f.into_iter().map(|v| v as f32 as f64));
    split.labels.push(label);
    split.origins.push((entry_idx, offset));
    Ok(())
}

impl Dataset {
    /// Computes features for every window in the manifest.
    pub fn from_manifest(manifest: Manifest) -> Result<Self> {
        let w = manifest.window_raw;
        let mut train = Split::default();
        let mut test = Split::default();
        for (i, e) in manifest.entries.iter().enumerate() {
            let signal = signal_for(&manifest, e)?;
            for &o in &e.train_offsets {
                push_window(&mut train, &signal, w, i, e.label, o)?;
            }
            for &o in &e.test_offsets {
                push_window(&mut test, &signal, w, i, e.label, o)?;
            }
        }
        Ok(Self { manifest, train, test })
    }

    /// Synthetic dataset with `per_class` windows per class.
    pub fn synthetic(per_class: usize, split_ratio: f64, seed: u64) -> Result<Self> {
        Self::from_manifest(synth_manifest(per_class, split_ratio, 2 * INPUT_LEN, seed)?)
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }

    fn cache_path(cache_dir: &Path, manifest: &Manifest, kind: SplitKind) -> PathBuf {
        let tag = match kind {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        };
        cache_dir.join(format!("features-{}-{tag}.bin", &manifest.hash[..16]))
    }

    /// Loads features from `cache_dir` when present, computing and storing
    /// them otherwise.
    pub fn load_cached(manifest: Manifest, cache_dir: &Path) -> Result<Self> {
        let paths = [SplitKind::Train, SplitKind::Test].map(|k| Self::cache_path(cache_dir, &manifest, k));
        if paths.iter().all(|p| p.exists()) {
            let mut splits = Vec::new();
            for (p, entries) in paths.iter().zip([true, false]) {
                let (count, dim, values) = decode_features(&read(p)?).map_err(|m| Error::Data(format!("{}: {m}", p.display())))?;
                let mut split = Split::default();
                for (i, e) in manifest.entries.iter().enumerate() {
                    let offsets = if entries { &e.train_offsets } else { &e.test_offsets };
                    for &o in offsets {
                        split.labels.push(e.label);
                        split.origins.push((i, o));
                    }
                }
                if count != split.len() || dim != INPUT_LEN {
                    return Err(Error::Data(format!("{}: cache does not match the manifest", p.display())));
                }
                split.features = values.into_iter().map(f64::from).collect();
                splits.push(split);
            }
            let test = splits.pop().unwrap();
            let train = splits.pop().unwrap();
            return Ok(Self { manifest, train, test });
        }
        let ds = Self::from_manifest(manifest)?;
        write_atomic(&paths[0], &encode_features(&ds.train))?;
        write_atomic(&paths[1], &encode_features(&ds.test))?;
        Ok(ds)
    }
}

pub fn encode_features(split: &Split) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + split.features.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(split.len() as u32).to_le_bytes());
    out.extend_from_slice(&(INPUT_LEN as u32).to_le_bytes());
    for &v in &split.features {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// `(count, dim, values)` of a feature blob.
pub fn decode_features(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f32>), String> {
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err("not a feature cache".into());
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != count * dim * 4 {
        return Err(format!("expected {} value bytes, found {}", count * dim * 4, body.len()));
    }
    Ok((count, dim, body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()))
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, 1, 1024]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Row indices into the split.
    pub indices: Vec<usize>,
}

pub struct Batches<'a> {
    split: &'a Split,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let mut data = Vec::with_capacity(indices.len() * INPUT_LEN);
        for &i in &indices {
            data.extend_from_slice(self.split.input(i));
        }
        let inputs = Tensor::new(&[indices.len(), 1, INPUT_LEN], data).expect("batch shape");
        let labels = indices.iter().map(|&i| self.split.labels[i]).collect();
        Some(Batch { inputs, labels, indices })
    }
}

/// Batches over `split` in order, or shuffled by `shuffle_seed`.
pub fn load_batches(split: &Split, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
    if split.is_empty() {
        return Err(Error::Data("split is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches { split, order, batch_size, pos: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_label_map_covers_all_classes() {
        let m = LabelMap::default();
        assert_eq!(m.rules.len(), NUM_CLASSES);
        assert_eq!(m.lookup("97.mat").unwrap().label, 0);
        assert_eq!(m.lookup("197.mat").unwrap().label, 5);
        assert_eq!(m.lookup("209.mat").unwrap().fault_size_mm, Some(0.53));
        assert!(m.lookup("98.mat").is_none());
    }

    #[test]
    fn label_map_errors_name_the_line() {
        let e = LabelMap::parse("a.mat\t1\t0.1\nb.mat 2 0.2\n").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        assert!(LabelMap::parse("a.mat\t10\t-").is_err());
    }

    #[test]
    fn counts_split_280_into_224_and_56() {
        assert_eq!(split_counts(280, 0.8), (224, 56));
        assert_eq!(split_counts(280, 1.0), (280, 0));
        assert_eq!(split_counts(7, 0.5), (4, 3));
    }

    #[test]
    fn planned_windows_never_overlap_across_splits() {
        for (len, ratio, n_train, n_test) in [(50_000, 0.8, 30, 4), (573_440, 0.8, 224, 56), (30_000, 0.5, 10, 7)] {
            let (_, train, test) = plan_windows(len, 2048, ratio, n_train, n_test).unwrap();
            let train_end = train.iter().map(|o| o + 2048).max().unwrap();
            assert!(train_end <= *test.first().unwrap());
            assert!(test.windows(2).all(|w| w[1] - w[0] >= 2048));
            assert!(test.last().unwrap() + 2048 <= len);
            assert_eq!((train.len(), test.len()), (n_train, n_test));
        }
        assert!(plan_windows(10_000, 2048, 0.8, 10, 2).is_none());
    }

    #[test]
    fn feature_blob_round_trips() {
        let split = Split { features: vec![0.5; 2 * INPUT_LEN], labels: vec![1, 2], origins: vec![(0, 0), (0, 1)] };
        let (count, dim, values) = decode_features(&encode_features(&split)).unwrap();
        assert_eq!((count, dim), (2, INPUT_LEN));
        assert!(values.iter().all(|&v| v == 0.5));
        assert!(decode_features(b"DKDW\x01\0\0\0").is_err());
    }
}
