//! Skeleton sequence files, manifests, and the per-sequence preprocessing
//! that brings every sample to a fixed `(C, T, J, E)` shape.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const ISKEL_MAGIC: &str = "ISKEL 1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: bad magic, expected {ISKEL_MAGIC:?}, found {found:?}")]
    BadMagic { line: usize, found: String },
    #[error("line {line}: bad header: {msg}")]
    BadHeader { line: usize, msg: String },
    #[error("line {line}: coordinate dimension must be 2 or 3, found {found}")]
    BadChannels { line: usize, found: usize },
    #[error("line {line}: expected {expected} values, found {found}")]
    Count {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: invalid number {token:?}")]
    BadNumber { line: usize, token: String },
    #[error("line {line}: non-finite value {token:?}")]
    NonFinite { line: usize, token: String },
    #[error("file is not valid UTF-8")]
    Utf8,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("sample file not found: {0}")]
    MissingSample(PathBuf),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("manifest line {line}: label {label} out of range for {num_classes} classes")]
    LabelRange {
        line: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("invalid sequence: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One interaction clip: coordinates laid out `(C, T, J, E)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub data: Tensor<f64>,
    pub label: usize,
    pub valid_frames: usize,
    pub source_id: String,
}

impl SkeletonSequence {
    pub fn new(data: Tensor<f64>, label: usize, source_id: impl Into<String>) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 4 {
            return Err(DataError::Invalid(format!(
                "expected a (C,T,J,E) array, got shape {shape:?}"
            )));
        }
        if !(2..=3).contains(&shape[0]) {
            return Err(DataError::Invalid(format!(
                "coordinate dimension must be 2 or 3, got {}",
                shape[0]
            )));
        }
        if shape[1..].contains(&0) {
            return Err(DataError::Invalid(format!("empty axis in shape {shape:?}")));
        }
        if !data.is_finite() {
            return Err(DataError::Invalid("non-finite coordinate".into()));
        }
        let valid_frames = shape[1];
        Ok(SkeletonSequence {
            data,
            label,
            valid_frames,
            source_id: source_id.into(),
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn joints(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn entities(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Parses the `.iskel` text format.
///
/// ```text
/// ISKEL 1
/// C T J E label
/// <C*T*J*E floats, t outermost, then j, then e, c innermost>
/// ```
pub fn parse_iskel(bytes: &[u8], source_id: &str) -> Result<SkeletonSequence> {
    let text = std::str::from_utf8(bytes).map_err(|_| DataError::Utf8)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (ln, magic) = lines.next().ok_or(DataError::BadMagic {
        line: 1,
        found: String::new(),
    })?;
    if magic.trim_end() != ISKEL_MAGIC {
        return Err(DataError::BadMagic {
            line: ln,
            found: magic.to_string(),
        });
    }
    let (ln, header) = lines.next().ok_or(DataError::BadHeader {
        line: 2,
        msg: "missing dimension line".into(),
    })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(DataError::BadHeader {
            line: ln,
            msg: format!(
                "expected 5 integers \"C T J E label\", found {}",
                fields.len()
            ),
        });
    }
    let mut dims = [0usize; 5];
    for (d, f) in dims.iter_mut().zip(&fields) {
        *d = f.parse().map_err(|_| DataError::BadHeader {
            line: ln,
            msg: format!("not a non-negative integer: {f:?}"),
        })?;
    }
    let [c, t, j, e, label] = dims;
    if !(2..=3).contains(&c) {
        return Err(DataError::BadChannels { line: ln, found: c });
    }
    if t == 0 || j == 0 || e == 0 {
        return Err(DataError::BadHeader {
            line: ln,
            msg: "T, J and E must be at least 1".into(),
        });
    }
    let expected = c * t * j * e;
    let mut raw = Vec::with_capacity(expected);
    let mut last_line = ln;
    for (ln, line) in lines {
        last_line = ln;
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| DataError::BadNumber {
                line: ln,
                token: tok.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    line: ln,
                    token: tok.to_string(),
                });
            }
            raw.push(v);
        }
    }
    if raw.len() != expected {
        return Err(DataError::Count {
            line: last_line,
            expected,
            found: raw.len(),
        });
    }
    // File order is (t, j, e, c); memory order is (c, t, j, e).
    let mut data = vec![0.0; expected];
    let mut idx = 0;
    for ti in 0..t {
        for ji in 0..j {
            for ei in 0..e {
                for ci in 0..c {
                    data[((ci * t + ti) * j + ji) * e + ei] = raw[idx];
                    idx += 1;
                }
            }
        }
    }
    let data = Tensor::from_vec(&[c, t, j, e], data).expect("length checked");
    Ok(SkeletonSequence {
        data,
        label,
        valid_frames: t,
        source_id: source_id.to_string(),
    })
}

/// Writes the `.iskel` text form: one line per `(t, j, e)` holding its `C` values.
pub fn serialize_iskel(seq: &SkeletonSequence) -> String {
    let (c, t, j, e) = (seq.channels(), seq.frames(), seq.joints(), seq.entities());
    let mut out = format!("{ISKEL_MAGIC}\n{c} {t} {j} {e} {}\n", seq.label);
    for ti in 0..t {
        for ji in 0..j {
            for ei in 0..e {
                for ci in 0..c {
                    if ci > 0 {
                        out.push(' ');
                    }
                    let _ = write!(out, "{}", seq.data.at(&[ci, ti, ji, ei]));
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn read_iskel(path: &Path) -> Result<SkeletonSequence> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_iskel(&bytes, &path.to_string_lossy())
}

pub fn write_iskel(path: &Path, seq: &SkeletonSequence) -> Result<()> {
    fs::write(path, serialize_iskel(seq)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Resamples the valid frame range to exactly `target` frames by linear interpolation.
pub fn resample_frames(seq: &SkeletonSequence, target: usize) -> SkeletonSequence {
    assert!(target >= 1, "target frame count must be at least 1");
    let (c, t, j, e) = (seq.channels(), seq.frames(), seq.joints(), seq.entities());
    let valid = seq.valid_frames.clamp(1, t);
    let mut data = vec![0.0; c * target * j * e];
    let plane = j * e;
    for ti in 0..target {
        let pos = if target == 1 {
            0.0
        } else {
            ti as f64 * (valid - 1) as f64 / (target - 1) as f64
        };
        let lo = (pos.floor() as usize).min(valid - 1);
        let hi = (lo + 1).min(valid - 1);
        let frac = pos - lo as f64;
        for ci in 0..c {
            let src = seq.data.data();
            let a = &src[(ci * t + lo) * plane..(ci * t + lo + 1) * plane];
            let b = &src[(ci * t + hi) * plane..(ci * t + hi + 1) * plane];
            let dst = &mut data[(ci * target + ti) * plane..(ci * target + ti + 1) * plane];
            for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                *d = if frac == 0.0 { x } else { x + frac * (y - x) };
            }
        }
    }
    SkeletonSequence {
        data: Tensor::from_vec(&[c, target, j, e], data).expect("sized above"),
        label: seq.label,
        valid_frames: target,
        source_id: seq.source_id.clone(),
    }
}

/// Subtracts the mean joint position of the first frame from every frame.
pub fn center_on_first_frame(seq: &SkeletonSequence) -> SkeletonSequence {
    let (c, t, j, e) = (seq.channels(), seq.frames(), seq.joints(), seq.entities());
    let plane = j * e;
    let mut out = seq.clone();
    for ci in 0..c {
        let first = &seq.data.data()[ci * t * plane..ci * t * plane + plane];
        let mean = first.iter().sum::<f64>() / plane as f64;
        for v in &mut out.data.data_mut()[ci * t * plane..(ci + 1) * t * plane] {
            *v -= mean;
        }
    }
    out
}

/// Padding that makes `n` a multiple of `w`: `(w - n mod w) mod w`.
pub fn compute_padding(n: usize, w: usize) -> std::result::Result<usize, String> {
    if w == 0 {
        return Err("window length must be at least 1".into());
    }
    Ok((w - n % w) % w)
}

/// Split membership of a manifest entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Fold(usize),
    Other(String),
}

impl SplitTag {
    pub fn parse(s: &str) -> Self {
        match s {
            "train" => SplitTag::Train,
            "val" => SplitTag::Val,
            "test" => SplitTag::Test,
            other => {
                let digits = other.strip_prefix("fold").unwrap_or(other);
                match digits.parse() {
                    Ok(k) => SplitTag::Fold(k),
                    Err(_) => SplitTag::Other(other.to_string()),
                }
            }
        }
    }

    pub fn as_string(&self) -> String {
        match self {
            SplitTag::Train => "train".into(),
            SplitTag::Val => "val".into(),
            SplitTag::Test => "test".into(),
            SplitTag::Fold(k) => format!("fold{k}"),
            SplitTag::Other(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: SplitTag,
}

/// Sample list with labels and split tags.
///
/// Lines are `relative/path.iskel <label> <split-or-fold-tag>`; `#` starts a
/// comment. An optional `# classes: a b c` comment declares class names and
/// fixes the class count; otherwise it is one more than the largest label.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub samples: Vec<ManifestEntry>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

/// Held-out fold: indices into the manifest's samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn parse_manifest(text: &str, root: &Path) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    let mut class_names: Option<Vec<String>> = None;
    let mut lines_of = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let (body, comment) = match raw.find('#') {
            Some(p) => (&raw[..p], Some(&raw[p + 1..])),
            None => (raw, None),
        };
        if let Some(names) = comment.and_then(|c| c.trim().strip_prefix("classes:")) {
            class_names = Some(names.split_whitespace().map(str::to_string).collect());
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 {
            return Err(DataError::Manifest {
                line: line_no,
                msg: format!(
                    "expected \"path label split\", found {} fields",
                    fields.len()
                ),
            });
        }
        let label = fields[1].parse().map_err(|_| DataError::Manifest {
            line: line_no,
            msg: format!("label is not a non-negative integer: {:?}", fields[1]),
        })?;
        samples.push(ManifestEntry {
            path: PathBuf::from(fields[0]),
            label,
            split: SplitTag::parse(fields[2]),
        });
        lines_of.push(line_no);
    }
    let (num_classes, class_names) = match class_names {
        Some(names) => (names.len(), names),
        None => {
            let k = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
            (k, (0..k).map(|i| format!("class{i}")).collect())
        }
    };
    for (s, &line) in samples.iter().zip(&lines_of) {
        if s.label >= num_classes {
            return Err(DataError::LabelRange {
                line,
                label: s.label,
                num_classes,
            });
        }
    }
    let mut seen = HashSet::new();
    for s in &samples {
        if !seen.insert(&s.path) {
            log::warn!("manifest lists {} more than once", s.path.display());
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        samples,
        num_classes,
        class_names,
    })
}

/// Reads a manifest and checks that every referenced sample exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest = parse_manifest(&text, &root)?;
    for s in &manifest.samples {
        let p = manifest.resolve(s);
        if !p.is_file() {
            return Err(DataError::MissingSample(p));
        }
    }
    Ok(manifest)
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples carrying `tag`, in manifest order.
    pub fn split(&self, tag: &SplitTag) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| &self.samples[i].split == tag)
            .collect()
    }

    /// `k` disjoint, exhaustive test folds.
    ///
    /// When every sample carries a `foldN` tag the tags decide membership;
    /// otherwise samples are dealt round-robin in manifest order.
    pub fn folds(&self, k: usize) -> Vec<Fold> {
        assert!(k >= 1, "fold count must be at least 1");
        let tagged: Option<Vec<usize>> = self
            .samples
            .iter()
            .map(|s| match s.split {
                SplitTag::Fold(f) => Some(f),
                _ => None,
            })
            .collect();
        let assign: Vec<usize> = match tagged {
            Some(tags) => {
                let distinct: BTreeMap<usize, usize> = tags
                    .iter()
                    .copied()
                    .collect::<std::collections::BTreeSet<_>>()
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| (t, i % k))
                    .collect();
                tags.iter().map(|t| distinct[t]).collect()
            }
            None => (0..self.samples.len()).map(|i| i % k).collect(),
        };
        (0..k)
            .map(|f| Fold {
                test: (0..assign.len()).filter(|&i| assign[i] == f).collect(),
                train: (0..assign.len()).filter(|&i| assign[i] != f).collect(),
            })
            .collect()
    }

    pub fn load(&self, index: usize) -> Result<SkeletonSequence> {
        let entry = &self.samples[index];
        let mut seq = read_iskel(&self.resolve(entry))?;
        seq.label = entry.label;
        Ok(seq)
    }
}

pub fn serialize_manifest(m: &DatasetManifest) -> String {
    let mut out = format!("# classes: {}\n", m.class_names.join(" "));
    for s in &m.samples {
        let _ = writeln!(
            out,
            "{} {} {}",
            s.path.display(),
            s.label,
            s.split.as_string()
        );
    }
    out
}
