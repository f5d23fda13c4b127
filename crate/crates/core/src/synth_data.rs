//! Synthetic stand-in for a segmented cooking-activity corpus.
//!
//! Ten activities are fixed ordered sequences of action units (48 classes in
//! total). Every subject performs every activity once; each action unit
//! becomes one segment whose frames follow a class-specific smooth trajectory
//! in descriptor space, shifted by a per-subject offset and perturbed by
//! i.i.d. Gaussian noise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor_file::write_row;

pub const NUM_CLASSES: usize = 48;
pub const NUM_ACTIVITIES: usize = 10;
pub const NUM_FOLDS: usize = 4;

/// Label for frames that belong to no action unit. It completes the 48-class
/// vocabulary but never occurs inside an activity grammar.
pub const BACKGROUND_UNIT: &str = "background";

pub const FSEQ_MAGIC: &str = "SKILLEVAL-FSEQ v1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Scale of the per-subject additive offset applied to every frame.
pub const SUBJECT_SPREAD: f64 = 0.1;
/// Amplitude of the temporal component of each class template.
pub const TEMPLATE_AMPLITUDE: f64 = 0.8;
/// Minimum distance between any two class templates at equal normalized time.
pub const MIN_TEMPLATE_SEPARATION: f64 = 1.5;

const GRAMMARS: [(&str, &[&str]); NUM_ACTIVITIES] = [
    (
        "Coffee",
        &["take cup", "pour coffee", "pour milk", "pour sugar", "spoon sugar", "stir coffee"],
    ),
    ("Milk", &["take cup", "spoon powder", "pour milk", "stir milk"]),
    (
        "Juice",
        &[
            "take squeezer",
            "take glass",
            "take plate",
            "take knife",
            "cut orange",
            "squeeze orange",
            "pour juice",
        ],
    ),
    (
        "Tea",
        &["take cup", "add teabag", "pour water", "spoon sugar", "pour sugar", "stir tea"],
    ),
    ("Cereals", &["take bowl", "pour cereals", "pour milk", "stir cereals"]),
    (
        "Fried Egg",
        &[
            "pour oil",
            "butter pan",
            "take egg",
            "crack egg",
            "fry egg",
            "take plate",
            "add salt and pepper",
            "put egg onto plate",
        ],
    ),
    (
        "Pancakes",
        &[
            "take bowl",
            "crack egg",
            "spoon flour",
            "pour flour",
            "pour milk",
            "stir dough",
            "pour oil",
            "butter pan",
            "pour dough into pan",
            "fry pancake",
            "take plate",
            "put pancake onto plate",
        ],
    ),
    (
        "Salad",
        &[
            "take plate",
            "take knife",
            "peel fruit",
            "cut fruit",
            "take bowl",
            "put fruit to bowl",
            "stir fruit",
        ],
    ),
    (
        "Sandwich",
        &[
            "take plate",
            "take knife",
            "cut bun",
            "take butter",
            "smear butter",
            "take topping",
            "add topping",
            "put bun together",
        ],
    ),
    (
        "Scrambled Egg",
        &[
            "pour oil",
            "butter pan",
            "take bowl",
            "crack egg",
            "stir egg",
            "pour egg into pan",
            "stir fry egg",
            "add salt and pepper",
            "take plate",
            "put egg onto plate",
        ],
    ),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionUnitClass {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityGrammar {
    pub id: usize,
    pub name: String,
    pub unit_sequence: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub classes: Vec<ActionUnitClass>,
    pub activities: Vec<ActivityGrammar>,
}

impl Catalog {
    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn activity(&self, name: &str) -> Option<&ActivityGrammar> {
        self.activities.iter().find(|a| a.name == name)
    }

    pub fn total_units(&self) -> usize {
        self.activities.iter().map(|a| a.unit_sequence.len()).sum()
    }

    fn validate(&self, path: &Path) -> Result<()> {
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::format(path, format!("class ids must be 0..n in order, found {} at {i}", c.id)));
            }
            if self.classes[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::format(path, format!("duplicate class name `{}`", c.name)));
            }
        }
        for (i, a) in self.activities.iter().enumerate() {
            if a.id != i || a.unit_sequence.is_empty() {
                return Err(Error::format(path, format!("malformed activity `{}`", a.name)));
            }
            if let Some(bad) = a.unit_sequence.iter().find(|&&u| u >= self.classes.len()) {
                return Err(Error::format(path, format!("activity `{}` references unknown class {bad}", a.name)));
            }
        }
        Ok(())
    }
}

/// Ten activity grammars and the 48-class unit vocabulary. Unit ids are
/// assigned in order of first appearance; shared units map to one id.
pub fn default_catalog() -> Catalog {
    let mut classes: Vec<ActionUnitClass> = Vec::with_capacity(NUM_CLASSES);
    let mut activities = Vec::with_capacity(NUM_ACTIVITIES);
    for (aid, (name, units)) in GRAMMARS.iter().enumerate() {
        let unit_sequence = units
            .iter()
            .map(|u| match classes.iter().position(|c| c.name == *u) {
                Some(id) => id,
                None => {
                    classes.push(ActionUnitClass {
                        id: classes.len(),
                        name: (*u).to_string(),
                    });
                    classes.len() - 1
                }
            })
            .collect();
        activities.push(ActivityGrammar {
            id: aid,
            name: (*name).to_string(),
            unit_sequence,
        });
    }
    classes.push(ActionUnitClass {
        id: classes.len(),
        name: BACKGROUND_UNIT.to_string(),
    });
    debug_assert_eq!(classes.len(), NUM_CLASSES);
    Catalog { classes, activities }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_subjects: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub d_raw: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_subjects: 8,
            frames_min: 20,
            frames_max: 60,
            d_raw: 16,
            noise_level: 0.0,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < NUM_FOLDS {
            return Err(Error::config("n_subjects", format!("must be >= {NUM_FOLDS}, got {}", self.n_subjects)));
        }
        if self.frames_min < 2 {
            return Err(Error::config("frames_min", format!("must be >= 2, got {}", self.frames_min)));
        }
        if self.frames_max < self.frames_min {
            return Err(Error::config(
                "frames_max",
                format!("must be >= frames_min ({}), got {}", self.frames_min, self.frames_max),
            ));
        }
        if self.d_raw < 2 {
            return Err(Error::config("d_raw", format!("must be >= 2, got {}", self.d_raw)));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::config("noise_level", format!("must be finite and >= 0, got {}", self.noise_level)));
        }
        Ok(())
    }
}

/// T×D matrix of per-frame descriptors, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence(Array2<f64>);

impl FeatureSequence {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Invalid("feature sequence needs at least one frame".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature sequence contains non-finite values".into()));
        }
        Ok(FeatureSequence(data))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub subject_id: usize,
    pub activity_id: usize,
    pub unit_class: usize,
    pub position: usize,
    pub frames: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub subject: usize,
    pub activity: usize,
    pub unit_class: usize,
    pub position: usize,
    pub path: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub d_raw: usize,
    pub generator: GenConfig,
    pub classes: Vec<ActionUnitClass>,
    pub activities: Vec<ActivityGrammar>,
    pub folds: BTreeMap<usize, Vec<usize>>,
    pub segments: Vec<SegmentEntry>,
}

impl DatasetManifest {
    pub fn catalog(&self) -> Catalog {
        Catalog {
            classes: self.classes.clone(),
            activities: self.activities.clone(),
        }
    }

    pub fn fold_of(&self, subject: usize) -> Option<usize> {
        self.folds
            .iter()
            .find(|(_, subjects)| subjects.contains(&subject))
            .map(|(f, _)| *f)
    }

    pub fn subjects(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.folds.values().flatten().copied().collect();
        all.sort_unstable();
        all
    }
}

/// One recorded activity: the segments of one subject performing one activity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VideoRef {
    pub subject: usize,
    pub activity: usize,
    /// Indices into [`Dataset::segments`], ordered by position.
    pub segments: Vec<usize>,
}

impl VideoRef {
    pub fn id(&self) -> String {
        video_id(self.subject, self.activity)
    }
}

pub fn video_id(subject: usize, activity: usize) -> String {
    format!("s{subject:02}_a{activity:02}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub segments: Vec<SegmentRecord>,
}

impl Dataset {
    pub fn num_videos(&self) -> usize {
        self.videos().len()
    }

    pub fn videos(&self) -> Vec<VideoRef> {
        let mut map: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for (i, s) in self.segments.iter().enumerate() {
            map.entry((s.subject_id, s.activity_id)).or_default().push((s.position, i));
        }
        map.into_iter()
            .map(|((subject, activity), mut segs)| {
                segs.sort_unstable();
                VideoRef {
                    subject,
                    activity,
                    segments: segs.into_iter().map(|(_, i)| i).collect(),
                }
            })
            .collect()
    }

    pub fn fold_of(&self, subject: usize) -> usize {
        self.manifest.fold_of(subject).unwrap_or(usize::MAX)
    }

    /// SHA-256 over the manifest and every feature file as written to disk.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(render_manifest(&self.manifest).as_bytes());
        for seg in &self.segments {
            hasher.update(render_feature_file(&seg.frames).as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Deterministic class templates: for class `c`, dimension `j`, normalized
/// time `tau` in [0,1],
/// `base[c,j] + A * sin(2*pi*freq[c,j]*tau + phase[c,j])`.
#[derive(Debug, Clone)]
pub struct ClassTemplates {
    base: Array2<f64>,
    freq: Array2<f64>,
    phase: Array2<f64>,
}

impl ClassTemplates {
    pub fn for_seed(seed: u64, d_raw: usize) -> Self {
        let mut rng = rng_for(seed, "templates", 0);
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let mut last = None;
        for _ in 0..256 {
            let base = Array2::from_shape_simple_fn((NUM_CLASSES, d_raw), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            });
            let freq = Array2::from_shape_simple_fn((NUM_CLASSES, d_raw), || rng.random_range(0.5..1.5));
            let phase =
                Array2::from_shape_simple_fn((NUM_CLASSES, d_raw), || rng.random_range(0.0..std::f64::consts::TAU));
            let t = ClassTemplates { base, freq, phase };
            if t.min_separation(&grid) >= MIN_TEMPLATE_SEPARATION {
                return t;
            }
            last = Some(t);
        }
        // Only reachable for very small d_raw where the bound cannot be met.
        last.expect("at least one template draw")
    }

    pub fn dim(&self) -> usize {
        self.base.ncols()
    }

    pub fn value_at(&self, class: usize, tau: f64) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        self.fill_at(class, tau, out.view_mut().into_slice().expect("contiguous"));
        out
    }

    fn fill_at(&self, class: usize, tau: f64, out: &mut [f64]) {
        let b = self.base.row(class);
        let f = self.freq.row(class);
        let p = self.phase.row(class);
        for j in 0..out.len() {
            out[j] = b[j] + TEMPLATE_AMPLITUDE * (std::f64::consts::TAU * f[j] * tau + p[j]).sin();
        }
    }

    pub fn min_separation(&self, taus: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for &tau in taus {
            let vals: Vec<Array1<f64>> = (0..NUM_CLASSES).map(|c| self.value_at(c, tau)).collect();
            for a in 0..NUM_CLASSES {
                for b in (a + 1)..NUM_CLASSES {
                    best = best.min(euclidean(vals[a].view(), vals[b].view()));
                }
            }
        }
        best
    }

    /// Class whose template at `tau` is nearest to `frame` (lowest id on ties).
    pub fn nearest(&self, frame: ArrayView1<f64>, tau: f64) -> usize {
        let mut buf = vec![0.0; self.dim()];
        let mut best = (f64::INFINITY, 0);
        for c in 0..NUM_CLASSES {
            self.fill_at(c, tau, &mut buf);
            let d: f64 = frame.iter().zip(&buf).map(|(x, t)| (x - t) * (x - t)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }
}

fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Normalized time of frame `t` in a segment of `len` frames.
pub fn normalized_time(t: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        t as f64 / (len - 1) as f64
    }
}

pub fn generate_dataset(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let catalog = default_catalog();
    let templates = ClassTemplates::for_seed(config.seed, config.d_raw);
    let d = config.d_raw;

    let mut folds: BTreeMap<usize, Vec<usize>> = (0..NUM_FOLDS).map(|f| (f, Vec::new())).collect();
    let mut segments = Vec::new();
    let mut entries = Vec::new();
    for subject in 0..config.n_subjects {
        folds.get_mut(&(subject % NUM_FOLDS)).expect("fold").push(subject);
        // The offset consumes the head of the subject stream; frames follow.
        let mut rng = rng_for(config.seed, "subject", subject as u64);
        let offset = Array1::from_shape_simple_fn(d, || {
            let z: f64 = StandardNormal.sample(&mut rng);
            SUBJECT_SPREAD * z
        });
        for grammar in &catalog.activities {
            for (position, &unit) in grammar.unit_sequence.iter().enumerate() {
                let len = rng.random_range(config.frames_min..=config.frames_max);
                let mut data = Array2::zeros((len, d));
                for (t, mut row) in data.rows_mut().into_iter().enumerate() {
                    let slice = row.as_slice_mut().expect("row-major");
                    templates.fill_at(unit, normalized_time(t, len), slice);
                    for (v, o) in slice.iter_mut().zip(offset.iter()) {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += o + config.noise_level * z;
                    }
                }
                entries.push(SegmentEntry {
                    subject,
                    activity: grammar.id,
                    unit_class: unit,
                    position,
                    path: format!("segments/s{subject:02}_a{:02}_p{position:02}.fseq", grammar.id),
                    frames: len,
                });
                segments.push(SegmentRecord {
                    subject_id: subject,
                    activity_id: grammar.id,
                    unit_class: unit,
                    position,
                    frames: FeatureSequence::new(data)?,
                });
            }
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            seed: config.seed,
            d_raw: d,
            generator: config.clone(),
            classes: catalog.classes,
            activities: catalog.activities,
            folds,
            segments: entries,
        },
        segments,
    })
}

/// Fraction of frames whose nearest class template (at the frame's normalized
/// time) is the segment's own class.
pub fn nearest_template_accuracy(dataset: &Dataset) -> f64 {
    let templates = ClassTemplates::for_seed(dataset.manifest.seed, dataset.manifest.d_raw);
    let mut hits = 0usize;
    let mut total = 0usize;
    for seg in &dataset.segments {
        let len = seg.frames.len();
        for (t, row) in seg.frames.view().rows().into_iter().enumerate() {
            if templates.nearest(row, normalized_time(t, len)) == seg.unit_class {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Bisects `noise_level` until [`nearest_template_accuracy`] is within `tol`
/// of `target`. Returns the noise level and the accuracy it produced.
pub fn noise_for_template_accuracy(base: &GenConfig, target: f64, tol: f64) -> Result<(f64, f64)> {
    let eval = |noise: f64| -> Result<f64> {
        let cfg = GenConfig {
            noise_level: noise,
            ..base.clone()
        };
        Ok(nearest_template_accuracy(&generate_dataset(&cfg)?))
    };
    let (mut lo, mut hi) = (0.0, 0.25);
    while eval(hi)? > target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Numeric("noise calibration diverged".into()));
        }
    }
    let mut best = (hi, eval(hi)?);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let acc = eval(mid)?;
        best = (mid, acc);
        if (acc - target).abs() <= tol {
            break;
        }
        if acc > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

pub fn render_feature_file(seq: &FeatureSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{FSEQ_MAGIC} T={} D={}", seq.len(), seq.dim());
    for row in seq.view().rows() {
        match row.as_slice() {
            Some(s) => write_row(&mut out, s),
            None => write_row(&mut out, &row.to_vec()),
        }
    }
    out
}

pub fn parse_feature_file(text: &str, path: &Path) -> Result<FeatureSequence> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty feature file"))?;
    if !text.ends_with('\n') {
        return Err(Error::format(path, "truncated: missing final newline"));
    }
    let rest = header
        .strip_prefix(FSEQ_MAGIC)
        .ok_or_else(|| Error::format(path, format!("bad header `{header}`")))?;
    let mut t = None;
    let mut d = None;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("T=") {
            t = v.parse::<usize>().ok();
        } else if let Some(v) = tok.strip_prefix("D=") {
            d = v.parse::<usize>().ok();
        } else {
            return Err(Error::format(path, format!("unexpected header token `{tok}`")));
        }
    }
    let (t, d) = match (t, d) {
        (Some(t), Some(d)) if t >= 1 && d >= 1 => (t, d),
        _ => return Err(Error::format(path, format!("malformed header `{header}`"))),
    };
    let mut data = Vec::with_capacity(t * d);
    for row in 0..t {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("truncated: expected {t} rows, found {row}")))?;
        let before = data.len();
        for tok in line.split(' ') {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::format(path, format!("row {row}: bad number `{tok}`")))?;
            data.push(v);
        }
        if data.len() - before != d {
            return Err(Error::format(
                path,
                format!("row {row}: expected {d} values, found {}", data.len() - before),
            ));
        }
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::format(path, format!("trailing data after {t} rows")));
    }
    let arr = Array2::from_shape_vec((t, d), data).map_err(|e| Error::format(path, e.to_string()))?;
    FeatureSequence::new(arr).map_err(|e| Error::format(path, e.to_string()))
}

pub fn render_manifest(manifest: &DatasetManifest) -> String {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    s.push('\n');
    s
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let seg_dir = dir.join("segments");
    std::fs::create_dir_all(&seg_dir).map_err(|e| Error::io(&seg_dir, e))?;
    for (entry, seg) in dataset.manifest.segments.iter().zip(&dataset.segments) {
        let path = dir.join(&entry.path);
        std::fs::write(&path, render_feature_file(&seg.frames)).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, render_manifest(&dataset.manifest)).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(&mpath, "manifest file missing"),
        _ => Error::io(&mpath, e),
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    validate_manifest(&manifest, &mpath)?;

    let mut segments = Vec::with_capacity(manifest.segments.len());
    for entry in &manifest.segments {
        let path: PathBuf = dir.join(&entry.path);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::format(&path, "segment file referenced by manifest is missing"),
            _ => Error::io(&path, e),
        })?;
        let frames = parse_feature_file(&text, &path)?;
        if frames.dim() != manifest.d_raw {
            return Err(Error::format(
                &path,
                format!("descriptor dimension {} does not match manifest d_raw {}", frames.dim(), manifest.d_raw),
            ));
        }
        if frames.len() != entry.frames {
            return Err(Error::format(
                &path,
                format!("frame count {} does not match manifest ({})", frames.len(), entry.frames),
            ));
        }
        segments.push(SegmentRecord {
            subject_id: entry.subject,
            activity_id: entry.activity,
            unit_class: entry.unit_class,
            position: entry.position,
            frames,
        });
    }
    Ok(Dataset { manifest, segments })
}

fn validate_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    m.catalog().validate(path)?;
    let mut seen = std::collections::BTreeSet::new();
    for subjects in m.folds.values() {
        for &s in subjects {
            if !seen.insert(s) {
                return Err(Error::format(path, format!("subject {s} appears in more than one fold")));
            }
        }
    }
    for e in &m.segments {
        if !seen.contains(&e.subject) {
            return Err(Error::format(path, format!("segment `{}` has subject {} outside every fold", e.path, e.subject)));
        }
        if e.activity >= m.activities.len() || e.unit_class >= m.classes.len() {
            return Err(Error::format(path, format!("segment `{}` references unknown ids", e.path)));
        }
        if e.frames < 1 {
            return Err(Error::format(path, format!("segment `{}` has no frames", e.path)));
        }
    }
    Ok(())
}
