//! Run configuration, per-fold stage functions and the on-disk run layout.
//!
//! Layout of a run directory:
//!
//! ```text
//! <out>/config.toml              effective configuration
//! <out>/data/                    generated dataset
//! <out>/fold<f>/encoder.enc      PCA + GMM for held-out fold f
//! <out>/fold<f>/au.lstm          action-unit network
//! <out>/fold<f>/siamese.lstm     Siamese backbone
//! <out>/fold<f>/*_log.csv        per-epoch training logs
//! <out>/eval/                    scores, ROC curves and reports
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::action_unit::{self, classify_accuracy, train_au, AuConfig, AuEpochLog, AuNetwork, EncodedSegment};
use crate::encoding::{EncoderConfig, FvEncoder};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::siamese::{self, make_pairs, train_siamese, Monitor, SiameseConfig, SiameseEpochLog, SiameseNetwork, VideoFeatures};
use crate::synth_data::{generate_dataset, Dataset, GenConfig, NUM_FOLDS};
use crate::tensor_file::{TensorFile, ENCODER_HEADER, LSTM_HEADER};

pub const THREADS_ENV: &str = "SKILLEVAL_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_subjects: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub d_raw: usize,
    pub noise_level: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        DataConfig {
            n_subjects: g.n_subjects,
            frames_min: g.frames_min,
            frames_max: g.frames_max,
            d_raw: g.d_raw,
            noise_level: g.noise_level,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Signed-power exponent of the pooled cosine baseline.
    pub alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { alpha: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub au: AuConfig,
    pub siamese: SiameseConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: GenConfig::default().seed,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            au: AuConfig::default(),
            siamese: SiameseConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            n_subjects: self.data.n_subjects,
            frames_min: self.data.frames_min,
            frames_max: self.data.frames_max,
            d_raw: self.data.d_raw,
            noise_level: self.data.noise_level,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // The config is echoed as TOML, whose integers are signed 64-bit.
        if i64::try_from(self.seed).is_err() {
            return Err(Error::config("seed", format!("must be <= {}, got {}", i64::MAX, self.seed)));
        }
        self.gen_config()
            .validate()
            .map_err(|e| match e {
                Error::Config { field, message } => Error::Config {
                    field: format!("data.{field}"),
                    message,
                },
                other => other,
            })?;
        self.encoder.validate()?;
        if self.encoder.d_pca > self.data.d_raw {
            return Err(Error::config(
                "encoder.d_pca",
                format!("must be <= data.d_raw ({}), got {}", self.data.d_raw, self.encoder.d_pca),
            ));
        }
        self.au.validate()?;
        self.siamese.validate()?;
        let a = self.eval.alpha;
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::config("eval.alpha", format!("must be in (0, 1], got {a}")));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field,
                message: format!("{message} (in {})", path.display()),
            },
            other => other,
        })
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to strings, so `siamese.positive_term=squared`
    /// works without quotes.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like section.key=value"))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut slot = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = slot
                    .as_table_mut()
                    .ok_or_else(|| Error::config(key, "is not a config section"))?;
                if !table.contains_key(*part) {
                    return Err(Error::config(key, "unknown config key"));
                }
                if i + 1 == parts.len() {
                    let old = &table[*part];
                    // Integers given for float fields are accepted.
                    let value = match (old, value.clone()) {
                        (toml::Value::Float(_), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
                        (_, v) => v,
                    };
                    table.insert((*part).to_string(), value);
                    break;
                }
                slot = table.get_mut(*part).expect("checked above");
            }
        }
        let cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("override", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Worker threads for fold-level parallelism: `SKILLEVAL_THREADS` if set,
/// otherwise the available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn generate(config: &RunConfig) -> Result<Dataset> {
    config.validate()?;
    generate_dataset(&config.gen_config())
}

fn check_fold(fold: usize) -> Result<()> {
    if fold >= NUM_FOLDS {
        return Err(Error::Invalid(format!("fold must be in 0..{NUM_FOLDS}, got {fold}")));
    }
    Ok(())
}

/// Subjects used for training when `fold` is held out.
pub fn train_subjects(dataset: &Dataset, fold: usize) -> BTreeSet<usize> {
    dataset
        .manifest
        .folds
        .iter()
        .filter(|(f, _)| **f != fold)
        .flat_map(|(_, s)| s.iter().copied())
        .collect()
}

/// Fits PCA and the GMM on every frame of the training folds.
pub fn fit_encoder(dataset: &Dataset, config: &RunConfig, fold: usize) -> Result<FvEncoder> {
    check_fold(fold)?;
    let subjects = train_subjects(dataset, fold);
    let segs: Vec<_> = dataset
        .segments
        .iter()
        .filter(|s| subjects.contains(&s.subject_id))
        .collect();
    let rows: usize = segs.iter().map(|s| s.frames.len()).sum();
    let mut frames = Array2::zeros((rows, dataset.manifest.d_raw));
    let mut at = 0;
    for s in segs {
        let n = s.frames.len();
        frames.slice_mut(s![at..at + n, ..]).assign(&s.frames.view());
        at += n;
    }
    let mut rng = rng_for(config.seed, "gmm", fold as u64);
    let (encoder, fit) = FvEncoder::fit(frames.view(), &config.encoder, &mut rng)?;
    if fit.reinitialized > 0 {
        log::warn!("fold {fold}: {} GMM components were reinitialized", fit.reinitialized);
    }
    Ok(encoder)
}

/// Encoded segments of one fold split.
pub struct FoldSegments {
    pub train: Vec<EncodedSegment>,
    pub heldout: Vec<EncodedSegment>,
}

impl FoldSegments {
    pub fn train_refs(&self) -> Vec<&EncodedSegment> {
        self.train.iter().collect()
    }

    pub fn heldout_refs(&self) -> Vec<&EncodedSegment> {
        self.heldout.iter().collect()
    }
}

/// Encodes every segment, keeping every `stride`-th frame.
pub fn encode_fold(dataset: &Dataset, encoder: &FvEncoder, fold: usize, stride: usize) -> Result<FoldSegments> {
    check_fold(fold)?;
    let subjects = train_subjects(dataset, fold);
    let mut out = FoldSegments {
        train: Vec::new(),
        heldout: Vec::new(),
    };
    for seg in &dataset.segments {
        let frames = seg.frames.view();
        let sampled = frames.slice(s![..;stride.max(1), ..]);
        let enc = EncodedSegment {
            subject: seg.subject_id,
            activity: seg.activity_id,
            position: seg.position,
            unit_class: seg.unit_class,
            fv: encoder.encode_sequence(sampled)?,
        };
        if subjects.contains(&seg.subject_id) {
            out.train.push(enc);
        } else {
            out.heldout.push(enc);
        }
    }
    Ok(out)
}

pub fn train_action_units(
    config: &RunConfig,
    fold: usize,
    segments: &FoldSegments,
    fv_dim: usize,
) -> Result<(AuNetwork, Vec<AuEpochLog>)> {
    let au = &config.au;
    let net = AuNetwork::init(
        fv_dim,
        au.hidden,
        au.layers,
        crate::synth_data::NUM_CLASSES,
        &mut rng_for(config.seed, "au-init", fold as u64),
    )?;
    train_au(
        net,
        &segments.train_refs(),
        &segments.heldout_refs(),
        au,
        &mut rng_for(config.seed, "au-shuffle", fold as u64),
    )
}

/// Groups segments into videos (by subject and activity, ordered by
/// position) and extracts their action-unit feature lists.
pub fn video_features(net: &AuNetwork, segments: &[EncodedSegment]) -> Result<Vec<VideoFeatures>> {
    let mut groups: BTreeMap<(usize, usize), Vec<&EncodedSegment>> = BTreeMap::new();
    for s in segments {
        groups.entry((s.subject, s.activity)).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|((subject, activity), mut segs)| {
            segs.sort_by_key(|s| s.position);
            let feats = action_unit::extract_video_features(net, &segs)?;
            let mut features = Array2::zeros((feats.len(), net.feature_dim()));
            for (mut row, f) in features.rows_mut().into_iter().zip(&feats) {
                row.assign(&f.values);
            }
            Ok(VideoFeatures {
                id: crate::synth_data::video_id(subject, activity),
                subject,
                activity,
                features,
            })
        })
        .collect()
}

pub fn train_siamese_stage(
    config: &RunConfig,
    fold: usize,
    train_videos: &[VideoFeatures],
    heldout_videos: &[VideoFeatures],
) -> Result<(SiameseNetwork, Vec<SiameseEpochLog>)> {
    let sc = &config.siamese;
    let input_dim = train_videos
        .first()
        .map(|v| v.features.ncols())
        .ok_or_else(|| Error::Invalid("no training videos".into()))?;
    let net = SiameseNetwork::init(
        input_dim,
        sc.hidden,
        sc.layers,
        &mut rng_for(config.seed, "siamese-init", fold as u64),
    )?;
    let pairs = make_pairs(train_videos)?;
    let heldout_pairs = if heldout_videos.len() >= 2 {
        Some(make_pairs(heldout_videos)?)
    } else {
        None
    };
    let monitor = heldout_pairs.as_ref().map(|p| Monitor {
        videos: heldout_videos,
        pairs: p,
    });
    train_siamese(
        net,
        train_videos,
        &pairs,
        sc,
        monitor,
        &mut rng_for(config.seed, "siamese-shuffle", fold as u64),
    )
}

/// Models trained with `fold` held out.
#[derive(Debug, Clone)]
pub struct FoldModels {
    pub fold: usize,
    pub train_subjects: BTreeSet<usize>,
    pub encoder: FvEncoder,
    pub au: AuNetwork,
    pub siamese: Option<SiameseNetwork>,
}

/// Everything produced by one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub models: FoldModels,
    pub heldout_subjects: Vec<usize>,
    pub heldout_segments: usize,
    pub heldout_videos: Vec<VideoFeatures>,
    pub au_accuracy: f64,
    pub au_log: Vec<AuEpochLog>,
    pub siamese_log: Vec<SiameseEpochLog>,
}

/// Encoder, action-unit network and (optionally) Siamese network for one
/// held-out fold, trained in that order with the earlier stages frozen.
pub fn run_fold(dataset: &Dataset, config: &RunConfig, fold: usize, with_siamese: bool) -> Result<FoldRun> {
    check_fold(fold)?;
    let encoder = fit_encoder(dataset, config, fold)?;
    let segments = encode_fold(dataset, &encoder, fold, config.au.frame_stride)?;
    let (au, au_log) = train_action_units(config, fold, &segments, encoder.fv_dim())?;
    let au_accuracy = classify_accuracy(&au, &segments.heldout_refs())?;
    let heldout_videos = video_features(&au, &segments.heldout)?;
    let (siamese, siamese_log) = if with_siamese {
        let train_videos = video_features(&au, &segments.train)?;
        let (net, log) = train_siamese_stage(config, fold, &train_videos, &heldout_videos)?;
        (Some(net), log)
    } else {
        (None, Vec::new())
    };
    let heldout_subjects = dataset.manifest.folds.get(&fold).cloned().unwrap_or_default();
    Ok(FoldRun {
        models: FoldModels {
            fold,
            train_subjects: train_subjects(dataset, fold),
            encoder,
            au,
            siamese,
        },
        heldout_subjects,
        heldout_segments: segments.heldout.len(),
        heldout_videos,
        au_accuracy,
        au_log,
        siamese_log,
    })
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn fold_dir(&self, fold: usize) -> PathBuf {
        self.root.join(format!("fold{fold}"))
    }

    pub fn encoder(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("encoder.enc")
    }

    pub fn au(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("au.lstm")
    }

    pub fn siamese(&self, fold: usize) -> PathBuf {
        self.fold_dir(fold).join("siamese.lstm")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn write_with_fold(mut file: TensorFile, header: &str, fold: usize, path: &Path) -> Result<()> {
    file.push_meta("fold", fold);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    file.save(header, path)
}

fn read_with_fold(header: &str, what: &str, fold: usize, path: &Path) -> Result<TensorFile> {
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "{what} checkpoint missing: {} (run `train --stage {what}` first)",
            path.display()
        )));
    }
    let file = TensorFile::load(header, path)?;
    let stored = file.meta("fold").and_then(|v| v.parse::<usize>().ok());
    if stored != Some(fold) {
        return Err(Error::format(
            path,
            format!("checkpoint was trained for fold {stored:?}, expected fold {fold}"),
        ));
    }
    Ok(file)
}

pub fn save_encoder(layout: &RunLayout, fold: usize, encoder: &FvEncoder) -> Result<()> {
    write_with_fold(encoder.to_tensor_file(), ENCODER_HEADER, fold, &layout.encoder(fold))
}

pub fn load_encoder(layout: &RunLayout, fold: usize) -> Result<FvEncoder> {
    let path = layout.encoder(fold);
    FvEncoder::from_tensor_file(&read_with_fold(ENCODER_HEADER, "encoder", fold, &path)?, &path)
}

pub fn save_au(layout: &RunLayout, fold: usize, net: &AuNetwork) -> Result<()> {
    write_with_fold(net.to_tensor_file(), LSTM_HEADER, fold, &layout.au(fold))
}

pub fn load_au(layout: &RunLayout, fold: usize) -> Result<AuNetwork> {
    let path = layout.au(fold);
    AuNetwork::from_tensor_file(&read_with_fold(LSTM_HEADER, "au", fold, &path)?, &path)
}

pub fn save_siamese(layout: &RunLayout, fold: usize, net: &SiameseNetwork) -> Result<()> {
    write_with_fold(net.to_tensor_file(), LSTM_HEADER, fold, &layout.siamese(fold))
}

pub fn load_siamese(layout: &RunLayout, fold: usize) -> Result<SiameseNetwork> {
    let path = layout.siamese(fold);
    SiameseNetwork::from_tensor_file(&read_with_fold(LSTM_HEADER, "siamese", fold, &path)?, &path)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn au_log_path(layout: &RunLayout, fold: usize) -> PathBuf {
    layout.fold_dir(fold).join("au_log.csv")
}

pub fn siamese_log_path(layout: &RunLayout, fold: usize) -> PathBuf {
    layout.fold_dir(fold).join("siamese_log.csv")
}

pub fn write_au_log(layout: &RunLayout, fold: usize, log: &[AuEpochLog]) -> Result<()> {
    write_text(&au_log_path(layout, fold), &action_unit::epoch_log_csv(log))
}

pub fn write_siamese_log(layout: &RunLayout, fold: usize, log: &[SiameseEpochLog]) -> Result<()> {
    write_text(&siamese_log_path(layout, fold), &siamese::epoch_log_csv(log))
}
