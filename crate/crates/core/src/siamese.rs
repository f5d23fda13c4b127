//! Siamese LSTM: one stacked LSTM embeds both videos of a pair; the pair is
//! scored by the Euclidean distance between the two final hidden states and
//! trained with a margin-based contrastive loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{roc_auc, ScoredPair};
use crate::lstm::{Adam, AdamConfig, ForwardCache, Parameters, StackedLstm};
use crate::seed::Rng;
use crate::tensor_file::{TensorFile, LSTM_HEADER};

pub const ROLE: &str = "siamese";

/// Form of the same-activity term of the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveTermForm {
    /// `y * D`
    PaperLinear,
    /// `y * D^2`
    Squared,
}

impl std::str::FromStr for PositiveTermForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_linear" => Ok(PositiveTermForm::PaperLinear),
            "squared" => Ok(PositiveTermForm::Squared),
            other => Err(Error::config(
                "siamese.positive_term",
                format!("unknown form `{other}` (expected paper_linear or squared)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiameseConfig {
    pub hidden: usize,
    pub layers: usize,
    pub margin: f64,
    pub positive_term: PositiveTermForm,
    pub epochs: usize,
    /// Pairs per optimizer step; the loss is summed over the batch.
    pub pair_batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        SiameseConfig {
            hidden: 128,
            layers: 2,
            margin: 1.0,
            positive_term: PositiveTermForm::PaperLinear,
            epochs: 10,
            pair_batch: 256,
            lr: 1e-3,
            clip_norm: 5.0,
        }
    }
}

impl SiameseConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }

    pub fn loss(&self) -> ContrastiveLoss {
        ContrastiveLoss {
            margin: self.margin,
            form: self.positive_term,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("siamese.hidden", "must be >= 1"));
        }
        if self.layers == 0 {
            return Err(Error::config("siamese.layers", "must be >= 1"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("siamese.margin", "must be finite and > 0"));
        }
        if self.pair_batch == 0 {
            return Err(Error::config("siamese.pair_batch", "must be >= 1"));
        }
        self.adam().validate("siamese")
    }
}

/// `y * P(D) + (1 - y) * max(0, m - D)^2` with `P(D) = D` or `D^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveLoss {
    pub margin: f64,
    pub form: PositiveTermForm,
}

impl ContrastiveLoss {
    /// Loss and its derivative with respect to `distance`.
    pub fn eval(&self, distance: f64, label: u8) -> (f64, f64) {
        if label == 1 {
            match self.form {
                PositiveTermForm::PaperLinear => (distance, 1.0),
                PositiveTermForm::Squared => (distance * distance, 2.0 * distance),
            }
        } else {
            let gap = (self.margin - distance).max(0.0);
            (gap * gap, -2.0 * gap)
        }
    }
}

pub fn contrastive_loss(distance: f64, label: u8, config: &SiameseConfig) -> (f64, f64) {
    config.loss().eval(distance, label)
}

/// Final top-layer hidden state of the Siamese LSTM for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityVector(pub Array1<f64>);

impl ActivityVector {
    pub fn distance(&self, other: &ActivityVector) -> f64 {
        euclidean(&self.0, &other.0)
    }
}

fn euclidean(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Both branches run this one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseNetwork {
    pub backbone: StackedLstm,
}

impl SiameseNetwork {
    pub fn init(input_dim: usize, hidden: usize, layers: usize, rng: &mut Rng) -> Result<Self> {
        Ok(SiameseNetwork {
            backbone: StackedLstm::init(input_dim, &vec![hidden; layers], rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn embed(&self, features: ArrayView2<f64>) -> Result<ActivityVector> {
        if features.nrows() == 0 {
            return Err(Error::Invalid("cannot embed an empty action-unit list".into()));
        }
        let cache = self.backbone.forward(features)?;
        Ok(ActivityVector(cache.last_output().to_owned()))
    }

    /// Instructional-video branch.
    pub fn embed_instructional(&self, features: ArrayView2<f64>) -> Result<ActivityVector> {
        self.embed(features)
    }

    /// User-video branch.
    pub fn embed_user(&self, features: ArrayView2<f64>) -> Result<ActivityVector> {
        self.embed(features)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::with_role(ROLE);
        self.backbone.write_tensors(&mut f, "");
        f
    }

    pub fn from_tensor_file(f: &TensorFile, path: &Path) -> Result<Self> {
        if f.role.as_deref() != Some(ROLE) {
            return Err(Error::format(path, format!("expected role `{ROLE}`, found {:?}", f.role)));
        }
        Ok(SiameseNetwork {
            backbone: StackedLstm::read_tensors(f, "", path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().save(LSTM_HEADER, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(LSTM_HEADER, path)?, path)
    }
}

impl Parameters for SiameseNetwork {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        self.backbone.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.backbone.tensors_mut()
    }
}

/// Action-unit feature list of one video, N × d.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub id: String,
    pub subject: usize,
    pub activity: usize,
    pub features: Array2<f64>,
}

/// Borrowed instructional/user pair with its label (1 = same activity).
#[derive(Debug, Clone, Copy)]
pub struct VideoPair<'a> {
    pub instructional: ArrayView2<'a, f64>,
    pub user: ArrayView2<'a, f64>,
    pub label: u8,
}

pub fn pair_distance(net: &SiameseNetwork, pair: &VideoPair<'_>) -> Result<f64> {
    let a = net.embed_instructional(pair.instructional)?;
    let b = net.embed_user(pair.user)?;
    Ok(a.distance(&b))
}

/// Ordered pair of indices into a video table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairIndex {
    pub inst: usize,
    pub user: usize,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PairIndex>,
    pub positives: usize,
    pub negatives: usize,
}

impl PairSet {
    pub fn view<'a>(&self, videos: &'a [VideoFeatures], k: usize) -> VideoPair<'a> {
        let p = self.pairs[k];
        VideoPair {
            instructional: videos[p.inst].features.view(),
            user: videos[p.user].features.view(),
            label: p.label,
        }
    }
}

/// Every ordered pair `(i, u)` with `i != u`; label 1 iff the activities match.
pub fn make_pairs(videos: &[VideoFeatures]) -> Result<PairSet> {
    if videos.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 videos to form pairs, got {}", videos.len())));
    }
    let mut pairs = Vec::with_capacity(videos.len() * (videos.len() - 1));
    let mut positives = 0;
    for (i, a) in videos.iter().enumerate() {
        for (u, b) in videos.iter().enumerate() {
            if i == u {
                continue;
            }
            let label = u8::from(a.activity == b.activity);
            positives += usize::from(label);
            pairs.push(PairIndex { inst: i, user: u, label });
        }
    }
    let negatives = pairs.len() - positives;
    log::debug!("pairs: {} total, {positives} positive, {negatives} negative", pairs.len());
    Ok(PairSet {
        pairs,
        positives,
        negatives,
    })
}

/// Summed contrastive loss over `pairs` and its gradient with respect to the
/// shared parameters. Each distinct video is embedded once; the gradient of
/// every pair flows into both of its videos, so the shared-weight gradient is
/// the sum of both branches' contributions.
pub fn pair_loss(
    net: &SiameseNetwork,
    videos: &[VideoFeatures],
    pairs: &[PairIndex],
    loss: ContrastiveLoss,
) -> Result<(f64, SiameseNetwork)> {
    let mut caches: BTreeMap<usize, ForwardCache> = BTreeMap::new();
    for p in pairs {
        for v in [p.inst, p.user] {
            let video = videos
                .get(v)
                .ok_or_else(|| Error::Invalid(format!("pair references unknown video {v}")))?;
            if !caches.contains_key(&v) {
                if video.features.nrows() == 0 {
                    return Err(Error::Invalid(format!("video {} has no action units", video.id)));
                }
                caches.insert(v, net.backbone.forward(video.features.view())?);
            }
        }
    }
    let hidden = net.backbone.output_dim();
    let mut d_embed: BTreeMap<usize, Array1<f64>> =
        caches.keys().map(|&v| (v, Array1::zeros(hidden))).collect();
    let mut total = 0.0;
    for p in pairs {
        let si = caches[&p.inst].last_output();
        let su = caches[&p.user].last_output();
        let diff = &si - &su;
        let dist = diff.dot(&diff).sqrt();
        let (l, dl) = loss.eval(dist, p.label);
        total += l;
        if dist > 0.0 && dl != 0.0 {
            let g = diff * (dl / dist);
            *d_embed.get_mut(&p.inst).expect("cached") += &g;
            *d_embed.get_mut(&p.user).expect("cached") -= &g;
        }
    }
    let mut grads = net.zeros_like();
    for (v, cache) in &caches {
        let t_len = cache.len();
        let mut d_top = Array2::zeros((t_len, hidden));
        d_top.row_mut(t_len - 1).assign(&d_embed[v]);
        net.backbone.backward(cache, d_top.view(), &mut grads.backbone)?;
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiameseEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_auc: Option<f64>,
}

pub fn epoch_log_csv(log: &[SiameseEpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,heldout_auc\n");
    for e in log {
        let auc = e.heldout_auc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, auc);
    }
    out
}

/// Scores every pair with `-D`.
pub fn score_pairs(net: &SiameseNetwork, videos: &[VideoFeatures], pairs: &PairSet) -> Result<Vec<ScoredPair>> {
    let embeddings = videos
        .iter()
        .map(|v| net.embed(v.features.view()))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs
        .pairs
        .iter()
        .map(|p| ScoredPair {
            inst_id: videos[p.inst].id.clone(),
            user_id: videos[p.user].id.clone(),
            label: p.label,
            score: -embeddings[p.inst].distance(&embeddings[p.user]),
        })
        .collect())
}

pub fn pairs_csv(scored: &[ScoredPair]) -> String {
    let mut out = String::from("inst_video_id,user_video_id,label,distance\n");
    for s in scored {
        let _ = writeln!(out, "{},{},{},{}", s.inst_id, s.user_id, s.label, -s.score);
    }
    out
}

/// Held-out videos and their pairs, used for per-epoch monitoring only.
pub struct Monitor<'a> {
    pub videos: &'a [VideoFeatures],
    pub pairs: &'a PairSet,
}

pub fn train_siamese(
    mut net: SiameseNetwork,
    videos: &[VideoFeatures],
    pairs: &PairSet,
    config: &SiameseConfig,
    monitor: Option<Monitor<'_>>,
    rng: &mut Rng,
) -> Result<(SiameseNetwork, Vec<SiameseEpochLog>)> {
    config.validate()?;
    if pairs.pairs.is_empty() {
        return Err(Error::Invalid("no training pairs".into()));
    }
    if pairs.positives == 0 || pairs.negatives == 0 {
        return Err(Error::Invalid(format!(
            "training pairs need both labels (positives={}, negatives={})",
            pairs.positives, pairs.negatives
        )));
    }
    if let Some(v) = videos.iter().find(|v| v.features.ncols() != net.input_dim()) {
        return Err(Error::dim(format!("features of video {}", v.id), net.input_dim(), v.features.ncols()));
    }
    let loss = config.loss();
    let mut adam = Adam::new(&net, config.adam());
    let mut order = pairs.pairs.clone();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.pair_batch) {
            let (l, mut grads) = pair_loss(&net, videos, chunk, loss)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite contrastive loss at epoch {epoch}")));
            }
            epoch_loss += l;
            adam.step(&mut net, &mut grads)?;
        }
        let heldout_auc = match &monitor {
            Some(m) => Some(roc_auc(&score_pairs(&net, m.videos, m.pairs)?)?.auc),
            None => None,
        };
        let entry = SiameseEpochLog {
            epoch,
            train_loss: epoch_loss / order.len() as f64,
            heldout_auc,
        };
        log::info!("siamese epoch {epoch}: loss={:.5} heldout_auc={:?}", entry.train_loss, entry.heldout_auc);
        log.push(entry);
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn video(id: &str, activity: usize, n: usize, d: usize, phase: f64) -> VideoFeatures {
        VideoFeatures {
            id: id.into(),
            subject: 0,
            activity,
            features: Array2::from_shape_fn((n, d), |(i, j)| ((i * d + j) as f64 * 0.41 + phase).cos()),
        }
    }

    #[test]
    fn loss_cases() {
        let cfg = SiameseConfig::default();
        assert_eq!(contrastive_loss(1.0, 0, &cfg), (0.0, 0.0));
        assert_eq!(contrastive_loss(2.5, 0, &cfg), (0.0, 0.0));
        assert_eq!(contrastive_loss(0.7, 1, &cfg).0, 0.7);
        let (l, d) = contrastive_loss(0.4, 0, &cfg);
        assert!((l - 0.36).abs() < 1e-12 && (d + 1.2).abs() < 1e-12);
        let sq = SiameseConfig {
            positive_term: PositiveTermForm::Squared,
            ..cfg
        };
        let (l, d) = contrastive_loss(0.7, 1, &sq);
        assert!((l - 0.49).abs() < 1e-12 && (d - 1.4).abs() < 1e-12);
    }

    #[test]
    fn pair_counts_and_labels() {
        let vids: Vec<VideoFeatures> = (0..6).map(|i| video(&format!("v{i}"), i % 3, 2, 3, i as f64)).collect();
        let set = make_pairs(&vids).unwrap();
        assert_eq!(set.pairs.len(), 30);
        assert_eq!(set.positives, 6);
        assert!(set.pairs.iter().all(|p| p.inst != p.user));
        assert!(make_pairs(&vids[..1]).is_err());
    }

    #[test]
    fn distance_identity_and_symmetry() {
        let net = SiameseNetwork::init(3, 4, 2, &mut rng_for(2, "t", 0)).unwrap();
        let a = video("a", 0, 4, 3, 0.0);
        let b = video("b", 1, 7, 3, 1.3);
        let same = VideoPair {
            instructional: a.features.view(),
            user: a.features.view(),
            label: 1,
        };
        assert_eq!(pair_distance(&net, &same).unwrap(), 0.0);
        let ab = VideoPair {
            instructional: a.features.view(),
            user: b.features.view(),
            label: 0,
        };
        let ba = VideoPair {
            instructional: b.features.view(),
            user: a.features.view(),
            label: 0,
        };
        assert_eq!(pair_distance(&net, &ab).unwrap(), pair_distance(&net, &ba).unwrap());
        assert!(net.embed(Array2::zeros((0, 3)).view()).is_err());
    }

    #[test]
    fn training_rejects_single_label() {
        let net = SiameseNetwork::init(3, 4, 1, &mut rng_for(2, "t", 0)).unwrap();
        let vids = vec![video("a", 0, 2, 3, 0.0), video("b", 0, 3, 3, 1.0)];
        let pairs = make_pairs(&vids).unwrap();
        let cfg = SiameseConfig {
            hidden: 4,
            layers: 1,
            epochs: 1,
            ..Default::default()
        };
        assert!(train_siamese(net, &vids, &pairs, &cfg, None, &mut rng_for(1, "s", 0)).is_err());
    }
}
