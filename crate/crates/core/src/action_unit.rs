//! Action-unit network: a stacked LSTM over per-frame Fisher Vectors with a
//! linear softmax head. The top-layer hidden state at the last frame is the
//! segment's action-unit feature.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoding::log_sum_exp;
use crate::error::{Error, Result};
use crate::lstm::{Adam, AdamConfig, ForwardCache, Parameters, StackedLstm};
use crate::seed::Rng;
use crate::tensor_file::{TensorFile, LSTM_HEADER};

pub const ROLE: &str = "au";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuConfig {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub frame_stride: usize,
    pub lr: f64,
    pub clip_norm: f64,
}

impl Default for AuConfig {
    fn default() -> Self {
        AuConfig {
            hidden: 128,
            layers: 2,
            epochs: 8,
            batch_size: 1,
            frame_stride: 1,
            lr: 1e-3,
            clip_norm: 5.0,
        }
    }
}

impl AuConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("au.hidden", "must be >= 1"));
        }
        if self.layers == 0 {
            return Err(Error::config("au.layers", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("au.batch_size", "must be >= 1"));
        }
        if self.frame_stride == 0 {
            return Err(Error::config("au.frame_stride", "must be >= 1"));
        }
        self.adam().validate("au")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuNetwork {
    pub backbone: StackedLstm,
    /// classes × H
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl AuNetwork {
    pub fn new(backbone: StackedLstm, head_weight: Array2<f64>, head_bias: Array1<f64>) -> Result<Self> {
        if head_weight.ncols() != backbone.output_dim() {
            return Err(Error::dim("head input", backbone.output_dim(), head_weight.ncols()));
        }
        if head_bias.len() != head_weight.nrows() || head_bias.is_empty() {
            return Err(Error::dim("head bias", head_weight.nrows(), head_bias.len()));
        }
        Ok(AuNetwork {
            backbone,
            head_weight,
            head_bias,
        })
    }

    pub fn zeros(fv_dim: usize, hidden: usize, layers: usize, classes: usize) -> Result<Self> {
        let backbone = StackedLstm::zeros(fv_dim, &vec![hidden; layers])?;
        Self::new(backbone, Array2::zeros((classes, hidden)), Array1::zeros(classes))
    }

    /// Backbone per [`StackedLstm::init`]; head uniform in ±1/sqrt(H), zero bias.
    pub fn init(fv_dim: usize, hidden: usize, layers: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        use rand::Rng as _;
        let backbone = StackedLstm::init(fv_dim, &vec![hidden; layers], rng)?;
        let r = 1.0 / (hidden as f64).sqrt();
        let head = Array2::from_shape_simple_fn((classes, hidden), || rng.random_range(-r..=r));
        Self::new(backbone, head, Array1::zeros(classes))
    }

    pub fn num_classes(&self) -> usize {
        self.head_bias.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::with_role(ROLE);
        f.push_meta("classes", self.num_classes());
        self.backbone.write_tensors(&mut f, "");
        f.push_matrix("head.weight", &self.head_weight);
        f.push_vector("head.bias", &self.head_bias);
        f
    }

    pub fn from_tensor_file(f: &TensorFile, path: &Path) -> Result<Self> {
        if f.role.as_deref() != Some(ROLE) {
            return Err(Error::format(path, format!("expected role `{ROLE}`, found {:?}", f.role)));
        }
        let backbone = StackedLstm::read_tensors(f, "", path)?;
        Self::new(backbone, f.matrix("head.weight", path)?, f.vector("head.bias", path)?)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().save(LSTM_HEADER, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(LSTM_HEADER, path)?, path)
    }
}

impl Parameters for AuNetwork {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.backbone.tensors();
        out.push(("head.weight".into(), self.head_weight.as_slice().expect("contiguous")));
        out.push(("head.bias".into(), self.head_bias.as_slice().expect("contiguous")));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.backbone.tensors_mut();
        out.push(self.head_weight.as_slice_mut().expect("contiguous"));
        out.push(self.head_bias.as_slice_mut().expect("contiguous"));
        out
    }
}

/// Softmax output over action-unit classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities(pub Array1<f64>);

impl ClassProbabilities {
    /// Most probable class; the lowest id wins ties.
    pub fn argmax(&self) -> usize {
        argmax(self.0.view())
    }
}

pub(crate) fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(logits.as_slice().expect("contiguous"));
    logits.mapv(|l| (l - lse).exp())
}

/// Last-step top-layer hidden state of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionUnitFeature {
    pub values: Array1<f64>,
    pub source_unit_class: Option<usize>,
    pub source_position: usize,
}

pub struct AuOutput {
    pub probabilities: ClassProbabilities,
    pub logits: Array1<f64>,
    pub feature: Array1<f64>,
    pub cache: ForwardCache,
}

impl AuOutput {
    /// Top-layer hidden states for every frame, T × H.
    pub fn hidden_states(&self) -> ArrayView2<'_, f64> {
        self.cache.top_hidden()
    }
}

pub fn au_forward(net: &AuNetwork, encoded: ArrayView2<f64>) -> Result<AuOutput> {
    let cache = net.backbone.forward(encoded)?;
    let feature = cache.last_output().to_owned();
    let logits = net.head_weight.dot(&feature) + &net.head_bias;
    Ok(AuOutput {
        probabilities: ClassProbabilities(softmax(logits.view())),
        logits,
        feature,
        cache,
    })
}

pub fn predict(net: &AuNetwork, encoded: ArrayView2<f64>) -> Result<usize> {
    Ok(argmax(au_forward(net, encoded)?.logits.view()))
}

/// Summed negative log-likelihood of the true classes and its gradient.
pub fn au_loss(net: &AuNetwork, batch: &[(ArrayView2<f64>, usize)]) -> Result<(f64, AuNetwork)> {
    let mut grads = net.zeros_like();
    let mut total = 0.0;
    let h = net.feature_dim();
    for (seq, class) in batch {
        if *class >= net.num_classes() {
            return Err(Error::Invalid(format!(
                "class {class} out of range for {} classes",
                net.num_classes()
            )));
        }
        let out = au_forward(net, *seq)?;
        let lse = log_sum_exp(out.logits.as_slice().expect("contiguous"));
        total += lse - out.logits[*class];

        let mut d_logits = out.probabilities.0.clone();
        d_logits[*class] -= 1.0;
        for (c, &dl) in d_logits.iter().enumerate() {
            grads.head_bias[c] += dl;
            grads
                .head_weight
                .row_mut(c)
                .scaled_add(dl, &out.feature);
        }
        let d_feature = d_logits.dot(&net.head_weight);
        let t_len = seq.nrows();
        let mut d_top = Array2::zeros((t_len, h));
        d_top.row_mut(t_len - 1).assign(&d_feature);
        net.backbone.backward(&out.cache, d_top.view(), &mut grads.backbone)?;
    }
    Ok((total, grads))
}

/// An encoded action-unit segment with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSegment {
    pub subject: usize,
    pub activity: usize,
    pub position: usize,
    pub unit_class: usize,
    /// T × FV dim
    pub fv: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_accuracy: Option<f64>,
}

pub fn epoch_log_csv(log: &[AuEpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,heldout_accuracy\n");
    for e in log {
        let acc = e.heldout_accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, acc);
    }
    out
}

/// Trains with Adam on shuffled mini-batches (sum loss per batch). Subjects
/// in `train` and `heldout` must be disjoint. Returns the final-epoch network.
pub fn train_au(
    mut net: AuNetwork,
    train: &[&EncodedSegment],
    heldout: &[&EncodedSegment],
    config: &AuConfig,
    rng: &mut Rng,
) -> Result<(AuNetwork, Vec<AuEpochLog>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training segments".into()));
    }
    let train_subjects: BTreeSet<usize> = train.iter().map(|s| s.subject).collect();
    if let Some(s) = heldout.iter().find(|s| train_subjects.contains(&s.subject)) {
        return Err(Error::Invalid(format!(
            "subject {} appears in both training and held-out segments",
            s.subject
        )));
    }
    let mut adam = Adam::new(&net, config.adam());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(ArrayView2<f64>, usize)> =
                chunk.iter().map(|&i| (train[i].fv.view(), train[i].unit_class)).collect();
            let (loss, mut grads) = au_loss(&net, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite action-unit loss at epoch {epoch} (batch starting at segment {})",
                    chunk[0]
                )));
            }
            epoch_loss += loss;
            adam.step(&mut net, &mut grads)?;
        }
        let heldout_accuracy = if heldout.is_empty() {
            None
        } else {
            Some(classify_accuracy(&net, heldout)?)
        };
        let entry = AuEpochLog {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            heldout_accuracy,
        };
        log::info!(
            "au epoch {epoch}: loss={:.5} heldout_acc={:?}",
            entry.train_loss,
            entry.heldout_accuracy
        );
        log.push(entry);
    }
    Ok((net, log))
}

/// Fraction of segments whose arg-max class is the true class.
pub fn classify_accuracy(net: &AuNetwork, segments: &[&EncodedSegment]) -> Result<f64> {
    let predicted = segments
        .iter()
        .map(|s| predict(net, s.fv.view()))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = segments.iter().map(|s| s.unit_class).collect();
    accuracy(&predicted, &truth)
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Invalid("cannot measure accuracy on an empty fold".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::dim("prediction count", truth.len(), predicted.len()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Action-unit features of one video, in position order.
pub fn extract_video_features(net: &AuNetwork, segments: &[&EncodedSegment]) -> Result<Vec<ActionUnitFeature>> {
    let first = segments
        .first()
        .ok_or_else(|| Error::Invalid("video has no segments".into()))?;
    let mut out = Vec::with_capacity(segments.len());
    for (k, seg) in segments.iter().enumerate() {
        if seg.subject != first.subject || seg.activity != first.activity {
            return Err(Error::Invalid(format!(
                "segment {k} belongs to a different video (subject {}, activity {})",
                seg.subject, seg.activity
            )));
        }
        if seg.position != k {
            return Err(Error::Invalid(format!(
                "gap in segment positions: expected {k}, found {}",
                seg.position
            )));
        }
        let fwd = net.backbone.forward(seg.fv.view())?;
        out.push(ActionUnitFeature {
            values: fwd.last_output().to_owned(),
            source_unit_class: Some(seg.unit_class),
            source_position: seg.position,
        });
    }
    Ok(out)
}

/// Selected top-layer hidden units over time.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub cells: Vec<usize>,
    /// T × cells
    pub values: Array2<f64>,
}

impl HiddenTrace {
    /// `t,cell_<i>,...` with t counted from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for c in &self.cells {
            let _ = write!(out, ",cell_{c}");
        }
        out.push('\n');
        for (t, row) in self.values.rows().into_iter().enumerate() {
            let _ = write!(out, "{}", t + 1);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn dump_hidden_states(net: &AuNetwork, encoded: ArrayView2<f64>, cells: &[usize]) -> Result<HiddenTrace> {
    let h = net.feature_dim();
    if let Some(&bad) = cells.iter().find(|&&c| c >= h) {
        return Err(Error::Invalid(format!("cell index {bad} out of range (hidden size {h})")));
    }
    let cache = net.backbone.forward(encoded)?;
    let top = cache.top_hidden();
    let mut values = Array2::zeros((top.nrows(), cells.len()));
    for (j, &c) in cells.iter().enumerate() {
        values.slice_mut(s![.., j]).assign(&top.slice(s![.., c]));
    }
    Ok(HiddenTrace {
        cells: cells.to_vec(),
        values,
    })
}
