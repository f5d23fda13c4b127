//! Pair scoring, ROC/AUC, the average-pooling cosine baseline and
//! subject-disjoint cross-validation.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{FoldModels, FoldRun, RunConfig};
use crate::siamese::{make_pairs, score_pairs, VideoFeatures};
use crate::synth_data::{Dataset, NUM_FOLDS};

/// One instructional/user comparison. Higher scores mean "more likely the
/// same activity".
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub inst_id: String,
    pub user_id: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// From (0,0) at threshold +inf to (1,1), one point per distinct score.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: u64,
    pub negatives: u64,
    /// `2 * (concordant + 0.5 * tied)` positive/negative pairs; `auc` is this
    /// divided by `2 * positives * negatives`.
    pub doubled_concordance: u128,
}

impl RocCurve {
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) * 0.5)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        out
    }
}

fn check_scores(scored: &[ScoredPair]) -> Result<(u64, u64)> {
    let mut pos = 0u64;
    let mut neg = 0u64;
    for s in scored {
        if !s.score.is_finite() {
            return Err(Error::Numeric(format!("non-finite score for pair {} / {}", s.inst_id, s.user_id)));
        }
        match s.label {
            1 => pos += 1,
            0 => neg += 1,
            other => return Err(Error::Invalid(format!("label must be 0 or 1, got {other}"))),
        }
    }
    if pos == 0 {
        return Err(Error::Invalid("ROC needs at least one positive pair; none found".into()));
    }
    if neg == 0 {
        return Err(Error::Invalid("ROC needs at least one negative pair; none found".into()));
    }
    Ok((pos, neg))
}

/// Doubled Mann-Whitney U of the positives from average ranks.
pub fn doubled_mann_whitney(scored: &[ScoredPair]) -> Result<u128> {
    let (pos, _) = check_scores(scored)?;
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].score.total_cmp(&scored[b].score));
    // Doubled rank sum of positives; ranks are 1-based, ties share the mean.
    let mut rank_sum2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scored[order[end]].score == scored[order[start]].score {
            end += 1;
        }
        let doubled_rank = (start + 1 + end) as u128;
        let group_pos = order[start..end].iter().filter(|&&i| scored[i].label == 1).count() as u128;
        rank_sum2 += group_pos * doubled_rank;
        start = end;
    }
    let p = u128::from(pos);
    Ok(rank_sum2 - p * (p + 1))
}

/// Threshold sweep over distinct scores, highest first. Ties contribute half
/// credit, which makes the trapezoidal area equal the Mann-Whitney statistic.
pub fn roc_auc(scored: &[ScoredPair]) -> Result<RocCurve> {
    let (pos, neg) = check_scores(scored)?;
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].score.total_cmp(&scored[a].score));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let threshold = scored[order[start]].score;
        let mut end = start;
        let (mut gp, mut gn) = (0u64, 0u64);
        while end < order.len() && scored[order[end]].score == threshold {
            if scored[order[end]].label == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            end += 1;
        }
        area2 += u128::from(gn) * u128::from(2 * tp + gp);
        tp += gp;
        fp += gn;
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
        start = end;
    }
    let ranked = doubled_mann_whitney(scored)?;
    if ranked != area2 {
        return Err(Error::Numeric(format!(
            "ROC sweep ({area2}) and rank statistic ({ranked}) disagree"
        )));
    }
    let denom = 2 * u128::from(pos) * u128::from(neg);
    Ok(RocCurve {
        points,
        auc: area2 as f64 / denom as f64,
        positives: pos,
        negatives: neg,
        doubled_concordance: area2,
    })
}

fn l2_normalized(v: Array1<f64>, what: &str) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Invalid(format!("{what} has zero or non-finite norm")));
    }
    Ok(v / norm)
}

/// Mean-pools each feature list, L2-normalizes, applies the signed power
/// `sign(v)|v|^alpha`, re-normalizes and returns the dot product.
pub fn baseline_cosine(a: ArrayView2<f64>, b: ArrayView2<f64>, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Invalid(format!("alpha must be in (0, 1], got {alpha}")));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::dim("baseline feature width", a.ncols(), b.ncols()));
    }
    let pool = |m: ArrayView2<f64>, what: &str| -> Result<Array1<f64>> {
        let pooled = m
            .mean_axis(Axis(0))
            .ok_or_else(|| Error::Invalid(format!("{what} feature list is empty")))?;
        let unit = l2_normalized(pooled, what)?;
        l2_normalized(unit.mapv(|x| x.signum() * x.abs().powf(alpha)), what)
    };
    Ok(pool(a, "first video")?.dot(&pool(b, "second video")?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Siamese,
    Cosine,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Siamese, Method::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Method::Siamese => "siamese",
            Method::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "siamese" => Ok(Method::Siamese),
            "cosine" | "cosine_baseline" => Ok(Method::Cosine),
            other => Err(Error::Invalid(format!(
                "unknown method `{other}`; valid methods: siamese, cosine"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodEvaluation {
    pub method: Method,
    pub fold: usize,
    pub scored: Vec<ScoredPair>,
    pub roc: RocCurve,
}

pub fn scores_csv(scored: &[ScoredPair]) -> String {
    let mut out = String::from("inst_id,user_id,label,score\n");
    for s in scored {
        let _ = writeln!(out, "{},{},{},{}", s.inst_id, s.user_id, s.label, s.score);
    }
    out
}

/// Parses a scores CSV (`inst_id,user_id,label,score`), e.g. produced by an
/// external method, so it can be scored with [`roc_auc`].
pub fn parse_scores_csv(text: &str, path: &Path) -> Result<Vec<ScoredPair>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "inst_id,user_id,label,score" => {}
        other => return Err(Error::format(path, format!("bad scores header {other:?}"))),
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(path, format!("line {}: malformed row `{line}`", n + 2));
        if cols.len() != 4 {
            return Err(bad());
        }
        out.push(ScoredPair {
            inst_id: cols[0].to_string(),
            user_id: cols[1].to_string(),
            label: cols[2].parse().map_err(|_| bad())?,
            score: cols[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Scores every ordered pair of held-out videos. The Siamese score is the
/// negated embedding distance; the baseline score is the pooled cosine.
pub fn evaluate_method(
    method: Method,
    fold: usize,
    videos: &[VideoFeatures],
    models: &FoldModels,
    alpha: f64,
) -> Result<MethodEvaluation> {
    if models.fold != fold {
        return Err(Error::Invalid(format!(
            "models were trained for held-out fold {}, not fold {fold}",
            models.fold
        )));
    }
    if let Some(v) = videos.iter().find(|v| models.train_subjects.contains(&v.subject)) {
        return Err(Error::Invalid(format!(
            "video {} belongs to a training subject of fold {fold}",
            v.id
        )));
    }
    let pairs = make_pairs(videos)?;
    let scored = match method {
        Method::Siamese => {
            let net = models
                .siamese
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("fold {fold} has no Siamese model")))?;
            score_pairs(net, videos, &pairs)?
        }
        Method::Cosine => pairs
            .pairs
            .iter()
            .map(|p| {
                Ok(ScoredPair {
                    inst_id: videos[p.inst].id.clone(),
                    user_id: videos[p.user].id.clone(),
                    label: p.label,
                    score: baseline_cosine(videos[p.inst].features.view(), videos[p.user].features.view(), alpha)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let roc = roc_auc(&scored)?;
    Ok(MethodEvaluation {
        method,
        fold,
        scored,
        roc,
    })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub per_fold_auc: Vec<f64>,
    pub mean_auc: f64,
    pub pooled_auc: f64,
    pub per_fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub train_subjects: Vec<usize>,
    pub heldout_subjects: Vec<usize>,
    pub heldout_segments: usize,
    pub heldout_pairs: usize,
    pub heldout_positive_pairs: usize,
    pub au_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub seed: u64,
    pub folds: Vec<FoldSummary>,
    pub methods: Vec<EvalReport>,
}

impl CvReport {
    pub fn method(&self, method: Method) -> Option<&EvalReport> {
        self.methods.iter().find(|r| r.method == method.name())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Report plus everything needed to write per-fold CSVs.
pub struct CvOutcome {
    pub report: CvReport,
    pub runs: Vec<FoldRun>,
    pub evaluations: Vec<Vec<MethodEvaluation>>,
}

pub fn build_report(seed: u64, runs: &[FoldRun], evaluations: &[Vec<MethodEvaluation>], methods: &[Method]) -> Result<CvReport> {
    let accuracies: Vec<f64> = runs.iter().map(|r| r.au_accuracy).collect();
    let mut reports = Vec::new();
    for &m in methods {
        let per_fold: Vec<&MethodEvaluation> = evaluations.iter().flatten().filter(|e| e.method == m).collect();
        let per_fold_auc: Vec<f64> = per_fold.iter().map(|e| e.roc.auc).collect();
        let pooled: Vec<ScoredPair> = per_fold.iter().flat_map(|e| e.scored.iter().cloned()).collect();
        reports.push(EvalReport {
            method: m.name().to_string(),
            mean_auc: mean(&per_fold_auc),
            pooled_auc: roc_auc(&pooled)?.auc,
            per_fold_auc,
            mean_accuracy: mean(&accuracies),
            per_fold_accuracy: accuracies.clone(),
        });
    }
    let folds = runs
        .iter()
        .zip(evaluations)
        .map(|(r, evals)| {
            let first = evals.first();
            FoldSummary {
                fold: r.models.fold,
                train_subjects: r.models.train_subjects.iter().copied().collect(),
                heldout_subjects: r.heldout_subjects.clone(),
                heldout_segments: r.heldout_segments,
                heldout_pairs: first.map_or(0, |e| e.scored.len()),
                heldout_positive_pairs: first.map_or(0, |e| e.roc.positives as usize),
                au_accuracy: r.au_accuracy,
            }
        })
        .collect();
    Ok(CvReport {
        seed,
        folds,
        methods: reports,
    })
}

/// Four-fold, subject-disjoint cross-validation: for each fold the encoder,
/// action-unit network and Siamese network are trained on the other three
/// folds and both methods are evaluated on the held-out fold. Folds may run
/// in parallel; each fold's randomness is derived from the master seed and
/// the fold id only.
pub fn cross_validate(dataset: &Dataset, config: &RunConfig) -> Result<CvOutcome> {
    config.validate()?;
    if dataset.manifest.folds.len() != NUM_FOLDS {
        return Err(Error::Invalid(format!(
            "dataset has {} folds, expected {NUM_FOLDS}",
            dataset.manifest.folds.len()
        )));
    }
    let run_fold = |fold: usize| -> Result<(FoldRun, Vec<MethodEvaluation>)> {
        let run = crate::pipeline::run_fold(dataset, config, fold, true).map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })?;
        let evals = Method::ALL
            .iter()
            .map(|&m| evaluate_method(m, fold, &run.heldout_videos, &run.models, config.eval.alpha))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Fold {
                fold,
                source: Box::new(e),
            })?;
        Ok((run, evals))
    };
    let threads = crate::pipeline::thread_count().min(NUM_FOLDS);
    let results: Vec<Result<(FoldRun, Vec<MethodEvaluation>)>> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| (0..NUM_FOLDS).into_par_iter().map(run_fold).collect())
    } else {
        (0..NUM_FOLDS).map(run_fold).collect()
    };
    let mut runs = Vec::with_capacity(NUM_FOLDS);
    let mut evaluations = Vec::with_capacity(NUM_FOLDS);
    for r in results {
        let (run, evals) = r?;
        runs.push(run);
        evaluations.push(evals);
    }
    let report = build_report(config.seed, &runs, &evaluations, &Method::ALL)?;
    Ok(CvOutcome {
        report,
        runs,
        evaluations,
    })
}

/// Writes `report.json` plus score, ROC and training-log CSVs.
pub fn write_outcome(outcome: &CvOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("report.json".into(), outcome.report.to_json())?;
    for evals in &outcome.evaluations {
        for e in evals {
            write(format!("scores_{}_fold{}.csv", e.method.name(), e.fold), scores_csv(&e.scored))?;
            write(format!("roc_{}_fold{}.csv", e.method.name(), e.fold), e.roc.to_csv())?;
        }
    }
    for m in Method::ALL {
        let pooled: Vec<ScoredPair> = outcome
            .evaluations
            .iter()
            .flatten()
            .filter(|e| e.method == m)
            .flat_map(|e| e.scored.iter().cloned())
            .collect();
        if !pooled.is_empty() {
            write(format!("roc_{}_pooled.csv", m.name()), roc_auc(&pooled)?.to_csv())?;
        }
    }
    for run in &outcome.runs {
        write(
            format!("au_log_fold{}.csv", run.models.fold),
            crate::action_unit::epoch_log_csv(&run.au_log),
        )?;
        write(
            format!("siamese_log_fold{}.csv", run.models.fold),
            crate::siamese::epoch_log_csv(&run.siamese_log),
        )?;
    }
    Ok(())
}
