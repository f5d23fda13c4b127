//! Built-in verification: finite-difference gradient checks on toy
//! networks, a hand-computed Fisher Vector and the AUC rank-statistic
//! oracle.

use ndarray::{array, Array1, Array2};
use rand::Rng as _;

use crate::action_unit::{au_loss, AuNetwork};
use crate::encoding::{encode_fv, GmmModel};
use crate::error::Result;
use crate::evaluation::{roc_auc, ScoredPair};
use crate::lstm::{grad_check, scale_forget_gate_grad, GradCheckReport, Parameters, StackedLstm};
use crate::seed::rng_for;
use crate::siamese::{make_pairs, pair_loss, ContrastiveLoss, PositiveTermForm, SiameseNetwork, VideoFeatures};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Toy dimensions for the gradient checks.
pub const TOY_HIDDEN: usize = 5;
pub const TOY_STEPS: usize = 7;
pub const TOY_LAYERS: usize = 2;
pub const TOY_CLASSES: usize = 3;
pub const TOY_INPUT: usize = 6;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn toy_sequence(rows: usize, cols: usize, seed: u64, index: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, "selftest-input", index);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn toy_lstm(seed: u64, stream: &str) -> Result<StackedLstm> {
    let mut rng = rng_for(seed, stream, 0);
    let mut net = StackedLstm::init(TOY_INPUT, &[TOY_HIDDEN; TOY_LAYERS], &mut rng)?;
    // Larger weights than the default init push the gates away from 0.5,
    // which exercises more of the nonlinearity.
    for t in net.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    Ok(net)
}

/// `sum_{l,t} <C_l[t], h^l_t>` over every layer's hidden outputs, with the
/// analytic gradient. `corrupt` scales the first layer's forget-gate
/// gradient by 1.5.
pub fn lstm_grad_check(seed: u64, corrupt: bool) -> Result<GradCheckReport> {
    let net = toy_lstm(seed, "selftest-lstm")?;
    let x = toy_sequence(TOY_STEPS, TOY_INPUT, seed, 0);
    let coeffs: Vec<Array2<f64>> = (0..TOY_LAYERS)
        .map(|l| toy_sequence(TOY_STEPS, TOY_HIDDEN, seed, 10 + l as u64))
        .collect();
    grad_check(
        &net,
        |p: &StackedLstm| {
            let cache = p.forward(x.view())?;
            let loss: f64 = (0..TOY_LAYERS).map(|l| (&cache.hidden(l) * &coeffs[l]).sum()).sum();
            let mut grads = p.zeros_like();
            let upstream: Vec<_> = coeffs.iter().map(|c| Some(c.view())).collect();
            p.backward_layers(&cache, &upstream, &mut grads)?;
            if corrupt {
                scale_forget_gate_grad(&mut grads, 0, 1.5);
            }
            Ok((loss, grads))
        },
        GRAD_EPS,
        GRAD_TOL,
    )
}

/// Summed negative log-likelihood of a softmax head on the last hidden
/// state, over a batch of two sequences of different lengths.
pub fn au_grad_check(seed: u64) -> Result<GradCheckReport> {
    let mut net = AuNetwork::init(
        TOY_INPUT,
        TOY_HIDDEN,
        TOY_LAYERS,
        TOY_CLASSES,
        &mut rng_for(seed, "selftest-au", 0),
    )?;
    let mut rng = rng_for(seed, "selftest-au", 1);
    for t in net.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let a = toy_sequence(TOY_STEPS, TOY_INPUT, seed, 20);
    let b = toy_sequence(TOY_STEPS - 3, TOY_INPUT, seed, 21);
    grad_check(
        &net,
        |p: &AuNetwork| au_loss(p, &[(a.view(), 0), (b.view(), 2)]),
        GRAD_EPS,
        GRAD_TOL,
    )
}

/// Toy Siamese problem: four videos of lengths 1 to 4 from two activities,
/// all ordered pairs. The margin is placed between two negative-pair
/// distances so that both the active and the dead zone of the hinge are
/// exercised.
pub fn siamese_grad_check(seed: u64, form: PositiveTermForm) -> Result<(GradCheckReport, f64)> {
    let mut net = SiameseNetwork::init(TOY_INPUT, TOY_HIDDEN, TOY_LAYERS, &mut rng_for(seed, "selftest-siamese", 0))?;
    let mut rng = rng_for(seed, "selftest-siamese", 1);
    for t in net.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let videos: Vec<VideoFeatures> = (0..4)
        .map(|i| VideoFeatures {
            id: format!("v{i}"),
            subject: i,
            activity: i / 2,
            features: toy_sequence(i + 1, TOY_INPUT, seed, 30 + i as u64),
        })
        .collect();
    let pairs = make_pairs(&videos)?;
    let emb: Vec<_> = videos
        .iter()
        .map(|v| net.embed(v.features.view()))
        .collect::<Result<_>>()?;
    let mut neg: Vec<f64> = pairs
        .pairs
        .iter()
        .filter(|p| p.label == 0)
        .map(|p| emb[p.inst].distance(&emb[p.user]))
        .collect();
    neg.sort_by(f64::total_cmp);
    neg.dedup();
    let margin = match neg.len() {
        0 => 1.0,
        1 => neg[0] * 1.5,
        n => 0.5 * (neg[n / 2 - 1] + neg[n / 2]),
    };
    let loss = ContrastiveLoss { margin, form };
    let report = grad_check(
        &net,
        |p: &SiameseNetwork| pair_loss(p, &videos, &pairs.pairs, loss),
        GRAD_EPS,
        GRAD_TOL,
    )?;
    Ok((report, margin))
}

/// Scalar Fisher Vector for one component, written out longhand.
fn hand_fv(weights: [f64; 2], means: [f64; 2], vars: [f64; 2], x: f64) -> Vec<f64> {
    let pdf = |m: f64, v: f64| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
    let p0 = weights[0] * pdf(means[0], vars[0]);
    let p1 = weights[1] * pdf(means[1], vars[1]);
    let g = [p0 / (p0 + p1), p1 / (p0 + p1)];
    let u = [(x - means[0]) / vars[0].sqrt(), (x - means[1]) / vars[1].sqrt()];
    let raw = [
        g[0] * u[0] / weights[0].sqrt(),
        g[1] * u[1] / weights[1].sqrt(),
        g[0] * (u[0] * u[0] - 1.0) / (2.0 * weights[0]).sqrt(),
        g[1] * (u[1] * u[1] - 1.0) / (2.0 * weights[1]).sqrt(),
    ];
    let powered: Vec<f64> = raw.iter().map(|v| v.signum() * v.abs().sqrt()).collect();
    let norm = powered.iter().map(|v| v * v).sum::<f64>().sqrt();
    powered.iter().map(|v| v / norm).collect()
}

/// Largest deviation between `encode_fv` and the longhand computation over a
/// few frames of a K=2, D=1 mixture.
pub fn fv_hand_check() -> Result<f64> {
    let (w, m, v) = ([0.3, 0.7], [-1.0, 2.0], [0.5, 2.0]);
    let gmm = GmmModel {
        weights: array![w[0], w[1]],
        means: array![[m[0]], [m[1]]],
        variances: array![[v[0]], [v[1]]],
        variance_floor: 1e-6,
    };
    let mut worst: f64 = 0.0;
    for x in [-2.5, -1.0, 0.4, 1.3, 3.7] {
        let got = encode_fv(&gmm, Array1::from_elem(1, x).view())?;
        for (a, b) in got.0.iter().zip(hand_fv(w, m, v, x)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// `2 * (concordant + ties / 2)` by enumerating every positive/negative pair.
pub fn brute_force_doubled_auc(scored: &[ScoredPair]) -> u128 {
    let mut total = 0u128;
    for p in scored.iter().filter(|s| s.label == 1) {
        for n in scored.iter().filter(|s| s.label == 0) {
            total += if p.score > n.score {
                2
            } else if p.score == n.score {
                1
            } else {
                0
            };
        }
    }
    total
}

/// Random score sets of 2 to 200 pairs drawn from a small value grid so that
/// ties are common. Returns `(sets checked, sets where the sweep disagreed)`.
pub fn auc_oracle_check(seed: u64, sets: usize) -> Result<(usize, usize)> {
    let mut mismatches = 0;
    for i in 0..sets {
        let mut rng = rng_for(seed, "selftest-auc", i as u64);
        let n = rng.random_range(2..=200);
        let grid = rng.random_range(2..=40);
        let mut scored: Vec<ScoredPair> = (0..n)
            .map(|k| ScoredPair {
                inst_id: format!("i{k}"),
                user_id: format!("u{k}"),
                label: u8::from(rng.random_bool(0.4)),
                score: f64::from(rng.random_range(0..grid)) * 0.37 - 3.0,
            })
            .collect();
        scored[0].label = 1;
        scored[1].label = 0;
        let roc = roc_auc(&scored)?;
        let brute = brute_force_doubled_auc(&scored);
        let denom = 2 * roc.positives as u128 * roc.negatives as u128;
        if roc.doubled_concordance != brute || roc.auc != brute as f64 / denom as f64 {
            mismatches += 1;
        }
    }
    Ok((sets, mismatches))
}

fn grad_result(name: &'static str, r: Result<GradCheckReport>) -> CheckResult {
    match r {
        Ok(rep) => CheckResult {
            name,
            pass: rep.pass,
            detail: format!(
                "max_rel_err={:.3e} over {} parameters{}",
                rep.max_rel_err,
                rep.checked,
                rep.worst
                    .first()
                    .filter(|_| !rep.pass)
                    .map(|w| format!(" (worst: {}[{}] analytic={} numeric={})", w.tensor, w.index, w.analytic, w.numeric))
                    .unwrap_or_default()
            ),
        },
        Err(e) => CheckResult {
            name,
            pass: false,
            detail: e.to_string(),
        },
    }
}

/// Runs every check. With `corrupt_gradient` the LSTM check uses a
/// deliberately wrong forget-gate gradient and must fail.
pub fn run(seed: u64, corrupt_gradient: bool) -> Vec<CheckResult> {
    let mut out = vec![
        grad_result("lstm gradient", lstm_grad_check(seed, corrupt_gradient)),
        grad_result("action-unit loss gradient", au_grad_check(seed)),
    ];
    for (name, form) in [
        ("siamese pair loss gradient (linear)", PositiveTermForm::PaperLinear),
        ("siamese pair loss gradient (squared)", PositiveTermForm::Squared),
    ] {
        out.push(grad_result(name, siamese_grad_check(seed, form).map(|(r, _)| r)));
    }
    out.push(match fv_hand_check() {
        Ok(err) => CheckResult {
            name: "fisher vector hand case",
            pass: err <= 1e-9,
            detail: format!("max_abs_err={err:.3e}"),
        },
        Err(e) => CheckResult {
            name: "fisher vector hand case",
            pass: false,
            detail: e.to_string(),
        },
    });
    out.push(match auc_oracle_check(seed, 50) {
        Ok((n, bad)) => CheckResult {
            name: "auc pairwise oracle",
            pass: bad == 0,
            detail: format!("{bad} of {n} score sets disagree"),
        },
        Err(e) => CheckResult {
            name: "auc pairwise oracle",
            pass: false,
            detail: e.to_string(),
        },
    });
    out
}
