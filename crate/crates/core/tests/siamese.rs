use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use rand::Rng as _;
use skilleval::lstm::{LstmLayer, Parameters, StackedLstm};
use skilleval::seed::rng_for;
use skilleval::selftest;
use skilleval::siamese::*;

fn feats(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, "siamese-test", 0);
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}

fn net(d: usize, h: usize, seed: u64) -> SiameseNetwork {
    SiameseNetwork::init(d, h, 2, &mut rng_for(seed, "siamese-test-net", 0)).unwrap()
}

fn videos(per_activity: usize, activities: usize, d: usize) -> Vec<VideoFeatures> {
    let mut out = Vec::new();
    for a in 0..activities {
        for s in 0..per_activity {
            out.push(VideoFeatures {
                id: format!("s{s:02}_a{a:02}"),
                subject: s,
                activity: a,
                features: feats(2 + (a + s) % 4, d, (a * 100 + s) as u64),
            });
        }
    }
    out
}

#[test]
fn embedding_of_single_step_is_top_hidden_state() {
    let n = net(4, 6, 1);
    let x = feats(1, 4, 2);
    let e = n.embed(x.view()).unwrap();
    let cache = n.backbone.forward(x.view()).unwrap();
    assert_eq!(e.0, cache.last_output().to_owned());
    assert!(n.embed(Array2::zeros((0, 4)).view()).is_err());
}

#[test]
fn branches_share_parameters() {
    let n = net(4, 6, 2);
    let x = feats(5, 4, 3);
    let a = n.embed_instructional(x.view()).unwrap();
    let b = n.embed_user(x.view()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, n.embed(x.view()).unwrap());
    let pair = VideoPair {
        instructional: x.view(),
        user: x.view(),
        label: 1,
    };
    assert!(pair_distance(&n, &pair).unwrap() <= 1e-12);
}

#[test]
fn distance_is_symmetric() {
    let n = net(4, 6, 3);
    for k in 0..20 {
        let a = feats(1 + k % 5, 4, 10 + k as u64);
        let b = feats(1 + (k * 3) % 7, 4, 50 + k as u64);
        let ab = pair_distance(&n, &VideoPair { instructional: a.view(), user: b.view(), label: 0 }).unwrap();
        let ba = pair_distance(&n, &VideoPair { instructional: b.view(), user: a.view(), label: 0 }).unwrap();
        assert_eq!(ab, ba);
        assert!(ab >= 0.0);
    }
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn hand_set_single_layer_distance() {
    // input 1, hidden 1; gate rows: input, forget, output, candidate.
    let layer = LstmLayer {
        w_input: array![[0.5], [-0.3], [0.8], [1.2]],
        w_recurrent: array![[0.1], [0.2], [-0.4], [0.3]],
        bias: array![0.1, 1.0, -0.2, 0.05],
    };
    let n = SiameseNetwork {
        backbone: StackedLstm::new(vec![layer]).unwrap(),
    };
    let h = |x: f64| {
        let i = sig(0.5 * x + 0.1);
        let o = sig(0.8 * x - 0.2);
        let g = (1.2 * x + 0.05).tanh();
        o * (i * g).tanh()
    };
    let (xa, xb) = (0.7, -1.1);
    let d = pair_distance(
        &n,
        &VideoPair {
            instructional: array![[xa]].view(),
            user: array![[xb]].view(),
            label: 0,
        },
    )
    .unwrap();
    assert_abs_diff_eq!(d, (h(xa) - h(xb)).abs(), epsilon = 1e-12);
}

#[test]
fn contrastive_loss_cases() {
    let cfg = SiameseConfig::default();
    for d in [1.0, 1.5, 10.0] {
        assert_eq!(contrastive_loss(d, 0, &cfg), (0.0, 0.0));
    }
    assert_abs_diff_eq!(contrastive_loss(0.7, 1, &cfg).0, 0.7, epsilon = 1e-12);
    let (l, dl) = contrastive_loss(0.4, 0, &cfg);
    assert_abs_diff_eq!(l, 0.36, epsilon = 1e-12);
    assert_abs_diff_eq!(dl, -1.2, epsilon = 1e-12);
    // Finite-difference cross-check of the hinge derivative.
    let eps = 1e-6;
    let fd = (contrastive_loss(0.4 + eps, 0, &cfg).0 - contrastive_loss(0.4 - eps, 0, &cfg).0) / (2.0 * eps);
    assert_abs_diff_eq!(fd, -1.2, epsilon = 1e-8);
}

#[test]
fn loss_monotonicity() {
    for form in [PositiveTermForm::PaperLinear, PositiveTermForm::Squared] {
        let cfg = SiameseConfig {
            positive_term: form,
            margin: 1.3,
            ..SiameseConfig::default()
        };
        let mut prev_pos = f64::NEG_INFINITY;
        let mut prev_neg = f64::INFINITY;
        for k in 0..300 {
            let d = k as f64 * 0.01;
            let (p, _) = contrastive_loss(d, 1, &cfg);
            let (n, _) = contrastive_loss(d, 0, &cfg);
            assert!(p >= prev_pos && n <= prev_neg);
            if d >= 1.3 {
                assert_eq!(n, 0.0);
            }
            prev_pos = p;
            prev_neg = n;
        }
    }
}

#[test]
fn pair_counts() {
    let vids = videos(3, 10, 4);
    let set = make_pairs(&vids).unwrap();
    let n = vids.len();
    assert_eq!(set.pairs.len(), n * (n - 1));
    assert!(set.pairs.iter().all(|p| p.inst != p.user));
    // Brute-force recount of same-activity ordered pairs.
    let mut brute = 0;
    for (i, a) in vids.iter().enumerate() {
        for (j, b) in vids.iter().enumerate() {
            if i != j && a.activity == b.activity {
                brute += 1;
            }
        }
    }
    assert_eq!(set.positives, brute);
    assert_eq!(set.positives, 10 * 3 * 2);
    assert_eq!(set.negatives, set.pairs.len() - set.positives);
    assert!(make_pairs(&vids[..1]).is_err());
}

#[test]
fn pair_loss_gradient_matches_finite_differences() {
    for form in [PositiveTermForm::PaperLinear, PositiveTermForm::Squared] {
        let (report, margin) = selftest::siamese_grad_check(2, form).unwrap();
        assert!(report.pass, "{form:?} margin={margin} max_rel_err={}", report.max_rel_err);
    }
}

#[test]
fn pair_loss_equals_sum_of_pair_losses() {
    let n = net(4, 5, 4);
    let vids = videos(2, 3, 4);
    let set = make_pairs(&vids).unwrap();
    let loss = SiameseConfig::default().loss();
    let (total, grads) = pair_loss(&n, &vids, &set.pairs, loss).unwrap();
    let mut sum = 0.0;
    let mut gsum = n.zeros_like();
    for p in &set.pairs {
        let (l, g) = pair_loss(&n, &vids, std::slice::from_ref(p), loss).unwrap();
        sum += l;
        gsum.accumulate(&g);
    }
    assert_abs_diff_eq!(total, sum, epsilon = 1e-10);
    for ((_, a), (_, b)) in grads.tensors().into_iter().zip(gsum.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-10);
        }
    }
}

#[test]
fn variable_length_pairs_are_batch_independent() {
    let n = net(4, 6, 5);
    let short = feats(4, 4, 60);
    let long = feats(12, 4, 61);
    let alone = n.embed(short.view()).unwrap();
    let d = pair_distance(&n, &VideoPair { instructional: short.view(), user: long.view(), label: 0 }).unwrap();
    let vids = vec![
        VideoFeatures { id: "a".into(), subject: 0, activity: 4, features: short.clone() },
        VideoFeatures { id: "b".into(), subject: 1, activity: 6, features: long.clone() },
        VideoFeatures { id: "c".into(), subject: 2, activity: 4, features: feats(7, 4, 62) },
    ];
    let scored = score_pairs(&n, &vids, &make_pairs(&vids).unwrap()).unwrap();
    let ab = scored.iter().find(|s| s.inst_id == "a" && s.user_id == "b").unwrap();
    assert_eq!(-ab.score, d);
    assert_eq!(n.embed(short.view()).unwrap(), alone);
}

#[test]
fn zero_epochs_leave_network_unchanged() {
    let n = net(4, 5, 6);
    let vids = videos(2, 2, 4);
    let set = make_pairs(&vids).unwrap();
    let cfg = SiameseConfig {
        epochs: 0,
        hidden: 5,
        ..SiameseConfig::default()
    };
    let (out, log) = train_siamese(n.clone(), &vids, &set, &cfg, None, &mut rng_for(0, "s", 0)).unwrap();
    assert_eq!(out, n);
    assert!(log.is_empty());
}

#[test]
fn training_separates_toy_activities() {
    // Activity-specific constant features with jitter.
    let mk = |a: usize, s: usize| {
        let mut rng = rng_for(s as u64, "toy", a as u64);
        VideoFeatures {
            id: format!("s{s}_a{a}"),
            subject: s,
            activity: a,
            features: Array2::from_shape_fn((2 + s % 3, 4), |(_, j)| {
                (if j == a { 1.0 } else { 0.0 }) + rng.random_range(-0.1..0.1)
            }),
        }
    };
    let train: Vec<VideoFeatures> = (0..3).flat_map(|a| (0..4).map(move |s| mk(a, s))).collect();
    let held: Vec<VideoFeatures> = (0..3).flat_map(|a| (4..6).map(move |s| mk(a, s))).collect();
    let cfg = SiameseConfig {
        hidden: 8,
        epochs: 25,
        pair_batch: 16,
        lr: 1e-2,
        ..SiameseConfig::default()
    };
    let n = SiameseNetwork::init(4, 8, 2, &mut rng_for(1, "toy-net", 0)).unwrap();
    let tp = make_pairs(&train).unwrap();
    let hp = make_pairs(&held).unwrap();
    let (_, log) = train_siamese(
        n,
        &train,
        &tp,
        &cfg,
        Some(Monitor { videos: &held, pairs: &hp }),
        &mut rng_for(1, "toy-shuffle", 0),
    )
    .unwrap();
    assert_eq!(log.len(), 25);
    assert!(log.last().unwrap().train_loss < log[0].train_loss);
    assert!(log.last().unwrap().heldout_auc.unwrap() >= 0.95);
    assert_eq!(epoch_log_csv(&log).lines().count(), 26);
}

#[test]
fn training_needs_both_labels() {
    let vids: Vec<VideoFeatures> = videos(3, 1, 4);
    let set = make_pairs(&vids).unwrap();
    let err = train_siamese(net(4, 5, 7), &vids, &set, &SiameseConfig { hidden: 5, ..Default::default() }, None, &mut rng_for(0, "s", 0))
        .unwrap_err();
    assert!(err.to_string().contains("negatives=0"));
}

#[test]
fn pairs_csv_header_and_rows() {
    let n = net(4, 5, 8);
    let vids = videos(2, 2, 4);
    let set = make_pairs(&vids).unwrap();
    let scored = score_pairs(&n, &vids, &set).unwrap();
    let csv = pairs_csv(&scored);
    assert!(csv.starts_with("inst_video_id,user_video_id,label,distance\n"));
    assert_eq!(csv.lines().count(), 1 + set.pairs.len());
}

#[test]
fn checkpoint_round_trip() {
    let n = net(4, 5, 9);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.lstm");
    n.save(&p).unwrap();
    assert_eq!(SiameseNetwork::load(&p).unwrap(), n);
    assert!(std::fs::read_to_string(&p).unwrap().contains("role siamese"));
}
