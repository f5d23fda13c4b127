use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 11] = [
    "data.n_subjects=8",
    "data.frames_min=3",
    "data.frames_max=5",
    "data.d_raw=4",
    "encoder.d_pca=2",
    "encoder.components=2",
    "encoder.em_iters=3",
    "au.hidden=4",
    "au.epochs=2",
    "siamese.hidden=3",
    "siamese.epochs=3",
];

fn skilleval(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skilleval"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env("SKILLEVAL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn tiny(out: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = Vec::new();
    for s in TINY {
        all.push("--set");
        all.push(s);
    }
    all.extend_from_slice(args);
    skilleval(out, &all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_reports_counts_and_is_repeatable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = skilleval(a.path(), &["--seed", "11", "gen"]);
    let ob = skilleval(b.path(), &["--seed", "11", "gen"]);
    assert!(oa.status.success(), "{}", stderr(&oa));
    let line = stdout(&oa);
    assert!(line.starts_with("videos=80 segments=576 hash="), "{line}");
    assert_eq!(line, stdout(&ob));
    let oc = skilleval(b.path(), &["--seed", "12", "gen"]);
    assert_ne!(stdout(&oc), line);
    assert!(a.path().join("data").join("manifest.json").exists());
}

#[test]
fn gen_rejects_bad_ranges_by_name() {
    let d = tempfile::tempdir().unwrap();
    let o = skilleval(d.path(), &["gen", "--n-subjects", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("n_subjects"), "{}", stderr(&o));
    let o = skilleval(d.path(), &["--set", "data.frames_min=50", "--set", "data.frames_max=10", "gen"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("data.frames"), "{}", stderr(&o));
    let o = skilleval(d.path(), &["--set", "au.bogus=1", "gen"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn stages_must_run_in_order() {
    let d = tempfile::tempdir().unwrap();
    let o = tiny(d.path(), &["train", "--stage", "au"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("gen"), "{}", stderr(&o));

    assert!(tiny(d.path(), &["gen"]).status.success());
    let o = tiny(d.path(), &["train", "--stage", "au", "--fold", "0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("encoder checkpoint missing"), "{}", stderr(&o));

    let o = tiny(d.path(), &["train", "--stage", "encoder"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 4);
    let o = tiny(d.path(), &["train", "--stage", "siamese", "--fold", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("au checkpoint missing"), "{}", stderr(&o));

    let o = tiny(d.path(), &["train", "--stage", "au", "--epochs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in 0..4 {
        let log = std::fs::read_to_string(d.path().join(format!("fold{f}/au_log.csv"))).unwrap();
        assert_eq!(log.lines().count(), 1 + 3);
    }
    // Cosine needs no Siamese checkpoint.
    let o = tiny(d.path(), &["eval", "--method", "cosine"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("mean_auc=") && out.contains("pooled_auc="), "{out}");
    assert!(d.path().join("eval/report_cosine.json").exists());
    assert!(d.path().join("eval/scores_cosine_fold3.csv").exists());
    let o = tiny(d.path(), &["eval", "--method", "siamese"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("siamese checkpoint missing"), "{}", stderr(&o));

    let o = tiny(d.path(), &["train", "--stage", "siamese", "--fold", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(d.path().join("fold2/siamese_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    let o = tiny(d.path(), &["eval", "--method", "siamese", "--fold", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("fold=2 auc="));

    let o = tiny(d.path(), &["dump-hidden", "--fold", "2", "--video", "s01_a03", "--position", "1", "--cells", "0,3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("t,cell_0,cell_3\n"));
}

#[test]
fn unknown_method_lists_valid_ones() {
    let d = tempfile::tempdir().unwrap();
    let o = skilleval(d.path(), &["eval", "--method", "lda"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("siamese") && err.contains("cosine"), "{err}");
}

#[test]
fn selftest_passes_and_catches_corruption() {
    let d = tempfile::tempdir().unwrap();
    let o = skilleval(d.path(), &["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let o = skilleval(d.path(), &["selftest", "--corrupt-gradient"]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL lstm"), "{}", stdout(&o));
}

#[test]
fn echoed_config_reloads() {
    let d = tempfile::tempdir().unwrap();
    assert!(tiny(d.path(), &["--seed", "99", "gen"]).status.success());
    let text = std::fs::read_to_string(d.path().join("config.toml")).unwrap();
    let cfg = skilleval::pipeline::RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 99);
    assert_eq!(cfg.data.n_subjects, 8);
    assert_eq!(cfg.siamese.epochs, 3);
    let other = tempfile::tempdir().unwrap();
    let cfg_path = d.path().join("config.toml");
    let o = skilleval(other.path(), &["--config", cfg_path.to_str().unwrap(), "gen"]);
    assert_eq!(stdout(&o), stdout(&tiny(d.path(), &["--seed", "99", "gen"])));
}
