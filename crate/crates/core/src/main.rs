use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use skilleval::action_unit::{au_forward, dump_hidden_states};
use skilleval::evaluation::{self, build_report, evaluate_method, Method};
use skilleval::pipeline::{self as pl, FoldModels, RunConfig, RunLayout};
use skilleval::synth_data::{read_dataset, write_dataset, Dataset, NUM_FOLDS};
use skilleval::{selftest, Error, Result};

#[derive(Parser)]
#[command(name = "skilleval", version, about = "Skill evaluation with action-unit and Siamese LSTMs")]
struct Cli {
    /// TOML run configuration. Defaults to <out-dir>/config.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,

    /// Config override, e.g. `--set siamese.margin=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Encoder,
    Au,
    Siamese,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into <out-dir>/data.
    Gen {
        #[arg(long)]
        n_subjects: Option<usize>,
        #[arg(long)]
        noise_level: Option<f64>,
        #[arg(long)]
        d_raw: Option<usize>,
    },
    /// Train one pipeline stage for one fold (default: every fold).
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        fold: Option<usize>,
        /// Epochs for the selected stage.
        #[arg(long)]
        epochs: Option<usize>,
        /// Learning rate for the selected stage.
        #[arg(long)]
        lr: Option<f64>,
        /// Frames kept per segment (every n-th).
        #[arg(long)]
        frame_stride: Option<usize>,
        /// Contrastive margin.
        #[arg(long)]
        margin: Option<f64>,
    },
    /// Score held-out pairs with a trained method.
    Eval {
        /// siamese or cosine
        #[arg(long)]
        method: String,
        #[arg(long)]
        fold: Option<usize>,
        /// Signed-power exponent of the cosine baseline.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Full cross-validation: train every stage on every fold and evaluate
    /// both methods.
    Cv,
    /// Write top-layer hidden-state traces of one segment as CSV.
    DumpHidden {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Video id, e.g. s00_a03.
        #[arg(long)]
        video: String,
        #[arg(long, default_value_t = 0)]
        position: usize,
        /// Comma-separated hidden-unit indices.
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        cells: Vec<usize>,
        /// Output file (default: standard output).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Gradient checks, Fisher Vector hand case and AUC oracle.
    Selftest {
        /// Corrupt the forget-gate gradient; the run must then fail.
        #[arg(long)]
        corrupt_gradient: bool,
    },
}

fn base_config(cli: &Cli, layout: &RunLayout) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if layout.config().exists() => RunConfig::load(&layout.config())?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn finish_config(cfg: RunConfig, layout: &RunLayout) -> Result<RunConfig> {
    cfg.validate()?;
    pl::write_text(&layout.config(), &cfg.to_toml())?;
    Ok(cfg)
}

fn folds(fold: Option<usize>) -> Result<Vec<usize>> {
    match fold {
        Some(f) if f >= NUM_FOLDS => Err(Error::Invalid(format!("--fold must be in 0..{NUM_FOLDS}, got {f}"))),
        Some(f) => Ok(vec![f]),
        None => Ok((0..NUM_FOLDS).collect()),
    }
}

fn load_data(layout: &RunLayout) -> Result<Dataset> {
    let dir = layout.data();
    if !dir.join(skilleval::synth_data::MANIFEST_FILE).exists() {
        return Err(Error::Invalid(format!("dataset missing in {} (run `gen` first)", dir.display())));
    }
    read_dataset(&dir)
}

fn cmd_gen(cfg: &RunConfig, layout: &RunLayout) -> Result<()> {
    let ds = pl::generate(cfg)?;
    write_dataset(&ds, &layout.data())?;
    println!("videos={} segments={} hash={}", ds.num_videos(), ds.segments.len(), ds.digest());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, layout: &RunLayout, stage: Stage, fold: Option<usize>) -> Result<()> {
    let ds = load_data(layout)?;
    for f in folds(fold)? {
        match stage {
            Stage::Encoder => {
                let enc = pl::fit_encoder(&ds, cfg, f)?;
                pl::save_encoder(layout, f, &enc)?;
                println!("fold={f} encoder fv_dim={}", enc.fv_dim());
            }
            Stage::Au => {
                let enc = pl::load_encoder(layout, f)?;
                let segs = pl::encode_fold(&ds, &enc, f, cfg.au.frame_stride)?;
                let (net, log) = pl::train_action_units(cfg, f, &segs, enc.fv_dim())?;
                pl::save_au(layout, f, &net)?;
                pl::write_au_log(layout, f, &log)?;
                let acc = log.last().and_then(|e| e.heldout_accuracy);
                println!("fold={f} au epochs={} heldout_accuracy={}", log.len(), fmt_opt(acc));
            }
            Stage::Siamese => {
                let enc = pl::load_encoder(layout, f)?;
                let au = pl::load_au(layout, f)?;
                let segs = pl::encode_fold(&ds, &enc, f, cfg.au.frame_stride)?;
                let train = pl::video_features(&au, &segs.train)?;
                let heldout = pl::video_features(&au, &segs.heldout)?;
                let (net, log) = pl::train_siamese_stage(cfg, f, &train, &heldout)?;
                pl::save_siamese(layout, f, &net)?;
                pl::write_siamese_log(layout, f, &log)?;
                let auc = log.last().and_then(|e| e.heldout_auc);
                println!("fold={f} siamese epochs={} heldout_auc={}", log.len(), fmt_opt(auc));
            }
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"))
}

fn cmd_eval(cfg: &RunConfig, layout: &RunLayout, method: Method, fold: Option<usize>) -> Result<()> {
    let ds = load_data(layout)?;
    let out = layout.eval();
    let mut runs = Vec::new();
    let mut evals = Vec::new();
    for f in folds(fold)? {
        let encoder = pl::load_encoder(layout, f)?;
        let au = pl::load_au(layout, f)?;
        let siamese = match method {
            Method::Siamese => Some(pl::load_siamese(layout, f)?),
            Method::Cosine => None,
        };
        let segs = pl::encode_fold(&ds, &encoder, f, cfg.au.frame_stride)?;
        let au_accuracy = skilleval::action_unit::classify_accuracy(&au, &segs.heldout_refs())?;
        let heldout_videos = pl::video_features(&au, &segs.heldout)?;
        let models = FoldModels {
            fold: f,
            train_subjects: pl::train_subjects(&ds, f),
            encoder,
            au,
            siamese,
        };
        let e = evaluate_method(method, f, &heldout_videos, &models, cfg.eval.alpha)?;
        pl::write_text(
            &out.join(format!("scores_{}_fold{f}.csv", method.name())),
            &evaluation::scores_csv(&e.scored),
        )?;
        pl::write_text(&out.join(format!("roc_{}_fold{f}.csv", method.name())), &e.roc.to_csv())?;
        println!("fold={f} auc={:.6} accuracy={au_accuracy:.6}", e.roc.auc);
        runs.push(pl::FoldRun {
            heldout_subjects: ds.manifest.folds.get(&f).cloned().unwrap_or_default(),
            heldout_segments: segs.heldout.len(),
            heldout_videos,
            au_accuracy,
            au_log: Vec::new(),
            siamese_log: Vec::new(),
            models,
        });
        evals.push(vec![e]);
    }
    let report = build_report(cfg.seed, &runs, &evals, &[method])?;
    pl::write_text(&out.join(format!("report_{}.json", method.name())), &report.to_json())?;
    let r = &report.methods[0];
    println!("mean_auc={:.6}", r.mean_auc);
    println!("pooled_auc={:.6}", r.pooled_auc);
    println!("mean_accuracy={:.6}", r.mean_accuracy);
    Ok(())
}

fn cmd_cv(cfg: &RunConfig, layout: &RunLayout) -> Result<()> {
    let ds = match load_data(layout) {
        Ok(ds) => ds,
        Err(_) => {
            let ds = pl::generate(cfg)?;
            write_dataset(&ds, &layout.data())?;
            ds
        }
    };
    let outcome = evaluation::cross_validate(&ds, cfg)?;
    for run in &outcome.runs {
        let f = run.models.fold;
        pl::save_encoder(layout, f, &run.models.encoder)?;
        pl::save_au(layout, f, &run.models.au)?;
        if let Some(s) = &run.models.siamese {
            pl::save_siamese(layout, f, s)?;
        }
    }
    evaluation::write_outcome(&outcome, &layout.eval())?;
    for r in &outcome.report.methods {
        println!("method={} mean_auc={:.6} pooled_auc={:.6}", r.method, r.mean_auc, r.pooled_auc);
    }
    if let Some(r) = outcome.report.methods.first() {
        println!("mean_accuracy={:.6}", r.mean_accuracy);
    }
    Ok(())
}

fn cmd_dump_hidden(
    cfg: &RunConfig,
    layout: &RunLayout,
    fold: usize,
    video: &str,
    position: usize,
    cells: &[usize],
    output: Option<&Path>,
) -> Result<()> {
    let ds = load_data(layout)?;
    let encoder = pl::load_encoder(layout, fold)?;
    let au = pl::load_au(layout, fold)?;
    let v = ds
        .videos()
        .into_iter()
        .find(|v| v.id() == video)
        .ok_or_else(|| Error::Invalid(format!("no video `{video}` in the dataset")))?;
    let &idx = v
        .segments
        .get(position)
        .ok_or_else(|| Error::Invalid(format!("video {video} has {} segments, no position {position}", v.segments.len())))?;
    let frames = ds.segments[idx].frames.view();
    let sampled = frames.slice(ndarray::s![..;cfg.au.frame_stride, ..]);
    let encoded = encoder.encode_sequence(sampled)?;
    let trace = dump_hidden_states(&au, encoded.view(), cells)?;
    let csv = trace.to_csv();
    match output {
        Some(p) => pl::write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    let predicted = au_forward(&au, encoded.view())?.probabilities.argmax();
    eprintln!(
        "segment class={} predicted={predicted} frames={}",
        ds.segments[idx].unit_class,
        encoded.nrows()
    );
    Ok(())
}

fn cmd_selftest(seed: u64, corrupt: bool) -> Result<bool> {
    let start = std::time::Instant::now();
    let results = selftest::run(seed, corrupt);
    for r in &results {
        println!("{} {}: {}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let ok = results.iter().all(|r| r.pass);
    println!(
        "selftest {} in {:.2}s",
        if ok { "passed" } else { "FAILED" },
        start.elapsed().as_secs_f64()
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let layout = RunLayout::new(&cli.out_dir);
    let mut cfg = base_config(&cli, &layout)?;
    match &cli.command {
        Command::Gen {
            n_subjects,
            noise_level,
            d_raw,
        } => {
            if let Some(v) = n_subjects {
                cfg.data.n_subjects = *v;
            }
            if let Some(v) = noise_level {
                cfg.data.noise_level = *v;
            }
            if let Some(v) = d_raw {
                cfg.data.d_raw = *v;
            }
            let cfg = finish_config(cfg, &layout)?;
            cmd_gen(&cfg, &layout)?;
        }
        Command::Train {
            stage,
            fold,
            epochs,
            lr,
            frame_stride,
            margin,
        } => {
            match stage {
                Stage::Au => {
                    if let Some(e) = epochs {
                        cfg.au.epochs = *e;
                    }
                    if let Some(v) = lr {
                        cfg.au.lr = *v;
                    }
                }
                Stage::Siamese => {
                    if let Some(e) = epochs {
                        cfg.siamese.epochs = *e;
                    }
                    if let Some(v) = lr {
                        cfg.siamese.lr = *v;
                    }
                }
                Stage::Encoder => {}
            }
            if let Some(v) = frame_stride {
                cfg.au.frame_stride = *v;
            }
            if let Some(v) = margin {
                cfg.siamese.margin = *v;
            }
            let cfg = finish_config(cfg, &layout)?;
            cmd_train(&cfg, &layout, *stage, *fold)?;
        }
        Command::Eval { method, fold, alpha } => {
            let method: Method = method.parse()?;
            if let Some(a) = alpha {
                cfg.eval.alpha = *a;
            }
            let cfg = finish_config(cfg, &layout)?;
            cmd_eval(&cfg, &layout, method, *fold)?;
        }
        Command::Cv => {
            let cfg = finish_config(cfg, &layout)?;
            cmd_cv(&cfg, &layout)?;
        }
        Command::DumpHidden {
            fold,
            video,
            position,
            cells,
            output,
        } => {
            cfg.validate()?;
            cmd_dump_hidden(&cfg, &layout, *fold, video, *position, cells, output.as_deref())?;
        }
        Command::Selftest { corrupt_gradient } => {
            return cmd_selftest(cfg.seed, *corrupt_gradient);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
