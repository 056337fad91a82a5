//! The `xferfm` command line: generate, train, eval and sweep.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

use crate::baseline_lr::{
    lr_objective, lr_predict, train_lr_cf, train_lr_ctr_transfer, transfer_centre, LrModel,
    LrParams,
};
use crate::data::{
    build_feature_space, downsample_negatives, encode_log, read_log, sample_cf_negatives,
    split_by_time, write_log, Dataset, FeatureSpace, RawLog, Task,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    alpha_sweep, feature_appending_experiment, metrics, reports_to_csv, score_with, AppendData,
    EvalReport, SweepRegime, SweepResult,
};
use crate::fm::{predict, FmModel};
use crate::synth::{generate, Truth};
use crate::training::{train, Regime};

#[derive(Debug, Parser)]
#[command(
    name = "xferfm",
    version,
    about = "Transferred factorisation machines for CF/CTR logs"
)]
pub struct Cli {
    /// Flat `section.key=value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for both generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write cf.tsv, ctr.tsv, space.txt and truth.txt from the generator.
    Generate,
    /// Train one regime (base, disjoint, joint, disjointlr).
    Train {
        #[arg(long)]
        regime: Option<String>,
    },
    /// Evaluate a model file on the test week.
    Eval {
        /// Evaluate on the CF task instead of the CTR task.
        #[arg(long)]
        cf: bool,
    },
    /// Alpha sweep over regimes and seeds, or a feature-appending run.
    Sweep,
}

/// Splits `--section.key=value` overrides from the arguments clap handles.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let body = a
            .strip_prefix("--")
            .filter(|b| b.split('=').next().is_some_and(|k| k.contains('.')));
        match body {
            Some(b) => {
                let (k, v) = b.split_once('=').ok_or_else(|| {
                    Error::Config(format!("override `{a}` needs a value (--key=value)"))
                })?;
                overrides.push((k.to_string(), v.to_string()));
            }
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let (rest, overrides) = split_overrides(args.into_iter().map(Into::into).collect())?;
    let cli = Cli::try_parse_from(rest).map_err(|e| Error::Config(e.to_string()))?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in &overrides {
        cfg.set(k, v).map_err(|e| e.tagged("command line"))?;
    }
    if let Some(s) = cli.seed {
        cfg.gen.seed = s;
        cfg.hyper.seed = s;
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    match cli.command {
        Command::Generate => cmd_generate(&cfg, &cli.out),
        Command::Train { regime } => {
            if let Some(r) = regime {
                cfg.regime = r;
            }
            cmd_train(&cfg, &cli.out)
        }
        Command::Eval { cf } => cmd_eval(&cfg, &cli.out, if cf { Task::Cf } else { Task::Ctr }),
        Command::Sweep => cmd_sweep(&cfg, &cli.out),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let g = generate(&cfg.gen)?;
    write_log(&out.join("cf.tsv"), &g.cf_log)?;
    write_log(&out.join("ctr.tsv"), &g.ctr_log)?;
    write(&out.join("space.txt"), &g.space.to_text())?;
    write(
        &out.join("truth.txt"),
        &g.truth.to_text(&g.space.fingerprint()),
    )?;
    println!(
        "generated {} CF and {} CTR events over {} features",
        g.cf_log.rows.len(),
        g.ctr_log.rows.len(),
        g.space.len()
    );
    Ok(())
}

/// Both logs, the feature space and the encoded train/test splits.
struct Loaded {
    dir: PathBuf,
    cf_log: RawLog,
    ctr_log: RawLog,
    space: Arc<FeatureSpace>,
    web_train: Dataset,
    web_test: Dataset,
    ads_train: Dataset,
    ads_test: Dataset,
}

fn load(cfg: &RunConfig, out: &Path) -> Result<Loaded> {
    let dir = cfg.data.dir.clone().unwrap_or_else(|| out.to_path_buf());
    let cf_log = read_log(&dir.join("cf.tsv"))?;
    let ctr_log = read_log(&dir.join("ctr.tsv"))?;
    let space_path = dir.join("space.txt");
    let space = if space_path.exists() {
        FeatureSpace::from_text(&read(&space_path)?)
            .map_err(|e| e.tagged(space_path.display().to_string()))?
    } else {
        let mut records = cf_log.records();
        records.extend(ctr_log.records());
        build_feature_space(&records, &cfg.schema())?
    };
    let space = Arc::new(space);
    let d_web = encode_log(&cf_log, Task::Cf, &space)?;
    let d_ads = encode_log(&ctr_log, Task::Ctr, &space)?;
    let boundary = cfg.boundary();
    let (mut web_train, web_test) = split_by_time(&d_web, boundary);
    let (mut ads_train, ads_test) = split_by_time(&d_ads, boundary);
    if let Some(r) = cfg.data.cf_negatives {
        web_train = sample_cf_negatives(&web_train, r, cfg.hyper.seed)?.dataset;
    }
    if let Some(r) = cfg.data.ctr_downsample {
        ads_train = downsample_negatives(&ads_train, r, cfg.hyper.seed)?.dataset;
    }
    Ok(Loaded {
        dir,
        cf_log,
        ctr_log,
        space,
        web_train,
        web_test,
        ads_train,
        ads_test,
    })
}

fn lr_params(cfg: &RunConfig, lambda: f64) -> LrParams {
    LrParams {
        lambda,
        eta: cfg.lr.eta,
        epochs: cfg.lr.epochs,
        seed: cfg.hyper.seed,
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let d = load(cfg, out)?;
    let fp = d.space.fingerprint();
    if cfg.regime == "disjointlr" {
        let cf = train_lr_cf(
            &d.web_train,
            lr_params(cfg, cfg.lr.lambda_cf.unwrap_or(cfg.lr.lambda)),
        )?;
        let ctr = train_lr_ctr_transfer(
            &d.ads_train,
            cf.feature_weights(),
            lr_params(cfg, cfg.lr.lambda),
        )?;
        write(&out.join("lr_cf.txt"), &cf.to_text(&fp))?;
        write(&out.join("lr_ctr.txt"), &ctr.to_text(&fp))?;
        let centre_cf = vec![0.0; cf.features()];
        let centre_ctr = transfer_centre(&d.space, cf.feature_weights())?;
        let mut report = String::from("stage,lambda,objective\n");
        writeln!(
            report,
            "cf,{},{:.12e}",
            cf.lambda,
            lr_objective(&cf, &d.web_train, &centre_cf)?
        )
        .unwrap();
        writeln!(
            report,
            "ctr,{},{:.12e}",
            ctr.lambda,
            lr_objective(&ctr, &d.ads_train, &centre_ctr)?
        )
        .unwrap();
        write(&out.join("report.csv"), &report)?;
        println!("trained disjointlr (lambda {})", cfg.lr.lambda);
        return Ok(());
    }
    let regime = Regime::parse(&cfg.regime).ok_or_else(|| {
        Error::Config(format!(
            "unknown regime `{}` (base, disjoint, joint, disjointlr)",
            cfg.regime
        ))
    })?;
    let (jm, report) = train(&d.space, &d.web_train, &d.ads_train, &cfg.hyper, regime)?;
    write(&out.join("model_ctr.txt"), &jm.ads.to_text(&fp))?;
    if regime != Regime::Base {
        write(&out.join("model_cf.txt"), &jm.web.to_text(&fp))?;
    }
    write(&out.join("report.csv"), &report.to_csv())?;
    println!(
        "trained {regime} for {} epochs: final objective {:.6}",
        report.epochs.len(),
        report.objectives().last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

enum Scorer {
    Fm(FmModel),
    Lr(LrModel),
}

impl Scorer {
    fn task(&self) -> Task {
        match self {
            Scorer::Fm(m) => m.task(),
            Scorer::Lr(m) => m.task,
        }
    }
}

fn load_scorer(path: &Path) -> Result<(Scorer, String)> {
    let text = read(path)?;
    let tag = |e: Error| e.tagged(path.display().to_string());
    if text.starts_with("xferfm-lr") {
        let (m, fp) = LrModel::from_text(&text).map_err(tag)?;
        Ok((Scorer::Lr(m), fp))
    } else {
        let (m, fp) = FmModel::from_text(&text).map_err(tag)?;
        Ok((Scorer::Fm(m), fp))
    }
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, task: Task) -> Result<()> {
    let d = load(cfg, out)?;
    let fp = d.space.fingerprint();
    let (scorer, model_fp, label) = if cfg.eval.oracle {
        let path = d.dir.join("truth.txt");
        let (truth, tfp) =
            Truth::from_text(&read(&path)?).map_err(|e| e.tagged(path.display().to_string()))?;
        let m = if task == Task::Cf {
            truth.cf
        } else {
            truth.ctr
        };
        (Scorer::Fm(m), tfp, "oracle".to_string())
    } else {
        let default = match (task, cfg.regime.as_str()) {
            (Task::Cf, "disjointlr") => "lr_cf.txt",
            (Task::Ctr, "disjointlr") => "lr_ctr.txt",
            (Task::Cf, _) => "model_cf.txt",
            (Task::Ctr, _) => "model_ctr.txt",
        };
        let path = cfg.eval.model.clone().unwrap_or_else(|| out.join(default));
        let (s, mfp) = load_scorer(&path)?;
        (s, mfp, cfg.regime.clone())
    };
    if model_fp != fp {
        return Err(Error::Incompatible(format!(
            "model was trained on feature space {model_fp}, the data uses {fp}"
        )));
    }
    if scorer.task() != task {
        return Err(Error::Incompatible(format!(
            "{} model cannot score {} instances",
            scorer.task().as_str(),
            task.as_str()
        )));
    }
    let test = if task == Task::Cf {
        &d.web_test
    } else {
        &d.ads_test
    };
    let (s, y) = match &scorer {
        Scorer::Fm(m) => score_with(test, |x| predict(m, x))?,
        Scorer::Lr(m) => score_with(test, |x| lr_predict(m, x))?,
    };
    let (auc, rmse, n_pos, n_neg) = metrics(&s, &y)?;
    let report = EvalReport {
        regime: label,
        alpha: None,
        seed: cfg.hyper.seed,
        feature_set: "base".into(),
        auc,
        rmse,
        n_pos,
        n_neg,
    };
    write(
        &out.join("eval.csv"),
        &reports_to_csv(std::slice::from_ref(&report)),
    )?;
    println!(
        "{} test: auc {auc:.6} rmse {rmse:.6} ({n_pos} positives, {n_neg} negatives)",
        task.as_str()
    );
    Ok(())
}

fn summary_csv(r: &SweepResult) -> String {
    let opt = |a: Option<f64>| a.map(|a| a.to_string()).unwrap_or_default();
    let mut out = String::from("regime,median_best_auc,best_alpha,best_rmse_alpha,joint_lift\n");
    for s in &r.summaries {
        let lift = r
            .lift_over(s.regime)
            .map(|l| format!("{l:.10}"))
            .unwrap_or_default();
        writeln!(
            out,
            "{},{:.10},{},{},{lift}",
            s.regime.as_str(),
            s.median_best_auc,
            opt(s.median_best_alpha),
            opt(s.median_best_rmse_alpha)
        )
        .unwrap();
    }
    out
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let d = load(cfg, out)?;
    let spec = cfg.sweep_spec();
    if let Some(candidate) = &cfg.sweep.append {
        let schema = cfg.schema();
        let data = AppendData {
            cf_log: &d.cf_log,
            ctr_log: &d.ctr_log,
            schema: &schema,
            boundary: cfg.boundary(),
        };
        let base: Vec<&str> = cfg.sweep.base_attrs.iter().map(String::as_str).collect();
        let r = feature_appending_experiment(
            data,
            &base,
            candidate,
            &cfg.hyper,
            &spec,
            cfg.sweep.threshold,
        )?;
        write(&out.join("sweep.csv"), &r.sweep.to_csv())?;
        write(
            &out.join("verdict.csv"),
            &format!(
                "candidate,alpha_star,verdict\n{candidate},{},{}\n",
                r.alpha_star,
                r.verdict.as_str()
            ),
        )?;
        println!(
            "+{candidate}: alpha* {} -> {}",
            r.alpha_star,
            r.verdict.as_str()
        );
        return Ok(());
    }
    let r = alpha_sweep(
        &d.space,
        &d.web_train,
        &d.ads_train,
        &d.ads_test,
        &cfg.hyper,
        &spec,
    )?;
    write(&out.join("sweep.csv"), &r.to_csv())?;
    write(&out.join("summary.csv"), &summary_csv(&r))?;
    for s in &r.summaries {
        println!(
            "{:<11} median best auc {:.4}",
            s.regime.as_str(),
            s.median_best_auc
        );
    }
    if let Some(l) = r.lift_over(SweepRegime::Fm(Regime::Disjoint)) {
        println!("joint lift over disjoint {l:+.4}");
    }
    Ok(())
}
