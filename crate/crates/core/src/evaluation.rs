//! AUC and RMSE, the alpha sweep and the feature-appending experiment.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::baseline_lr::{lr_predict, train_lr_cf, train_lr_ctr_transfer, LrParams};
use crate::data::{
    build_feature_space, encode_log, split_by_time, Dataset, FeatureSpace, RawLog, Schema, Task,
};
use crate::error::{Error, Result};
use crate::fm::{predict, FmModel};
use crate::training::{init_params, run_mode, EpochMode, HyperParams, Regime};

/// Area under the ROC curve: `P(score_pos > score_neg) + P(tie) / 2`.
///
/// Computed from average tie ranks in integer arithmetic, so the result is
/// exactly the all-pairs count divided by the number of pairs.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives; a tie block over 0-based positions
    // [i, j) has average rank (i + 1 + j) / 2.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&x| labels[x]).count() as u128;
        rank_sum2 += pos * (i as u128 + 1 + j as u128);
        i = j;
    }
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

pub fn rmse(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("RMSE of an empty set".into()));
    }
    let sse: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| {
            let d = s - f64::from(u8::from(y));
            d * d
        })
        .sum();
    Ok((sse / scores.len() as f64).sqrt())
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::UndefinedMetric("non-finite score".into()));
    }
    Ok(())
}

/// One evaluated cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `base`, `disjoint`, `joint`, or `disjointlr:lambda=<value>`.
    pub regime: String,
    /// `None` for cells that do not depend on alpha.
    pub alpha: Option<f64>,
    pub seed: u64,
    pub feature_set: String,
    pub auc: f64,
    pub rmse: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

pub const SWEEP_HEADER: &str = "regime,alpha,seed,auc,rmse,n_pos,n_neg";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let alpha = self.alpha.map(|a| format!("{a}")).unwrap_or_default();
        format!(
            "{},{alpha},{},{:.10},{:.10},{},{}",
            self.regime, self.seed, self.auc, self.rmse, self.n_pos, self.n_neg
        )
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in reports {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

/// Scores and labels of `test` under an arbitrary predictor.
pub fn score_with<F>(test: &Dataset, mut f: F) -> Result<(Vec<f64>, Vec<bool>)>
where
    F: FnMut(&crate::data::SparseInstance) -> Result<f64>,
{
    let mut scores = Vec::with_capacity(test.len());
    for inst in test.instances() {
        scores.push(f(inst)?);
    }
    Ok((scores, test.instances().map(|x| x.label).collect()))
}

/// AUC, RMSE and class counts of a scored test set.
pub fn metrics(scores: &[f64], labels: &[bool]) -> Result<(f64, f64, usize, usize)> {
    let n_pos = labels.iter().filter(|&&y| y).count();
    Ok((
        auc(scores, labels)?,
        rmse(scores, labels)?,
        n_pos,
        labels.len() - n_pos,
    ))
}

pub fn evaluate_fm(m: &FmModel, test: &Dataset) -> Result<(f64, f64, usize, usize)> {
    let (s, y) = score_with(test, |x| predict(m, x))?;
    metrics(&s, &y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SweepRegime {
    Fm(Regime),
    DisjointLr,
}

impl SweepRegime {
    pub fn parse(s: &str) -> Option<SweepRegime> {
        match s {
            "disjointlr" => Some(SweepRegime::DisjointLr),
            other => Regime::parse(other).map(SweepRegime::Fm),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepRegime::Fm(r) => r.as_str(),
            SweepRegime::DisjointLr => "disjointlr",
        }
    }
}

/// Settings of the logistic-regression baseline cells.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSweep {
    pub lambdas: Vec<f64>,
    pub eta: f64,
    pub epochs: usize,
}

impl Default for LrSweep {
    fn default() -> Self {
        LrSweep {
            lambdas: vec![0.0, 0.1, 1.0, 10.0],
            eta: 0.05,
            epochs: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub grid: Vec<f64>,
    pub regimes: Vec<SweepRegime>,
    pub seeds: Vec<u64>,
    pub lr: LrSweep,
    pub feature_set: String,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            regimes: vec![
                SweepRegime::Fm(Regime::Base),
                SweepRegime::Fm(Regime::Disjoint),
                SweepRegime::Fm(Regime::Joint),
                SweepRegime::DisjointLr,
            ],
            seeds: vec![1, 2, 3, 4, 5],
            lr: LrSweep::default(),
            feature_set: "base".into(),
        }
    }
}

impl SweepSpec {
    fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("alpha grid is empty".into()));
        }
        if let Some(a) = self.grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.regimes.contains(&SweepRegime::DisjointLr) && self.lr.lambdas.is_empty() {
            return Err(Error::Config("lambda grid is empty".into()));
        }
        Ok(())
    }
}

/// Best settings of one regime, chosen on the test AUC as in the original
/// protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeSummary {
    pub regime: SweepRegime,
    /// Per seed, in seed order: the grid value with the highest AUC (alpha
    /// for FM regimes, lambda for the LR baseline) and that AUC.
    pub best_per_seed: Vec<(Option<f64>, f64)>,
    /// Per seed: the grid value with the lowest RMSE.
    pub best_rmse_per_seed: Vec<(Option<f64>, f64)>,
    pub median_best_auc: f64,
    /// Median over seeds of the AUC-optimal grid value.
    pub median_best_alpha: Option<f64>,
    pub median_best_rmse_alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub reports: Vec<EvalReport>,
    pub summaries: Vec<RegimeSummary>,
}

impl SweepResult {
    pub fn summary(&self, regime: SweepRegime) -> Option<&RegimeSummary> {
        self.summaries.iter().find(|s| s.regime == regime)
    }

    /// Median best AUC of Joint minus that of `other`.
    pub fn lift_over(&self, other: SweepRegime) -> Option<f64> {
        let joint = self.summary(SweepRegime::Fm(Regime::Joint))?;
        Some(joint.median_best_auc - self.summary(other)?.median_best_auc)
    }

    pub fn to_csv(&self) -> String {
        reports_to_csv(&self.reports)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Threads for sweep cells: `XFERFM_THREADS` if set and positive, else all.
fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("XFERFM_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| {
            Error::Config(format!("XFERFM_THREADS=`{v}` is not a positive integer"))
        })?;
        if n == 0 {
            return Err(Error::Config("XFERFM_THREADS must be positive".into()));
        }
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

#[derive(Clone, Copy, Debug)]
enum Cell {
    Base {
        seed: u64,
    },
    /// Disjoint stage 1 once per seed, then stage 2 for every alpha.
    Disjoint {
        seed: u64,
    },
    Joint {
        seed: u64,
        alpha: f64,
    },
    Lr {
        seed: u64,
        lambda: f64,
    },
}

fn fm_report(
    regime: Regime,
    alpha: Option<f64>,
    seed: u64,
    m: &FmModel,
    test: &Dataset,
    tag: &str,
) -> Result<EvalReport> {
    let (auc, rmse, n_pos, n_neg) = evaluate_fm(m, test)?;
    Ok(EvalReport {
        regime: regime.as_str().into(),
        alpha,
        seed,
        feature_set: tag.into(),
        auc,
        rmse,
        n_pos,
        n_neg,
    })
}

/// Trains every (regime, alpha, seed) cell and evaluates it on `test`.
///
/// Base depends on neither alpha nor the seed list: it is trained once, with
/// the first seed, and reported in a single row. The LR baseline sweeps
/// its own lambda grid instead of alpha. Cells run in parallel; the report
/// order depends only on the spec.
pub fn alpha_sweep(
    space: &Arc<FeatureSpace>,
    d_web: &Dataset,
    d_ads: &Dataset,
    test: &Dataset,
    hyper_base: &HyperParams,
    spec: &SweepSpec,
) -> Result<SweepResult> {
    spec.validate()?;
    hyper_base.validate()?;
    if test.task() != Task::Ctr {
        return Err(Error::Contract("sweeps evaluate on a CTR test set".into()));
    }
    let mut cells = Vec::new();
    for r in &spec.regimes {
        if *r == SweepRegime::Fm(Regime::Base) {
            cells.push(Cell::Base {
                seed: spec.seeds[0],
            });
            continue;
        }
        for &seed in &spec.seeds {
            match r {
                SweepRegime::Fm(Regime::Base) => {}
                SweepRegime::Fm(Regime::Disjoint) => cells.push(Cell::Disjoint { seed }),
                SweepRegime::Fm(Regime::Joint) => {
                    cells.extend(spec.grid.iter().map(|&alpha| Cell::Joint { seed, alpha }));
                }
                SweepRegime::DisjointLr => {
                    cells.extend(
                        spec.lr
                            .lambdas
                            .iter()
                            .map(|&lambda| Cell::Lr { seed, lambda }),
                    );
                }
            }
        }
    }
    let tag = spec.feature_set.as_str();
    let run = |cell: &Cell| -> Result<Vec<EvalReport>> {
        match *cell {
            Cell::Base { seed } => {
                let h = HyperParams {
                    seed,
                    ..hyper_base.clone()
                };
                let mut jm = init_params(space, &h)?;
                run_mode(&mut jm, d_web, d_ads, EpochMode::Base, 1, false)
                    .map_err(|e| e.tagged(format!("base, seed {seed}")))?;
                Ok(vec![fm_report(
                    Regime::Base,
                    None,
                    seed,
                    &jm.ads,
                    test,
                    tag,
                )?])
            }
            Cell::Disjoint { seed } => {
                let h = HyperParams {
                    seed,
                    ..hyper_base.clone()
                };
                let mut stage1 = init_params(space, &h)?;
                run_mode(
                    &mut stage1,
                    d_web,
                    d_ads,
                    EpochMode::DisjointStage1,
                    1,
                    false,
                )
                .map_err(|e| e.tagged(format!("disjoint stage 1, seed {seed}")))?;
                spec.grid
                    .iter()
                    .map(|&alpha| {
                        let mut jm = stage1.clone();
                        jm.hyper.alpha = alpha;
                        run_mode(
                            &mut jm,
                            d_web,
                            d_ads,
                            EpochMode::DisjointStage2,
                            h.epochs + 1,
                            false,
                        )
                        .map_err(|e| e.tagged(format!("disjoint, alpha {alpha}, seed {seed}")))?;
                        fm_report(Regime::Disjoint, Some(alpha), seed, &jm.ads, test, tag)
                    })
                    .collect()
            }
            Cell::Joint { seed, alpha } => {
                let h = HyperParams {
                    seed,
                    alpha,
                    ..hyper_base.clone()
                };
                let mut jm = init_params(space, &h)?;
                run_mode(&mut jm, d_web, d_ads, EpochMode::Joint, 1, false)
                    .map_err(|e| e.tagged(format!("joint, alpha {alpha}, seed {seed}")))?;
                Ok(vec![fm_report(
                    Regime::Joint,
                    Some(alpha),
                    seed,
                    &jm.ads,
                    test,
                    tag,
                )?])
            }
            Cell::Lr { seed, lambda } => {
                let p = LrParams {
                    lambda,
                    eta: spec.lr.eta,
                    epochs: spec.lr.epochs,
                    seed,
                };
                let tagged =
                    |e: Error| e.tagged(format!("disjointlr, lambda {lambda}, seed {seed}"));
                let cf = train_lr_cf(d_web, p).map_err(tagged)?;
                let ctr = train_lr_ctr_transfer(d_ads, cf.feature_weights(), p).map_err(tagged)?;
                let (s, y) = score_with(test, |x| lr_predict(&ctr, x))?;
                let (auc, rmse, n_pos, n_neg) = metrics(&s, &y)?;
                Ok(vec![EvalReport {
                    regime: format!("disjointlr:lambda={lambda}"),
                    alpha: None,
                    seed,
                    feature_set: tag.into(),
                    auc,
                    rmse,
                    n_pos,
                    n_neg,
                }])
            }
        }
    };
    let pool = thread_pool()?;
    let results: Vec<Result<Vec<EvalReport>>> =
        pool.install(|| cells.par_iter().map(run).collect());
    let mut reports = Vec::new();
    for r in results {
        reports.extend(r?);
    }
    let summaries = spec
        .regimes
        .iter()
        .map(|&r| summarise(r, &reports, &spec.seeds))
        .collect();
    Ok(SweepResult { reports, summaries })
}

fn summarise(regime: SweepRegime, reports: &[EvalReport], seeds: &[u64]) -> RegimeSummary {
    let belongs = |r: &EvalReport| match regime {
        SweepRegime::DisjointLr => r.regime.starts_with("disjointlr:"),
        SweepRegime::Fm(x) => r.regime == x.as_str(),
    };
    let grid_value = |r: &EvalReport| match regime {
        SweepRegime::DisjointLr => r
            .regime
            .strip_prefix("disjointlr:lambda=")
            .and_then(|l| l.parse().ok()),
        SweepRegime::Fm(_) => r.alpha,
    };
    let mut best = Vec::new();
    let mut best_rmse = Vec::new();
    for &seed in seeds {
        let cells: Vec<&EvalReport> = reports
            .iter()
            .filter(|r| r.seed == seed && belongs(r))
            .collect();
        // Earliest grid value wins ties.
        let mut b: Option<&EvalReport> = None;
        let mut br: Option<&EvalReport> = None;
        for c in &cells {
            if b.is_none_or(|x| c.auc > x.auc) {
                b = Some(c);
            }
            if br.is_none_or(|x| c.rmse < x.rmse) {
                br = Some(c);
            }
        }
        if let (Some(b), Some(br)) = (b, br) {
            best.push((grid_value(b), b.auc));
            best_rmse.push((grid_value(br), br.rmse));
        }
    }
    let alphas = |v: &[(Option<f64>, f64)]| {
        let a: Vec<f64> = v.iter().filter_map(|x| x.0).collect();
        (!a.is_empty()).then(|| median(&a))
    };
    RegimeSummary {
        regime,
        median_best_auc: median(&best.iter().map(|x| x.1).collect::<Vec<_>>()),
        median_best_alpha: alphas(&best),
        median_best_rmse_alpha: alphas(&best_rmse),
        best_per_seed: best,
        best_rmse_per_seed: best_rmse,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    TransferHelpful,
    NoTransferValue,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::TransferHelpful => "transfer-helpful",
            Verdict::NoTransferValue => "no transfer value",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppendResult {
    pub sweep: SweepResult,
    /// Median over seeds of the Joint AUC-optimal alpha.
    pub alpha_star: f64,
    pub verdict: Verdict,
}

/// Inputs of the feature-appending experiment: raw logs of both tasks, the
/// full schema, and the time split.
#[derive(Clone, Copy, Debug)]
pub struct AppendData<'a> {
    pub cf_log: &'a RawLog,
    pub ctr_log: &'a RawLog,
    pub schema: &'a Schema,
    pub boundary: i64,
}

/// Rebuilds the feature space on `base_attrs` plus `candidate`, runs the
/// Joint alpha sweep and judges the candidate by its best alpha: a median
/// alpha* of at least `threshold` reads as transfer-helpful.
pub fn feature_appending_experiment(
    data: AppendData<'_>,
    base_attrs: &[&str],
    candidate: &str,
    hyper: &HyperParams,
    spec: &SweepSpec,
    threshold: f64,
) -> Result<AppendResult> {
    if data.schema.group_of(candidate).is_none() {
        return Err(Error::Schema(format!("unknown attribute `{candidate}`")));
    }
    let mut keep: Vec<&str> = base_attrs.to_vec();
    if !keep.contains(&candidate) {
        keep.push(candidate);
    }
    let schema = data.schema.subset(&keep)?;
    let (cf, ctr) = (data.cf_log.project(&keep), data.ctr_log.project(&keep));
    let mut records = cf.records();
    records.extend(ctr.records());
    let space = Arc::new(build_feature_space(&records, &schema)?);
    let d_web = encode_log(&cf, Task::Cf, &space)?;
    let d_ads = encode_log(&ctr, Task::Ctr, &space)?;
    let (web_train, _) = split_by_time(&d_web, data.boundary);
    let (ads_train, ads_test) = split_by_time(&d_ads, data.boundary);
    let spec = SweepSpec {
        regimes: vec![SweepRegime::Fm(Regime::Joint)],
        feature_set: format!("+{candidate}"),
        ..spec.clone()
    };
    let sweep = alpha_sweep(&space, &web_train, &ads_train, &ads_test, hyper, &spec)?;
    let alpha_star = sweep
        .summary(SweepRegime::Fm(Regime::Joint))
        .and_then(|s| s.median_best_alpha)
        .unwrap_or(f64::NAN);
    let verdict = if alpha_star >= threshold {
        Verdict::TransferHelpful
    } else {
        Verdict::NoTransferValue
    };
    Ok(AppendResult {
        sweep,
        alpha_star,
        verdict,
    })
}
