//! Per-instance SGD with an amortised dense prior step.
//!
//! Every step applies `eta / N` of the prior gradient to every parameter.
//! That step is affine in the parameters, so a feature that has not been
//! touched for `k` steps is brought up to date in closed form when it next
//! appears in an instance. The trajectory is the dense one, not an
//! approximation of it.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::objective::{averaged, mean_log_likelihood, objective_value, ObjectiveSpec};
use super::{HyperParams, JointModel, PriorLayout};
use crate::data::{Dataset, FeatureSpace, Group, Task};
use crate::error::{Error, Result};
use crate::fm::{sigmoid, FmModel, GroupSums};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    Base,
    Disjoint,
    Joint,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Base => "base",
            Regime::Disjoint => "disjoint",
            Regime::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "base" => Some(Regime::Base),
            "disjoint" => Some(Regime::Disjoint),
            "joint" => Some(Regime::Joint),
            _ => None,
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochMode {
    /// CTR stream only; user/publisher CTR parameters get independent priors.
    Base,
    /// CF stream only, CF priors.
    DisjointStage1,
    /// CF and CTR streams; CF parameters frozen and used as bridge centres.
    DisjointStage2,
    /// CF and CTR streams with live bridge priors.
    Joint,
}

impl EpochMode {
    fn stage_tag(self) -> u64 {
        match self {
            EpochMode::Base => 0,
            EpochMode::DisjointStage1 => 1,
            EpochMode::DisjointStage2 => 2,
            EpochMode::Joint => 3,
        }
    }

    fn layout(self) -> PriorLayout {
        match self {
            EpochMode::Base => PriorLayout::Independent,
            EpochMode::DisjointStage1 => PriorLayout::CfOnly,
            EpochMode::DisjointStage2 | EpochMode::Joint => PriorLayout::Bridge,
        }
    }

    fn uses_cf(self) -> bool {
        self != EpochMode::Base
    }

    fn uses_ctr(self) -> bool {
        self != EpochMode::DisjointStage1
    }

    fn updates_web(self) -> bool {
        matches!(self, EpochMode::DisjointStage1 | EpochMode::Joint)
    }

    fn updates_ads(self) -> bool {
        self != EpochMode::DisjointStage1
    }

    /// Objective this mode ascends, given the datasets.
    pub(crate) fn objective(
        self,
        alpha: f64,
        d_web: &Dataset,
        d_ads: &Dataset,
    ) -> Result<ObjectiveSpec> {
        let empty = |d: &Dataset, what: &str| {
            if d.is_empty() {
                Err(Error::Config(format!("{what} training set is empty")))
            } else {
                Ok(())
            }
        };
        match self {
            EpochMode::Base => {
                empty(d_ads, "CTR")?;
                Ok(ObjectiveSpec {
                    cf_weight: 0.0,
                    ctr_weight: averaged(1.0, d_ads.len()),
                    layout: PriorLayout::Independent,
                })
            }
            EpochMode::DisjointStage1 => {
                empty(d_web, "CF")?;
                Ok(ObjectiveSpec {
                    cf_weight: averaged(1.0, d_web.len()),
                    ctr_weight: 0.0,
                    layout: PriorLayout::CfOnly,
                })
            }
            EpochMode::DisjointStage2 | EpochMode::Joint => {
                ObjectiveSpec::joint(alpha, d_web, d_ads)
            }
        }
    }
}

/// Closed-form powers of the per-step prior map for one parameter kind.
#[derive(Clone, Copy, Debug)]
enum Flow {
    Frozen,
    /// `x <- c + r (x - c)` with a fixed centre.
    Toward {
        centre: Centre,
        rate: Rate,
    },
    /// Coupled (web, ads) pair: `y <- M y` with `y = x - mu`.
    Pair(PairFlow),
}

#[derive(Clone, Copy, Debug)]
enum Centre {
    /// Prior mean for this block; the latent-vector mean is looked up per column.
    Mean,
    /// The (frozen) CF value of the same parameter.
    Web,
}

/// A per-step factor `1 + x` whose powers are taken as `exp(k ln(1 + x))`.
#[derive(Clone, Copy, Debug)]
struct Rate {
    once: f64,
    log: f64,
}

impl Rate {
    fn new(x: f64) -> Rate {
        Rate {
            once: 1.0 + x,
            log: if x > -1.0 { x.ln_1p() } else { f64::NAN },
        }
    }

    fn pow(self, k: u64) -> f64 {
        match k {
            0 => 1.0,
            1 => self.once,
            _ if self.log.is_nan() => self.once.powf(k as f64),
            _ => (k as f64 * self.log).exp(),
        }
    }
}

/// `M^k = l1^k P1 + l2^k P2`, eigen-split of the symmetric step matrix.
#[derive(Clone, Copy, Debug)]
struct PairFlow {
    rates: [Rate; 2],
    /// Projectors stored as (xx, xy, yy) of a symmetric matrix.
    p: [[f64; 3]; 2],
    /// `M` itself, used for single steps.
    once: [f64; 3],
}

impl PairFlow {
    /// Step matrix `I + h A`, `A = [[-(p+q), q], [q, -q]]`, with `p` the CF
    /// prior precision and `q` the bridge precision.
    fn new(h: f64, var_web: f64, var_bridge: f64) -> PairFlow {
        let (p, q) = (1.0 / var_web, 1.0 / var_bridge);
        let (a, b, d) = (-(p + q), q, -q);
        let mid = 0.5 * (a + d);
        let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
        let (e1, e2) = (mid + rad, mid - rad);
        let gap = e1 - e2;
        PairFlow {
            rates: [Rate::new(h * e1), Rate::new(h * e2)],
            p: [
                [(a - e2) / gap, b / gap, (d - e2) / gap],
                [(e1 - a) / gap, -b / gap, (e1 - d) / gap],
            ],
            once: [1.0 + h * a, h * b, 1.0 + h * d],
        }
    }

    fn power(&self, k: u64) -> [f64; 3] {
        if k == 1 {
            return self.once;
        }
        let (s1, s2) = (self.rates[0].pow(k), self.rates[1].pow(k));
        let [p, r] = self.p;
        [
            s1 * p[0] + s2 * r[0],
            s1 * p[1] + s2 * r[1],
            s1 * p[2] + s2 * r[2],
        ]
    }
}

fn apply_pair(m: [f64; 3], web: &mut f64, ads: &mut f64, mu: f64) {
    let (y0, y1) = (*web - mu, *ads - mu);
    *web = mu + m[0] * y0 + m[1] * y1;
    *ads = mu + m[1] * y0 + m[2] * y1;
}

/// Prior dynamics of the user/publisher block and the ad block for one mode.
struct PriorEngine {
    up_end: usize,
    web_w: Flow,
    web_v: Flow,
    ads_w: Flow,
    ads_v: Flow,
    ad_w: Flow,
    ad_v: Flow,
    mean_w_web: f64,
    mean_w_ad: f64,
    mean_v_web: Vec<f64>,
    mean_v_ad: Vec<f64>,
    k: usize,
}

impl PriorEngine {
    fn new(mode: EpochMode, hp: &HyperParams, h: f64, up_end: usize) -> PriorEngine {
        let toward = |centre: Centre, var: f64| Flow::Toward {
            centre,
            rate: Rate::new(-h / var),
        };
        let (web_w, web_v, ads_w, ads_v) = match mode {
            EpochMode::Base => (
                Flow::Frozen,
                Flow::Frozen,
                toward(Centre::Mean, hp.var_w_web),
                toward(Centre::Mean, hp.var_v_web),
            ),
            EpochMode::DisjointStage1 => (
                toward(Centre::Mean, hp.var_w_web),
                toward(Centre::Mean, hp.var_v_web),
                Flow::Frozen,
                Flow::Frozen,
            ),
            EpochMode::DisjointStage2 => (
                Flow::Frozen,
                Flow::Frozen,
                toward(Centre::Web, hp.var_w_bridge),
                toward(Centre::Web, hp.var_v_bridge),
            ),
            EpochMode::Joint => {
                let w = Flow::Pair(PairFlow::new(h, hp.var_w_web, hp.var_w_bridge));
                let v = Flow::Pair(PairFlow::new(h, hp.var_v_web, hp.var_v_bridge));
                (w, v, w, v)
            }
        };
        let (ad_w, ad_v) = if mode.updates_ads() {
            (
                toward(Centre::Mean, hp.var_w_ad),
                toward(Centre::Mean, hp.var_v_ad),
            )
        } else {
            (Flow::Frozen, Flow::Frozen)
        };
        PriorEngine {
            up_end,
            web_w,
            web_v,
            ads_w,
            ads_v,
            ad_w,
            ad_v,
            mean_w_web: hp.mean_w_web,
            mean_w_ad: hp.mean_w_ad,
            mean_v_web: (0..hp.k).map(|f| hp.v_web_mean(f)).collect(),
            mean_v_ad: (0..hp.k).map(|f| hp.v_ad_mean(f)).collect(),
            k: hp.k,
        }
    }

    /// Apply `steps` prior steps to every parameter of feature `i`.
    fn advance(&self, web: &mut FmModel, ads: &mut FmModel, i: usize, steps: u64) {
        if steps == 0 {
            return;
        }
        let k = self.k;
        if i >= self.up_end {
            scalar(
                self.ad_w,
                steps,
                std::slice::from_mut(&mut ads.w[i]),
                std::slice::from_ref(&self.mean_w_ad),
                &[],
            );
            scalar(self.ad_v, steps, ads.row_mut(i), &self.mean_v_ad, &[]);
            return;
        }
        if let (Flow::Pair(pw), Flow::Pair(pv)) = (self.web_w, self.web_v) {
            apply_pair(
                pw.power(steps),
                &mut web.w[i],
                &mut ads.w[i],
                self.mean_w_web,
            );
            let m = pv.power(steps);
            let (wr, ar) = (
                &mut web.v[i * k..(i + 1) * k],
                &mut ads.v[i * k..(i + 1) * k],
            );
            for f in 0..k {
                apply_pair(m, &mut wr[f], &mut ar[f], self.mean_v_web[f]);
            }
            return;
        }
        scalar(
            self.web_w,
            steps,
            std::slice::from_mut(&mut web.w[i]),
            std::slice::from_ref(&self.mean_w_web),
            &[],
        );
        scalar(self.web_v, steps, web.row_mut(i), &self.mean_v_web, &[]);
        scalar(
            self.ads_w,
            steps,
            std::slice::from_mut(&mut ads.w[i]),
            std::slice::from_ref(&self.mean_w_web),
            std::slice::from_ref(&web.w[i]),
        );
        scalar(
            self.ads_v,
            steps,
            ads.row_mut(i),
            &self.mean_v_web,
            web.row(i),
        );
    }
}

/// Scalar decay of `xs` toward `means` or toward the matching `web` values.
fn scalar(flow: Flow, steps: u64, xs: &mut [f64], means: &[f64], web: &[f64]) {
    if let Flow::Toward { centre, rate } = flow {
        let r = rate.pow(steps);
        let centres = match centre {
            Centre::Mean => means,
            Centre::Web => web,
        };
        for (x, c) in xs.iter_mut().zip(centres) {
            *x = c + r * (*x - c);
        }
    }
}

/// The shuffled instance stream of one epoch: `(task, position in its dataset)`.
pub(crate) fn epoch_stream(
    mode: EpochMode,
    n_web: usize,
    n_ads: usize,
    seed: u64,
    epoch: usize,
) -> Vec<(Task, usize)> {
    let mut stream = Vec::with_capacity(n_web + n_ads);
    if mode.uses_cf() {
        stream.extend((0..n_web).map(|i| (Task::Cf, i)));
    }
    if mode.uses_ctr() {
        stream.extend((0..n_ads).map(|i| (Task::Ctr, i)));
    }
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 8)
        .wrapping_add(mode.stage_tag());
    stream.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    stream
}

fn check_data(jm: &JointModel, d: &Dataset) -> Result<()> {
    if !Arc::ptr_eq(d.space(), &jm.space) && d.space().fingerprint() != jm.space.fingerprint() {
        return Err(Error::Incompatible(format!(
            "{} dataset was encoded with a different feature space",
            d.task()
        )));
    }
    Ok(())
}

/// One pass over the mode's shuffled stream. `epoch` only seeds the shuffle
/// and labels diagnostics.
pub fn sgd_epoch(
    jm: &mut JointModel,
    d_web: &Dataset,
    d_ads: &Dataset,
    mode: EpochMode,
    epoch: usize,
) -> Result<()> {
    jm.hyper.validate()?;
    let spec = mode.objective(jm.hyper.alpha, d_web, d_ads)?;
    check_data(jm, d_web)?;
    check_data(jm, d_ads)?;
    let stream = epoch_stream(mode, d_web.len(), d_ads.len(), jm.hyper.seed, epoch);
    let n = stream.len();
    let eta = jm.hyper.eta;
    if n == 0 || eta == 0.0 {
        return Ok(());
    }
    let h = eta / n as f64;
    let up_end = jm.web.range(Group::Publisher).end;
    let engine = PriorEngine::new(mode, &jm.hyper, h, up_end);
    let k = jm.hyper.k;
    let mut last = vec![0u64; jm.ads.len()];
    let mut sums = GroupSums::new(k);
    let mut total = vec![0.0; k];
    let mut mult = vec![0.0; k];
    let web_events = d_web.events();
    let ads_events = d_ads.events();
    let (web, ads) = (&mut jm.web, &mut jm.ads);

    for (t, &(task, pos)) in stream.iter().enumerate() {
        let t = t as u64;
        let (inst, beta, trains) = match task {
            Task::Cf => (
                &web_events[pos].instance,
                spec.cf_weight,
                mode.updates_web(),
            ),
            Task::Ctr => (&ads_events[pos].instance, spec.ctr_weight, true),
        };
        if !trains || beta == 0.0 {
            continue;
        }
        for i in inst.active() {
            engine.advance(web, ads, i, t - last[i]);
            last[i] = t;
        }
        let z = {
            let m: &FmModel = if task == Task::Cf { web } else { ads };
            m.check(inst)?;
            m.logit_with_sums(inst, &mut sums)
        };
        let step = eta * beta * (inst.y() - sigmoid(z));
        for f in 0..k {
            total[f] = sums.user[f] + sums.publisher[f] + sums.ad[f];
        }
        // Prior step at the pre-update point, then the likelihood step.
        for i in inst.active() {
            engine.advance(web, ads, i, 1);
            last[i] = t + 1;
        }
        let m: &mut FmModel = if task == Task::Cf { web } else { ads };
        m.w0 += step;
        for group in Group::ALL {
            let own = match group {
                Group::User => &sums.user,
                Group::Publisher => &sums.publisher,
                Group::Ad => &sums.ad,
            };
            for f in 0..k {
                mult[f] = total[f] - own[f];
            }
            for &i in inst.group(group) {
                m.w[i] += step;
                let row = m.row_mut(i);
                for f in 0..k {
                    row[f] += step * mult[f];
                }
            }
        }
        if !step.is_finite() || !m.w0.is_finite() || inst.active().any(|i| !m.w[i].is_finite()) {
            return Err(non_finite(epoch, t));
        }
    }
    for (i, l) in last.iter().enumerate() {
        engine.advance(web, ads, i, n as u64 - l);
    }
    if !web.is_finite() || !ads.is_finite() {
        return Err(non_finite(epoch, n as u64));
    }
    Ok(())
}

fn non_finite(epoch: usize, step: u64) -> Error {
    Error::NonFinite(format!("after epoch {epoch}, step {step}"))
}

/// Objective trace of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// The objective the epoch's mode ascends.
    pub objective: f64,
    /// Mean per-instance log-likelihoods; NaN when the dataset is empty.
    pub cf_loglik: f64,
    pub ctr_loglik: f64,
    pub log_prior: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub regime: Regime,
    pub epochs: Vec<EpochRecord>,
    pub cf_loglik: f64,
    pub ctr_loglik: f64,
    pub log_prior: f64,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn objectives(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.objective).collect()
    }

    /// `epoch,joint_objective,cf_loglik,ctr_loglik,log_prior`, one row per
    /// epoch. Wall time is left out so the file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,joint_objective,cf_loglik,ctr_loglik,log_prior\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{:.12e},{:.12e},{:.12e},{:.12e}",
                e.epoch, e.objective, e.cf_loglik, e.ctr_loglik, e.log_prior
            )
            .unwrap();
        }
        out
    }
}

fn record(
    jm: &JointModel,
    d_web: &Dataset,
    d_ads: &Dataset,
    mode: EpochMode,
    epoch: usize,
) -> Result<EpochRecord> {
    let spec = mode.objective(jm.hyper.alpha, d_web, d_ads)?;
    let mean = |m: &FmModel, d: &Dataset| {
        if d.is_empty() {
            Ok(f64::NAN)
        } else {
            mean_log_likelihood(m, d)
        }
    };
    Ok(EpochRecord {
        epoch,
        objective: objective_value(jm, d_web, d_ads, spec)?,
        cf_loglik: mean(&jm.web, d_web)?,
        ctr_loglik: mean(&jm.ads, d_ads)?,
        log_prior: super::log_prior_with(jm, mode.layout()),
    })
}

/// Runs `epochs` epochs of `mode`, numbering them from `first_epoch`.
/// Objective records are only computed when `trace` is set.
pub(crate) fn run_mode(
    jm: &mut JointModel,
    d_web: &Dataset,
    d_ads: &Dataset,
    mode: EpochMode,
    first_epoch: usize,
    trace: bool,
) -> Result<Vec<EpochRecord>> {
    mode.objective(jm.hyper.alpha, d_web, d_ads)?;
    let mut out = Vec::new();
    for e in first_epoch..first_epoch + jm.hyper.epochs {
        sgd_epoch(jm, d_web, d_ads, mode, e)?;
        if trace {
            let r = record(jm, d_web, d_ads, mode, e)?;
            log::debug!("{mode:?} epoch {e}: objective {:.6}", r.objective);
            out.push(r);
        }
    }
    Ok(out)
}

pub(crate) fn stages(regime: Regime) -> &'static [EpochMode] {
    match regime {
        Regime::Base => &[EpochMode::Base],
        Regime::Disjoint => &[EpochMode::DisjointStage1, EpochMode::DisjointStage2],
        Regime::Joint => &[EpochMode::Joint],
    }
}

/// Initialise from `hyper` and run a full schedule. Disjoint runs `epochs`
/// CF-only epochs followed by `epochs` CTR epochs, so its report has twice
/// as many rows.
pub fn train(
    space: &Arc<FeatureSpace>,
    d_web: &Dataset,
    d_ads: &Dataset,
    hyper: &HyperParams,
    regime: Regime,
) -> Result<(JointModel, TrainReport)> {
    let start = Instant::now();
    let mut jm = super::init_params(space, hyper)?;
    let stages = stages(regime);
    for &mode in stages {
        mode.objective(hyper.alpha, d_web, d_ads)?;
    }
    let mut epochs = Vec::new();
    for &mode in stages {
        let first = epochs.len() + 1;
        epochs.extend(run_mode(&mut jm, d_web, d_ads, mode, first, true)?);
    }
    let last = match epochs.last() {
        Some(r) => r.clone(),
        None => record(&jm, d_web, d_ads, *stages.last().unwrap(), 0)?,
    };
    Ok((
        jm,
        TrainReport {
            regime,
            epochs,
            cf_loglik: last.cf_loglik,
            ctr_loglik: last.ctr_loglik,
            log_prior: last.log_prior,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fm::tests::random_model;
    use crate::testutil::{dataset_of, tiny_space};
    use crate::training::{
        grad_instance, grad_prior_with, init_params, joint_objective, JointGrad,
    };
    use rand::Rng;

    fn setup(
        seed: u64,
        n_web: usize,
        n_ads: usize,
    ) -> (Arc<FeatureSpace>, Dataset, Dataset, JointModel) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let dims = [5, 4, 3];
        let space = tiny_space(dims);
        let web = dataset_of(&space, Task::Cf, n_web, &mut r);
        let ads = dataset_of(&space, Task::Ctr, n_ads, &mut r);
        let k = 2;
        let hyper = HyperParams {
            k,
            alpha: r.random_range(0.1..0.9),
            eta: 3.0,
            seed,
            var_w_web: r.random_range(0.5..2.0),
            var_v_web: r.random_range(0.5..2.0),
            var_w_bridge: r.random_range(0.2..2.0),
            var_v_bridge: r.random_range(0.2..2.0),
            var_w_ad: r.random_range(0.5..2.0),
            var_v_ad: r.random_range(0.5..2.0),
            mean_w_web: 0.1,
            mean_w_ad: -0.2,
            mean_v_web: vec![0.05, -0.05],
            mean_v_ad: vec![0.0, 0.1],
            ..Default::default()
        };
        let jm = JointModel {
            web: random_model(&mut r, Task::Cf, dims, k, 0.5),
            ads: random_model(&mut r, Task::Ctr, dims, k, 0.5),
            hyper,
            space: Arc::clone(&space),
        };
        (space, web, ads, jm)
    }

    /// Textbook dense SGD: every step evaluates the full prior gradient.
    fn naive_epoch(
        jm: &mut JointModel,
        d_web: &Dataset,
        d_ads: &Dataset,
        mode: EpochMode,
        epoch: usize,
    ) {
        let spec = mode.objective(jm.hyper.alpha, d_web, d_ads).unwrap();
        let stream = epoch_stream(mode, d_web.len(), d_ads.len(), jm.hyper.seed, epoch);
        let n = stream.len() as f64;
        let eta = jm.hyper.eta;
        let k = jm.hyper.k;
        for &(task, pos) in &stream {
            let mut g: JointGrad = grad_prior_with(jm, mode.layout());
            for mg in [&mut g.web, &mut g.ads] {
                mg.w.iter_mut().chain(mg.v.iter_mut()).for_each(|x| *x /= n);
            }
            match task {
                Task::Cf => {
                    let gi = grad_instance(&jm.web, &d_web.events()[pos].instance).unwrap();
                    g.web.add_sparse(&gi, spec.cf_weight, k);
                }
                Task::Ctr => {
                    let gi = grad_instance(&jm.ads, &d_ads.events()[pos].instance).unwrap();
                    g.ads.add_sparse(&gi, spec.ctr_weight, k);
                }
            }
            let apply = |m: &mut FmModel, g: &crate::training::ModelGrad| {
                m.w0 += eta * g.w0;
                m.w.iter_mut().zip(&g.w).for_each(|(x, d)| *x += eta * d);
                m.v.iter_mut().zip(&g.v).for_each(|(x, d)| *x += eta * d);
            };
            if mode.updates_web() {
                apply(&mut jm.web, &g.web);
            }
            if mode.updates_ads() {
                apply(&mut jm.ads, &g.ads);
            }
        }
    }

    fn max_diff(a: &FmModel, b: &FmModel) -> f64 {
        std::iter::once((a.w0, b.w0))
            .chain(a.w.iter().copied().zip(b.w.iter().copied()))
            .chain(a.v.iter().copied().zip(b.v.iter().copied()))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn lazy_prior_matches_dense_sgd() {
        for seed in 0..6 {
            for mode in [
                EpochMode::Base,
                EpochMode::DisjointStage1,
                EpochMode::DisjointStage2,
                EpochMode::Joint,
            ] {
                let (_, web, ads, jm0) = setup(seed, 23, 17);
                let (mut lazy, mut dense) = (jm0.clone(), jm0.clone());
                for e in 1..=3 {
                    sgd_epoch(&mut lazy, &web, &ads, mode, e).unwrap();
                    naive_epoch(&mut dense, &web, &ads, mode, e);
                }
                let d = max_diff(&lazy.web, &dense.web).max(max_diff(&lazy.ads, &dense.ads));
                assert!(d < 1e-10, "{mode:?} seed {seed}: {d}");
                if !mode.updates_web() {
                    assert_eq!(lazy.web, jm0.web);
                }
                if !mode.updates_ads() {
                    assert_eq!(lazy.ads, jm0.ads);
                }
            }
        }
    }

    #[test]
    fn pair_flow_matches_repeated_steps() {
        let (h, vw, vb, mu) = (0.03, 0.7, 0.2, 0.4);
        let flow = PairFlow::new(h, vw, vb);
        let (mut a, mut b) = (1.3, -0.8);
        let (mut c, mut d) = (a, b);
        for _ in 0..500 {
            apply_pair(flow.power(1), &mut c, &mut d, mu);
        }
        let (mut x, mut y) = (a, b);
        for _ in 0..500 {
            let (gx, gy) = (-(x - mu) / vw + (y - x) / vb, -(y - x) / vb);
            x += h * gx;
            y += h * gy;
        }
        apply_pair(flow.power(500), &mut a, &mut b, mu);
        assert!((a - x).abs() < 1e-12 && (b - y).abs() < 1e-12);
        assert!((c - x).abs() < 1e-12 && (d - y).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (_, web, ads, mut jm) = setup(3, 10, 10);
        jm.hyper.eta = 0.0;
        let before = jm.clone();
        for mode in [
            EpochMode::Base,
            EpochMode::DisjointStage1,
            EpochMode::DisjointStage2,
            EpochMode::Joint,
        ] {
            sgd_epoch(&mut jm, &web, &ads, mode, 1).unwrap();
        }
        assert_eq!(jm.web, before.web);
        assert_eq!(jm.ads, before.ads);
    }

    #[test]
    fn joint_alpha_one_moves_ctr_only_through_prior() {
        let (space, web, ads, mut jm) = setup(4, 12, 12);
        jm.hyper.alpha = 1.0;
        let w0 = jm.ads.w0;
        sgd_epoch(&mut jm, &web, &ads, EpochMode::Joint, 1).unwrap();
        assert_eq!(jm.ads.w0, w0);
        let empty = Dataset::empty(space, Task::Ctr);
        let mut other = jm.clone();
        sgd_epoch(&mut other, &web, &empty, EpochMode::Joint, 2).unwrap();
        assert_eq!(other.ads.w0, w0);
    }

    #[test]
    fn disjoint_stage_two_freezes_cf() {
        let (space, web, ads, _) = setup(5, 30, 20);
        let hyper = HyperParams {
            k: 3,
            eta: 2.0,
            epochs: 4,
            ..Default::default()
        };
        let (stage1, _) = {
            let mut jm = init_params(&space, &hyper).unwrap();
            for e in 1..=hyper.epochs {
                sgd_epoch(&mut jm, &web, &ads, EpochMode::DisjointStage1, e).unwrap();
            }
            (jm, ())
        };
        let (full, report) = train(&space, &web, &ads, &hyper, Regime::Disjoint).unwrap();
        assert_eq!(full.web.to_text("x"), stage1.web.to_text("x"));
        assert_eq!(report.epochs.len(), 2 * hyper.epochs);
        assert_ne!(full.ads, init_params(&space, &hyper).unwrap().ads);
    }

    #[test]
    fn bridge_pull_shrinks_gap_without_data() {
        let (_, _, _, mut jm) = setup(6, 1, 1);
        jm.hyper.eta = 0.5;
        let up = jm.web.range(Group::Publisher).end;
        let engine = PriorEngine::new(EpochMode::Joint, &jm.hyper, 0.01, up);
        let gap = |j: &JointModel| {
            let mut s = 0.0;
            for i in 0..up {
                s += (j.ads.w[i] - j.web.w[i]).powi(2);
                for f in 0..j.hyper.k {
                    s += (j.ads.row(i)[f] - j.web.row(i)[f]).powi(2);
                }
            }
            s.sqrt()
        };
        let mut prev = gap(&jm);
        for round in 0..50 {
            for i in 0..jm.ads.len() {
                engine.advance(&mut jm.web, &mut jm.ads, i, 7);
            }
            let now = gap(&jm);
            assert!(now < prev, "round {round}: {now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (space, web, ads, _) = setup(7, 40, 30);
        let hyper = HyperParams {
            k: 3,
            eta: 5.0,
            epochs: 3,
            alpha: 0.4,
            ..Default::default()
        };
        for regime in [Regime::Base, Regime::Disjoint, Regime::Joint] {
            let (a, ra) = train(&space, &web, &ads, &hyper, regime).unwrap();
            let (b, rb) = train(&space, &web, &ads, &hyper, regime).unwrap();
            assert_eq!(a.web.to_text("s"), b.web.to_text("s"));
            assert_eq!(a.ads.to_text("s"), b.ads.to_text("s"));
            assert_eq!(ra.to_csv(), rb.to_csv());
        }
    }

    #[test]
    fn objective_rises_on_small_data() {
        let (space, web, ads, _) = setup(8, 20, 20);
        let hyper = HyperParams {
            k: 2,
            eta: 0.05,
            epochs: 50,
            alpha: 0.5,
            var_w_bridge: 1.0,
            var_v_bridge: 1.0,
            ..Default::default()
        };
        let (jm, report) = train(&space, &web, &ads, &hyper, Regime::Joint).unwrap();
        let obj = report.objectives();
        let rises = obj.windows(2).filter(|w| w[1] >= w[0]).count();
        assert!(rises + 1 >= 45, "{rises} rising epochs");
        let initial = joint_objective(&init_params(&space, &hyper).unwrap(), &web, &ads).unwrap();
        assert!(obj[49] > initial);
        assert!((joint_objective(&jm, &web, &ads).unwrap() - obj[49]).abs() < 1e-12);
    }

    #[test]
    fn init_params_statistics() {
        let space = tiny_space([2000, 500, 10]);
        let hyper = HyperParams {
            k: 20,
            init_scale: 0.01,
            ..Default::default()
        };
        let jm = init_params(&space, &hyper).unwrap();
        let v: Vec<f64> = jm.web.v.iter().chain(&jm.ads.v).copied().collect();
        assert!(v.len() >= 100_000);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((sd - 0.01).abs() < 0.0005, "{sd}");
        let again = init_params(&space, &hyper).unwrap();
        assert_eq!((&jm.web, &jm.ads), (&again.web, &again.ads));
        assert!(jm.web.w.iter().chain(&jm.ads.w).all(|&x| x == 0.0) && jm.web.w0 == 0.0);
        let zero = init_params(
            &space,
            &HyperParams {
                init_scale: 0.0,
                ..hyper
            },
        )
        .unwrap();
        assert!(zero.ads.v.iter().all(|&x| x == 0.0));
    }
}
