//! Paired CF/CTR logs drawn from a planted factorisation machine.
//!
//! CTR user and publisher latent vectors are `rho` times their CF counterparts
//! plus independent noise. Main-effect weights and the ad block are drawn
//! independently per task. Extra attributes flagged as signal add the same
//! main effect to both tasks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{
    build_feature_space, encode_log, Dataset, FeatureSpace, Group, RawLog, RawRecord, RawRow,
    Schema, Task,
};
use crate::error::{Error, Result};
use crate::fm::{sigmoid, FmModel};

const TRUTH_HEADER: &str = "xferfm-truth v1";
pub const USER_ATTR: &str = "user_cookie";
pub const PUB_ATTR: &str = "domain";
pub const AD_ATTR: &str = "campaign";
const TWO_WEEKS: i64 = 14 * 86_400;
const START: i64 = 1_700_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ExtraAttr {
    pub name: String,
    pub group: Group,
    pub cardinality: usize,
    /// Signal attributes add an identical main effect to both tasks' logits.
    pub signal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    Bernoulli,
    /// Label is 1 exactly when the shifted logit is positive (before noise).
    Threshold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_publishers: usize,
    pub n_ads: usize,
    pub k_true: usize,
    pub rho: f64,
    pub n_web_events: usize,
    pub n_ads_events: usize,
    pub label_noise: f64,
    pub extra_attrs: Vec<ExtraAttr>,
    /// Fraction of the two-week window that falls in the training week.
    pub week_boundary: f64,
    pub seed: u64,
    /// Positive rate of each task before label noise.
    pub positive_rate: f64,
    /// Standard deviation of planted latent entries.
    pub latent_scale: f64,
    /// Standard deviation of planted main-effect weights.
    pub weight_scale: f64,
    /// Standard deviation of CF publisher latent entries; CTR publishers
    /// inherit `rho` times these.
    pub cf_publisher_scale: f64,
    /// Standard deviation of the ad block (weights and latent entries).
    pub ad_scale: f64,
    /// Standard deviation of signal-attribute main effects.
    pub signal_scale: f64,
    pub label_mode: LabelMode,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_users: 2000,
            n_publishers: 500,
            n_ads: 50,
            k_true: 4,
            rho: 0.8,
            n_web_events: 200_000,
            n_ads_events: 8000,
            label_noise: 0.1,
            extra_attrs: Vec::new(),
            week_boundary: 0.5,
            seed: 1,
            positive_rate: 1.0 / 6.0,
            latent_scale: 1.0,
            weight_scale: 0.5,
            cf_publisher_scale: 2.0,
            ad_scale: 1.5,
            signal_scale: 1.0,
            label_mode: LabelMode::Bernoulli,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, n) in [
            ("n_users", self.n_users),
            ("n_publishers", self.n_publishers),
            ("n_ads", self.n_ads),
            ("n_web_events", self.n_web_events),
            ("n_ads_events", self.n_ads_events),
        ] {
            if n == 0 {
                return bad(format!("gen.{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("gen.rho {} outside [0, 1]", self.rho));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!(
                "gen.label_noise {} outside [0, 0.5)",
                self.label_noise
            ));
        }
        if !(self.week_boundary > 0.0 && self.week_boundary < 1.0) {
            return bad(format!(
                "gen.week_boundary {} outside (0, 1)",
                self.week_boundary
            ));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return bad(format!(
                "gen.positive_rate {} outside (0, 1)",
                self.positive_rate
            ));
        }
        for (name, s) in [
            ("latent_scale", self.latent_scale),
            ("weight_scale", self.weight_scale),
            ("ad_scale", self.ad_scale),
            ("cf_publisher_scale", self.cf_publisher_scale),
            ("signal_scale", self.signal_scale),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("gen.{name} must be finite and non-negative"));
            }
        }
        let mut names = vec![USER_ATTR, PUB_ATTR, AD_ATTR];
        for e in &self.extra_attrs {
            if e.cardinality == 0 {
                return bad(format!(
                    "extra attribute {} needs at least one value",
                    e.name
                ));
            }
            if names.contains(&e.name.as_str()) || e.name.is_empty() {
                return bad(format!(
                    "extra attribute name `{}` is empty or taken",
                    e.name
                ));
            }
            names.push(&e.name);
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        let mut s = Schema::new([
            (USER_ATTR, Group::User),
            (PUB_ATTR, Group::Publisher),
            (AD_ATTR, Group::Ad),
        ]);
        for e in &self.extra_attrs {
            s.push(e.name.clone(), e.group);
        }
        s
    }

    /// Timestamp separating the training week from the test week.
    pub fn boundary(&self) -> i64 {
        START + (self.week_boundary * TWO_WEEKS as f64).round() as i64
    }
}

/// The planted models over the generated feature space. Shifts are folded
/// into `w0`; unobserved values have no index and were dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub cf: FmModel,
    pub ctr: FmModel,
}

impl Truth {
    pub fn to_text(&self, space_fingerprint: &str) -> String {
        format!(
            "{TRUTH_HEADER}\n[cf]\n{}[ctr]\n{}",
            self.cf.to_text(space_fingerprint),
            self.ctr.to_text(space_fingerprint)
        )
    }

    pub fn from_text(text: &str) -> Result<(Truth, String)> {
        let ctx = "truth";
        let rest = text
            .strip_prefix(TRUTH_HEADER)
            .and_then(|r| r.strip_prefix("\n[cf]\n"))
            .ok_or_else(|| {
                Error::parse(ctx, 1, format!("expected `{TRUTH_HEADER}` then `[cf]`"))
            })?;
        let (cf, ctr) = rest
            .split_once("\n[ctr]\n")
            .ok_or_else(|| Error::parse(ctx, 0, "missing `[ctr]` section"))?;
        let (cf, fp) = FmModel::from_text(cf).map_err(|e| e.tagged("truth [cf]"))?;
        let (ctr, fp2) = FmModel::from_text(ctr).map_err(|e| e.tagged("truth [ctr]"))?;
        if fp != fp2 || cf.task() != Task::Cf || ctr.task() != Task::Ctr {
            return Err(Error::parse(ctx, 0, "inconsistent sections"));
        }
        Ok((Truth { cf, ctr }, fp))
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub cf_log: RawLog,
    pub ctr_log: RawLog,
    pub space: Arc<FeatureSpace>,
    pub d_web: Dataset,
    pub d_ads: Dataset,
    pub truth: Truth,
    pub boundary: i64,
}

/// Planted parameters per entity, before the feature space exists.
struct Planted {
    k: usize,
    w: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Planted {
    fn draw(
        rng: &mut ChaCha8Rng,
        n: usize,
        k: usize,
        ws: &Normal<f64>,
        vs: &Normal<f64>,
    ) -> Planted {
        let w = vec![(0..n).map(|_| ws.sample(rng)).collect()];
        let v = vec![(0..n * k).map(|_| vs.sample(rng)).collect()];
        Planted { k, w, v }
    }

    fn weight(&self, i: usize) -> f64 {
        self.w[0][i]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.v[0][i * self.k..(i + 1) * self.k]
    }
}

struct Draw {
    t: i64,
    user: usize,
    publisher: usize,
    ad: usize,
    extra: Vec<usize>,
    logit: f64,
}

pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.k_true;
    let ws = Normal::new(0.0, cfg.weight_scale).map_err(|e| Error::Config(e.to_string()))?;
    let vs = Normal::new(0.0, cfg.latent_scale).map_err(|e| Error::Config(e.to_string()))?;
    let ss = Normal::new(0.0, cfg.signal_scale).map_err(|e| Error::Config(e.to_string()))?;

    let cf_user = Planted::draw(&mut rng, cfg.n_users, k, &ws, &vs);
    let cps = Normal::new(0.0, cfg.cf_publisher_scale).map_err(|e| Error::Config(e.to_string()))?;
    let cf_pub = Planted::draw(&mut rng, cfg.n_publishers, k, &ws, &cps);
    let mut ctr_user = Planted::draw(&mut rng, cfg.n_users, k, &ws, &vs);
    let mut ctr_pub = Planted::draw(&mut rng, cfg.n_publishers, k, &ws, &vs);
    let ad = Normal::new(0.0, cfg.ad_scale).map_err(|e| Error::Config(e.to_string()))?;
    let ctr_ad = Planted::draw(&mut rng, cfg.n_ads, k, &ad, &ad);
    let keep = (1.0 - cfg.rho * cfg.rho).sqrt();
    for (c, x) in ctr_user.v[0].iter_mut().zip(&cf_user.v[0]) {
        *c = cfg.rho * x + keep * *c;
    }
    for (c, x) in ctr_pub.v[0].iter_mut().zip(&cf_pub.v[0]) {
        *c = cfg.rho * x + keep * *c;
    }
    let extra_effects: Vec<Vec<f64>> = cfg
        .extra_attrs
        .iter()
        .map(|e| {
            (0..e.cardinality)
                .map(|_| if e.signal { ss.sample(&mut rng) } else { 0.0 })
                .collect()
        })
        .collect();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let draw = |rng: &mut ChaCha8Rng, task: Task| -> Draw {
        let t = START + rng.random_range(0..TWO_WEEKS);
        let user = rng.random_range(0..cfg.n_users);
        let publisher = rng.random_range(0..cfg.n_publishers);
        let ad = if task == Task::Ctr {
            rng.random_range(0..cfg.n_ads)
        } else {
            0
        };
        let extra: Vec<usize> = cfg
            .extra_attrs
            .iter()
            .map(|e| rng.random_range(0..e.cardinality))
            .collect();
        let mut logit: f64 = extra
            .iter()
            .zip(&extra_effects)
            .map(|(&x, eff)| eff[x])
            .sum();
        logit += match task {
            Task::Cf => {
                cf_user.weight(user)
                    + cf_pub.weight(publisher)
                    + dot(cf_user.row(user), cf_pub.row(publisher))
            }
            Task::Ctr => {
                let (u, p, a) = (ctr_user.row(user), ctr_pub.row(publisher), ctr_ad.row(ad));
                ctr_user.weight(user)
                    + ctr_pub.weight(publisher)
                    + ctr_ad.weight(ad)
                    + dot(u, p)
                    + dot(u, a)
                    + dot(p, a)
            }
        };
        Draw {
            t,
            user,
            publisher,
            ad,
            extra,
            logit,
        }
    };
    let web_draws: Vec<Draw> = (0..cfg.n_web_events)
        .map(|_| draw(&mut rng, Task::Cf))
        .collect();
    let ads_draws: Vec<Draw> = (0..cfg.n_ads_events)
        .map(|_| draw(&mut rng, Task::Ctr))
        .collect();

    let n = cfg.label_noise;
    let shift_cf = calibrate(&web_draws, cfg.positive_rate, cfg.label_mode);
    let shift_ctr = calibrate(&ads_draws, cfg.positive_rate, cfg.label_mode);

    let user_name = |i: usize| format!("u{i:05}");
    let pub_name = |i: usize| format!("p{i:04}");
    let ad_name = |i: usize| format!("a{i:03}");
    let to_log = |draws: &[Draw], task: Task, shift: f64, rng: &mut ChaCha8Rng| -> RawLog {
        let mut attributes = vec![USER_ATTR.to_string(), PUB_ATTR.to_string()];
        if task == Task::Ctr {
            attributes.push(AD_ATTR.to_string());
        }
        attributes.extend(
            cfg.extra_attrs
                .iter()
                .filter(|e| task == Task::Ctr || e.group != Group::Ad)
                .map(|e| e.name.clone()),
        );
        let mut rows: Vec<RawRow> = draws
            .iter()
            .map(|d| {
                let z = d.logit + shift;
                let mut label = match cfg.label_mode {
                    LabelMode::Bernoulli => rng.random::<f64>() < sigmoid(z),
                    LabelMode::Threshold => z > 0.0,
                };
                if n > 0.0 && rng.random::<f64>() < n {
                    label = !label;
                }
                let mut values = RawRecord::new();
                values.insert(USER_ATTR.into(), user_name(d.user));
                values.insert(PUB_ATTR.into(), pub_name(d.publisher));
                if task == Task::Ctr {
                    values.insert(AD_ATTR.into(), ad_name(d.ad));
                }
                for (e, &x) in cfg.extra_attrs.iter().zip(&d.extra) {
                    if task == Task::Ctr || e.group != Group::Ad {
                        values.insert(e.name.clone(), format!("{}{x:04}", e.name));
                    }
                }
                RawRow {
                    timestamp: d.t,
                    label,
                    values,
                }
            })
            .collect();
        rows.sort_by_key(|r| r.timestamp);
        RawLog { attributes, rows }
    };
    let cf_log = to_log(&web_draws, Task::Cf, shift_cf, &mut rng);
    let ctr_log = to_log(&ads_draws, Task::Ctr, shift_ctr, &mut rng);

    let mut records = cf_log.records();
    records.extend(ctr_log.records());
    let space = Arc::new(build_feature_space(&records, &cfg.schema())?);
    let d_web = encode_log(&cf_log, Task::Cf, &space)?;
    let d_ads = encode_log(&ctr_log, Task::Ctr, &space)?;

    let mut cf = FmModel::zeros(Task::Cf, &space, k);
    let mut ctr = FmModel::zeros(Task::Ctr, &space, k);
    cf.w0 = shift_cf;
    ctr.w0 = shift_ctr;
    let plant = |m: &mut FmModel, attr: &str, name: String, w: f64, v: &[f64]| {
        if let Some(i) = space.index_of(attr, &name) {
            m.w[i] = w;
            m.row_mut(i).copy_from_slice(v);
        }
    };
    let zeros = vec![0.0; k];
    for i in 0..cfg.n_users {
        plant(
            &mut cf,
            USER_ATTR,
            user_name(i),
            cf_user.weight(i),
            cf_user.row(i),
        );
        plant(
            &mut ctr,
            USER_ATTR,
            user_name(i),
            ctr_user.weight(i),
            ctr_user.row(i),
        );
    }
    for i in 0..cfg.n_publishers {
        plant(
            &mut cf,
            PUB_ATTR,
            pub_name(i),
            cf_pub.weight(i),
            cf_pub.row(i),
        );
        plant(
            &mut ctr,
            PUB_ATTR,
            pub_name(i),
            ctr_pub.weight(i),
            ctr_pub.row(i),
        );
    }
    for i in 0..cfg.n_ads {
        plant(
            &mut ctr,
            AD_ATTR,
            ad_name(i),
            ctr_ad.weight(i),
            ctr_ad.row(i),
        );
    }
    for (e, eff) in cfg.extra_attrs.iter().zip(&extra_effects) {
        for (x, &w) in eff.iter().enumerate() {
            if e.group != Group::Ad {
                plant(&mut cf, &e.name, format!("{}{x:04}", e.name), w, &zeros);
            }
            plant(&mut ctr, &e.name, format!("{}{x:04}", e.name), w, &zeros);
        }
    }

    Ok(Generated {
        cf_log,
        ctr_log,
        space,
        d_web,
        d_ads,
        truth: Truth { cf, ctr },
        boundary: cfg.boundary(),
    })
}

/// Logit shift giving the requested clean positive rate on these draws.
fn calibrate(draws: &[Draw], rate: f64, mode: LabelMode) -> f64 {
    match mode {
        LabelMode::Threshold => {
            let mut z: Vec<f64> = draws.iter().map(|d| d.logit).collect();
            z.sort_by(f64::total_cmp);
            let cut = ((1.0 - rate) * z.len() as f64).floor() as usize;
            let cut = cut.min(z.len() - 1);
            // Midpoint between neighbours keeps ties away from zero.
            let hi = z[cut];
            let lo = if cut > 0 { z[cut - 1] } else { hi - 1.0 };
            -(0.5 * (lo + hi))
        }
        LabelMode::Bernoulli => {
            let mean = |s: f64| {
                draws.iter().map(|d| sigmoid(d.logit + s)).sum::<f64>() / draws.len() as f64
            };
            let (mut lo, mut hi) = (-60.0, 60.0);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if mean(mid) < rate {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
    }
}
