//! Log-likelihood, Gaussian log-prior and their gradients.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::HyperParams;
use crate::data::{Dataset, FeatureSpace, Group, SparseInstance, Task};
use crate::error::{Error, Result};
use crate::fm::{log_sigmoid, sigmoid, FmModel, GroupSums};

/// The CF model, the CTR model and the priors tying them together.
#[derive(Clone, Debug)]
pub struct JointModel {
    pub web: FmModel,
    pub ads: FmModel,
    pub hyper: HyperParams,
    pub space: Arc<FeatureSpace>,
}

/// Which prior over the parameters a regime optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorLayout {
    /// CTR user/publisher parameters centred on the CF ones.
    Bridge,
    /// No CF model: CTR user/publisher parameters get independent Gaussians
    /// with the CF-block means and variances.
    Independent,
    /// CF parameters only.
    CfOnly,
}

/// Zero weights and biases, Gaussian latent vectors drawn from `hyper.seed`.
pub fn init_params(space: &Arc<FeatureSpace>, hyper: &HyperParams) -> Result<JointModel> {
    hyper.validate()?;
    let mut web = FmModel::zeros(Task::Cf, space, hyper.k);
    let mut ads = FmModel::zeros(Task::Ctr, space, hyper.k);
    if hyper.init_scale > 0.0 {
        let normal =
            Normal::new(0.0, hyper.init_scale).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        for x in web.v.iter_mut().chain(ads.v.iter_mut()) {
            *x = normal.sample(&mut rng);
        }
    }
    Ok(JointModel {
        web,
        ads,
        hyper: hyper.clone(),
        space: Arc::clone(space),
    })
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

/// `y log p + (1 - y) log (1 - p)` evaluated from the logit.
pub fn instance_log_likelihood(m: &FmModel, inst: &SparseInstance) -> Result<f64> {
    m.check(inst)?;
    Ok(loglik_from_logit(m.logit_unchecked(inst), inst.label))
}

pub(crate) fn loglik_from_logit(z: f64, label: bool) -> f64 {
    if label {
        log_sigmoid(z)
    } else {
        log_sigmoid(-z)
    }
}

/// Bridge log-prior: the full six-block Gaussian prior.
pub fn log_prior(jm: &JointModel) -> f64 {
    log_prior_with(jm, PriorLayout::Bridge)
}

pub fn log_prior_with(jm: &JointModel, layout: PriorLayout) -> f64 {
    let h = &jm.hyper;
    let (web, ads) = (&jm.web, &jm.ads);
    let k = h.k;
    let up = web.range(Group::User).start..web.range(Group::Publisher).end;
    let mut total = 0.0;
    if layout != PriorLayout::Independent {
        for i in up.clone() {
            total += log_normal(web.w[i], h.mean_w_web, h.var_w_web);
            for f in 0..k {
                total += log_normal(web.row(i)[f], h.v_web_mean(f), h.var_v_web);
            }
        }
    }
    if layout == PriorLayout::CfOnly {
        return total;
    }
    for i in up {
        let (wc, wv) = match layout {
            PriorLayout::Bridge => (web.w[i], h.var_w_bridge),
            _ => (h.mean_w_web, h.var_w_web),
        };
        total += log_normal(ads.w[i], wc, wv);
        for f in 0..k {
            let (vc, vv) = match layout {
                PriorLayout::Bridge => (web.row(i)[f], h.var_v_bridge),
                _ => (h.v_web_mean(f), h.var_v_web),
            };
            total += log_normal(ads.row(i)[f], vc, vv);
        }
    }
    for l in ads.range(Group::Ad) {
        total += log_normal(ads.w[l], h.mean_w_ad, h.var_w_ad);
        for f in 0..k {
            total += log_normal(ads.row(l)[f], h.v_ad_mean(f), h.var_v_ad);
        }
    }
    total
}

/// Weights and prior of one optimisation target: `cf_weight * sum(CF
/// log-lik) + ctr_weight * sum(CTR log-lik) + log prior`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub cf_weight: f64,
    pub ctr_weight: f64,
    pub layout: PriorLayout,
}

impl ObjectiveSpec {
    /// The alpha-weighted averaged joint objective with bridge priors.
    pub fn joint(alpha: f64, d_web: &Dataset, d_ads: &Dataset) -> Result<ObjectiveSpec> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        if alpha > 0.0 && alpha < 1.0 && (d_web.is_empty() || d_ads.is_empty()) {
            return Err(Error::Config(format!(
                "alpha = {alpha} needs both datasets, got |D_web| = {}, |D_ads| = {}",
                d_web.len(),
                d_ads.len()
            )));
        }
        Ok(ObjectiveSpec {
            cf_weight: averaged(alpha, d_web.len()),
            ctr_weight: averaged(1.0 - alpha, d_ads.len()),
            layout: PriorLayout::Bridge,
        })
    }
}

/// `weight / n`, and zero when the weight is zero (even if `n` is).
pub(crate) fn averaged(weight: f64, n: usize) -> f64 {
    if weight == 0.0 {
        0.0
    } else if n == 0 {
        f64::NAN
    } else {
        weight / n as f64
    }
}

pub fn mean_log_likelihood(m: &FmModel, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(sum_log_likelihood(m, d)? / d.len() as f64)
}

pub(crate) fn sum_log_likelihood(m: &FmModel, d: &Dataset) -> Result<f64> {
    if d.task() != m.task() {
        return Err(Error::Contract(format!(
            "{} dataset given to a {} model",
            d.task(),
            m.task()
        )));
    }
    let mut sums = GroupSums::new(m.k());
    let mut total = 0.0;
    for inst in d.instances() {
        m.check(inst)?;
        total += loglik_from_logit(m.logit_with_sums(inst, &mut sums), inst.label);
    }
    Ok(total)
}

pub fn objective_value(
    jm: &JointModel,
    d_web: &Dataset,
    d_ads: &Dataset,
    spec: ObjectiveSpec,
) -> Result<f64> {
    let mut total = log_prior_with(jm, spec.layout);
    if spec.cf_weight != 0.0 {
        total += spec.cf_weight * sum_log_likelihood(&jm.web, d_web)?;
    }
    if spec.ctr_weight != 0.0 {
        total += spec.ctr_weight * sum_log_likelihood(&jm.ads, d_ads)?;
    }
    Ok(total)
}

/// Averaged, alpha-weighted log-likelihood of both tasks plus the bridge
/// log-prior.
pub fn joint_objective(jm: &JointModel, d_web: &Dataset, d_ads: &Dataset) -> Result<f64> {
    let spec = ObjectiveSpec::joint(jm.hyper.alpha, d_web, d_ads)?;
    objective_value(jm, d_web, d_ads, spec)
}

/// Gradient of one instance's log-likelihood; only active rows appear.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrad {
    pub w0: f64,
    /// `(feature, d/dw, d/dv row)` for each active feature, in instance order.
    pub rows: Vec<(usize, f64, Vec<f64>)>,
}

/// Residual form: `(y - p)` times each parameter's multiplier in the logit.
pub fn grad_instance(m: &FmModel, inst: &SparseInstance) -> Result<SparseGrad> {
    m.check(inst)?;
    let mut sums = GroupSums::new(m.k());
    let residual = inst.y() - sigmoid(m.logit_with_sums(inst, &mut sums));
    let total: Vec<f64> = (0..m.k())
        .map(|f| sums.user[f] + sums.publisher[f] + sums.ad[f])
        .collect();
    let mut rows = Vec::new();
    for group in Group::ALL {
        let own = sums.get(group);
        for &i in inst.group(group) {
            let dv = (0..m.k()).map(|f| residual * (total[f] - own[f])).collect();
            rows.push((i, residual, dv));
        }
    }
    Ok(SparseGrad { w0: residual, rows })
}

/// Dense gradient for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub w0: f64,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
}

impl ModelGrad {
    pub fn zeros_like(m: &FmModel) -> Self {
        ModelGrad {
            w0: 0.0,
            w: vec![0.0; m.w.len()],
            v: vec![0.0; m.v.len()],
        }
    }

    pub fn add_sparse(&mut self, g: &SparseGrad, scale: f64, k: usize) {
        self.w0 += scale * g.w0;
        for (i, dw, dv) in &g.rows {
            self.w[*i] += scale * dw;
            for (f, x) in dv.iter().enumerate() {
                self.v[i * k + f] += scale * x;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointGrad {
    pub web: ModelGrad,
    pub ads: ModelGrad,
}

/// Gradient of the bridge log-prior over every parameter of both models.
pub fn grad_prior(jm: &JointModel) -> JointGrad {
    grad_prior_with(jm, PriorLayout::Bridge)
}

pub fn grad_prior_with(jm: &JointModel, layout: PriorLayout) -> JointGrad {
    let h = &jm.hyper;
    let (web, ads) = (&jm.web, &jm.ads);
    let k = h.k;
    let mut g = JointGrad {
        web: ModelGrad::zeros_like(web),
        ads: ModelGrad::zeros_like(ads),
    };
    let up = web.range(Group::User).start..web.range(Group::Publisher).end;
    for i in up {
        if layout != PriorLayout::Independent {
            g.web.w[i] -= (web.w[i] - h.mean_w_web) / h.var_w_web;
            for f in 0..k {
                g.web.v[i * k + f] -= (web.row(i)[f] - h.v_web_mean(f)) / h.var_v_web;
            }
        }
        match layout {
            PriorLayout::CfOnly => {}
            PriorLayout::Bridge => {
                let pull = (ads.w[i] - web.w[i]) / h.var_w_bridge;
                g.web.w[i] += pull;
                g.ads.w[i] -= pull;
                for f in 0..k {
                    let pull = (ads.row(i)[f] - web.row(i)[f]) / h.var_v_bridge;
                    g.web.v[i * k + f] += pull;
                    g.ads.v[i * k + f] -= pull;
                }
            }
            PriorLayout::Independent => {
                g.ads.w[i] -= (ads.w[i] - h.mean_w_web) / h.var_w_web;
                for f in 0..k {
                    g.ads.v[i * k + f] -= (ads.row(i)[f] - h.v_web_mean(f)) / h.var_v_web;
                }
            }
        }
    }
    if layout != PriorLayout::CfOnly {
        for l in ads.range(Group::Ad) {
            g.ads.w[l] -= (ads.w[l] - h.mean_w_ad) / h.var_w_ad;
            for f in 0..k {
                g.ads.v[l * k + f] -= (ads.row(l)[f] - h.v_ad_mean(f)) / h.var_v_ad;
            }
        }
    }
    g
}

/// Dense gradient of `objective_value`.
pub fn objective_gradient(
    jm: &JointModel,
    d_web: &Dataset,
    d_ads: &Dataset,
    spec: ObjectiveSpec,
) -> Result<JointGrad> {
    let mut g = grad_prior_with(jm, spec.layout);
    let k = jm.hyper.k;
    if spec.cf_weight != 0.0 {
        for inst in d_web.instances() {
            g.web
                .add_sparse(&grad_instance(&jm.web, inst)?, spec.cf_weight, k);
        }
    }
    if spec.ctr_weight != 0.0 {
        for inst in d_ads.instances() {
            g.ads
                .add_sparse(&grad_instance(&jm.ads, inst)?, spec.ctr_weight, k);
        }
    }
    Ok(g)
}
