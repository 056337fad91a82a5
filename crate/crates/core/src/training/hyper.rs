use crate::error::{Error, Result};

/// Training and prior hyperparameters.
///
/// Variances and means are named after the parameter block they govern:
/// `web` is the CF model, `bridge` the CTR-around-CF coupling of user and
/// publisher parameters, `ad` the CTR ad-feature block.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    /// Weight of the CF task in the averaged log-likelihood, in `[0, 1]`.
    pub alpha: f64,
    pub eta: f64,
    pub k: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian latent-vector initialisation.
    pub init_scale: f64,
    pub var_w_web: f64,
    pub var_v_web: f64,
    pub var_w_bridge: f64,
    pub var_v_bridge: f64,
    pub var_w_ad: f64,
    pub var_v_ad: f64,
    pub mean_w_web: f64,
    pub mean_w_ad: f64,
    /// Length `k`; an empty vector means all zeros.
    pub mean_v_web: Vec<f64>,
    pub mean_v_ad: Vec<f64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 0.5,
            eta: 2500.0,
            k: 8,
            epochs: 60,
            seed: 1,
            init_scale: 0.3,
            var_w_web: 20000.0,
            var_v_web: 20000.0,
            var_w_bridge: 100.0,
            var_v_bridge: 100.0,
            var_w_ad: 2000.0,
            var_v_ad: 2000.0,
            mean_w_web: 0.0,
            mean_w_ad: 0.0,
            mean_v_web: Vec::new(),
            mean_v_ad: Vec::new(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta {} must be finite and non-negative",
                self.eta
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(
                "init_scale must be finite and non-negative".into(),
            ));
        }
        for (name, v) in [
            ("var_w_web", self.var_w_web),
            ("var_v_web", self.var_v_web),
            ("var_w_bridge", self.var_w_bridge),
            ("var_v_bridge", self.var_v_bridge),
            ("var_w_ad", self.var_w_ad),
            ("var_v_ad", self.var_v_ad),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} = {v} must be a positive finite variance"
                )));
            }
        }
        for (name, m) in [
            ("mean_v_web", &self.mean_v_web),
            ("mean_v_ad", &self.mean_v_ad),
        ] {
            if !m.is_empty() && m.len() != self.k {
                return Err(Error::Config(format!(
                    "{name} has length {}, expected k = {}",
                    m.len(),
                    self.k
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn v_web_mean(&self, f: usize) -> f64 {
        self.mean_v_web.get(f).copied().unwrap_or(0.0)
    }

    pub(crate) fn v_ad_mean(&self, f: usize) -> f64 {
        self.mean_v_ad.get(f).copied().unwrap_or(0.0)
    }
}
