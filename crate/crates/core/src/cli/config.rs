//! Flat `section.key=value` run configuration.
//!
//! A config file holds one assignment per line; blank lines and lines
//! starting with `#` are ignored. Command-line overrides use the same keys
//! and are applied after the file. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Group, Ratio, Schema};
use crate::error::{Error, Result};
use crate::evaluation::{LrSweep, SweepRegime, SweepSpec};
use crate::synth::{ExtraAttr, GenConfig, LabelMode, AD_ATTR, PUB_ATTR, USER_ATTR};
use crate::training::HyperParams;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Directory holding `cf.tsv`, `ctr.tsv`, `space.txt` and `truth.txt`;
    /// defaults to the output directory.
    pub dir: Option<PathBuf>,
    /// Train/test split timestamp; defaults to the generator's boundary.
    pub boundary: Option<i64>,
    /// Attribute groups for user-supplied logs, as `attr:group,...`.
    pub schema: Option<Schema>,
    /// Negative down-sampling of the CTR training split.
    pub ctr_downsample: Option<Ratio>,
    /// Negative sampling for positive-only CF training logs.
    pub cf_negatives: Option<Ratio>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrConfig {
    pub lambda: f64,
    /// CF-stage lambda; shares `lambda` unless set.
    pub lambda_cf: Option<f64>,
    pub eta: f64,
    pub epochs: usize,
    /// Lambda grid of the sweep.
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub model: Option<PathBuf>,
    /// Score with the planted model from the truth file.
    pub oracle: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
    pub regimes: Vec<SweepRegime>,
    pub seeds: Vec<u64>,
    /// Candidate attribute of the feature-appending experiment.
    pub append: Option<String>,
    pub base_attrs: Vec<String>,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub hyper: HyperParams,
    pub lr: LrConfig,
    pub data: DataConfig,
    pub regime: String,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = SweepSpec::default();
        RunConfig {
            gen: GenConfig::default(),
            hyper: HyperParams::default(),
            lr: LrConfig {
                lambda: 1.0,
                lambda_cf: None,
                eta: spec.lr.eta,
                epochs: spec.lr.epochs,
                lambdas: spec.lr.lambdas.clone(),
            },
            data: DataConfig {
                dir: None,
                boundary: None,
                schema: None,
                ctr_downsample: None,
                cf_negatives: None,
            },
            regime: "joint".into(),
            eval: EvalConfig {
                model: None,
                oracle: false,
            },
            sweep: SweepConfig {
                grid: spec.grid,
                regimes: spec.regimes,
                seeds: spec.seeds,
                append: None,
                base_attrs: [USER_ATTR, PUB_ATTR, AD_ATTR].map(String::from).to_vec(),
                threshold: 0.5,
            },
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}=`{value}`: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| bad(key, value, e))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn ratio(key: &str, value: &str) -> Result<Option<Ratio>> {
    match value.trim() {
        "" | "none" => Ok(None),
        v => v.parse().map(Some).map_err(|e| bad(key, value, e)),
    }
}

fn group(key: &str, value: &str, g: &str) -> Result<Group> {
    Group::parse(g).ok_or_else(|| bad(key, value, format!("unknown group `{g}`")))
}

/// `name:group:cardinality:signal|noise`, comma separated.
fn extra_attrs(key: &str, value: &str) -> Result<Vec<ExtraAttr>> {
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        let [name, g, card, kind] = parts[..] else {
            return Err(bad(
                key,
                value,
                "expected name:group:cardinality:signal|noise",
            ));
        };
        let signal = match kind {
            "signal" => true,
            "noise" => false,
            _ => {
                return Err(bad(
                    key,
                    value,
                    format!("`{kind}` is neither signal nor noise"),
                ))
            }
        };
        out.push(ExtraAttr {
            name: name.to_string(),
            group: group(key, value, g)?,
            cardinality: num(key, card)?,
            signal,
        });
    }
    Ok(out)
}

/// `attr:group`, comma separated.
fn schema(key: &str, value: &str) -> Result<Schema> {
    let mut s = Schema::default();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, g) = item
            .split_once(':')
            .ok_or_else(|| bad(key, value, "expected attr:group"))?;
        s.push(name, group(key, value, g)?);
    }
    Ok(s)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, v) = (key, value);
        let g = &mut self.gen;
        let h = &mut self.hyper;
        match k {
            "gen.n_users" => g.n_users = num(k, v)?,
            "gen.n_publishers" => g.n_publishers = num(k, v)?,
            "gen.n_ads" => g.n_ads = num(k, v)?,
            "gen.k_true" => g.k_true = num(k, v)?,
            "gen.rho" => g.rho = num(k, v)?,
            "gen.n_web_events" => g.n_web_events = num(k, v)?,
            "gen.n_ads_events" => g.n_ads_events = num(k, v)?,
            "gen.label_noise" => g.label_noise = num(k, v)?,
            "gen.extra" => g.extra_attrs = extra_attrs(k, v)?,
            "gen.week_boundary" => g.week_boundary = num(k, v)?,
            "gen.seed" => g.seed = num(k, v)?,
            "gen.positive_rate" => g.positive_rate = num(k, v)?,
            "gen.latent_scale" => g.latent_scale = num(k, v)?,
            "gen.weight_scale" => g.weight_scale = num(k, v)?,
            "gen.cf_publisher_scale" => g.cf_publisher_scale = num(k, v)?,
            "gen.ad_scale" => g.ad_scale = num(k, v)?,
            "gen.signal_scale" => g.signal_scale = num(k, v)?,
            "gen.label_mode" => {
                g.label_mode = match v.trim() {
                    "bernoulli" => LabelMode::Bernoulli,
                    "threshold" => LabelMode::Threshold,
                    _ => return Err(bad(k, v, "expected bernoulli or threshold")),
                }
            }
            "hyper.alpha" => h.alpha = num(k, v)?,
            "hyper.eta" => h.eta = num(k, v)?,
            "hyper.k" => h.k = num(k, v)?,
            "hyper.epochs" => h.epochs = num(k, v)?,
            "hyper.seed" => h.seed = num(k, v)?,
            "hyper.init_scale" => h.init_scale = num(k, v)?,
            "hyper.var_w_web" => h.var_w_web = num(k, v)?,
            "hyper.var_v_web" => h.var_v_web = num(k, v)?,
            "hyper.var_w_bridge" => h.var_w_bridge = num(k, v)?,
            "hyper.var_v_bridge" => h.var_v_bridge = num(k, v)?,
            "hyper.var_w_ad" => h.var_w_ad = num(k, v)?,
            "hyper.var_v_ad" => h.var_v_ad = num(k, v)?,
            "hyper.mean_w_web" => h.mean_w_web = num(k, v)?,
            "hyper.mean_w_ad" => h.mean_w_ad = num(k, v)?,
            "hyper.mean_v_web" => h.mean_v_web = list(k, v)?,
            "hyper.mean_v_ad" => h.mean_v_ad = list(k, v)?,
            "lr.lambda" => self.lr.lambda = num(k, v)?,
            "lr.lambda_cf" => self.lr.lambda_cf = Some(num(k, v)?),
            "lr.eta" => self.lr.eta = num(k, v)?,
            "lr.epochs" => self.lr.epochs = num(k, v)?,
            "lr.lambdas" => self.lr.lambdas = list(k, v)?,
            "data.dir" => self.data.dir = Some(PathBuf::from(v.trim())),
            "data.boundary" => self.data.boundary = Some(num(k, v)?),
            "data.schema" => self.data.schema = Some(schema(k, v)?),
            "data.ctr_downsample" => self.data.ctr_downsample = ratio(k, v)?,
            "data.cf_negatives" => self.data.cf_negatives = ratio(k, v)?,
            "train.regime" => self.regime = v.trim().to_string(),
            "eval.model" => self.eval.model = Some(PathBuf::from(v.trim())),
            "eval.oracle" => self.eval.oracle = flag(k, v)?,
            "sweep.grid" => self.sweep.grid = list(k, v)?,
            "sweep.regimes" => {
                self.sweep.regimes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        SweepRegime::parse(s)
                            .ok_or_else(|| bad(k, v, format!("unknown regime `{s}`")))
                    })
                    .collect::<Result<_>>()?
            }
            "sweep.seeds" => self.sweep.seeds = list(k, v)?,
            "sweep.append" => {
                self.sweep.append =
                    Some(v.trim().to_string()).filter(|s| !s.is_empty() && s != "none")
            }
            "sweep.base_attrs" => self.sweep.base_attrs = list(k, v)?,
            "sweep.threshold" => self.sweep.threshold = num(k, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{k}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `context` names the source in errors.
    pub fn apply_text(&mut self, text: &str, context: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(context, n + 1, "expected key=value"))?;
            self.set(k.trim(), v)
                .map_err(|e| e.tagged(format!("{context}, line {}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn boundary(&self) -> i64 {
        self.data.boundary.unwrap_or_else(|| self.gen.boundary())
    }

    pub fn schema(&self) -> Schema {
        self.data
            .schema
            .clone()
            .unwrap_or_else(|| self.gen.schema())
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            grid: self.sweep.grid.clone(),
            regimes: self.sweep.regimes.clone(),
            seeds: self.sweep.seeds.clone(),
            lr: LrSweep {
                lambdas: self.lr.lambdas.clone(),
                eta: self.lr.eta,
                epochs: self.lr.epochs,
            },
            feature_set: "base".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nhyper.alpha = 0.3\n\ngen.rho=0.5\n", "cfg")
            .unwrap();
        c.set("hyper.alpha", "0.7").unwrap();
        assert_eq!(c.hyper.alpha, 0.7);
        assert_eq!(c.gen.rho, 0.5);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut c = RunConfig::default();
        let e = c
            .apply_text("hyper.alhpa=0.3\n", "cfg")
            .unwrap_err()
            .to_string();
        assert!(e.contains("hyper.alhpa"), "{e}");
        assert!(c.set("nosection", "1").is_err());
        assert!(c.apply_text("hyper.alpha\n", "cfg").is_err());
    }

    #[test]
    fn structured_values() {
        let mut c = RunConfig::default();
        c.set("gen.extra", "hour:user:24:signal, screen:user:6:noise")
            .unwrap();
        assert_eq!(c.gen.extra_attrs.len(), 2);
        assert!(c.gen.extra_attrs[0].signal && !c.gen.extra_attrs[1].signal);
        c.set("sweep.regimes", "base,joint").unwrap();
        assert_eq!(c.sweep.regimes.len(), 2);
        c.set("data.ctr_downsample", "1:5").unwrap();
        assert_eq!(c.data.ctr_downsample, Some(Ratio::new(1, 5)));
        c.set("data.schema", "user_cookie:user,domain:publisher")
            .unwrap();
        assert_eq!(c.schema().len(), 2);
        assert!(c.set("gen.extra", "hour:user:24").is_err());
        assert!(c.set("sweep.regimes", "bogus").is_err());
        assert!(c.set("hyper.k", "two").is_err());
    }
}
