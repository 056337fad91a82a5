//! Logistic-regression transfer baseline: plain L2 logistic regression on
//! the CF task, then CTR logistic regression whose user/publisher weights
//! are regularised toward the CF solution.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, FeatureSpace, Group, SparseInstance, Task};
use crate::error::{Error, Result};
use crate::fm::{log_sigmoid, sigmoid};

const LR_HEADER: &str = "xferfm-lr v1";

/// Weights over the task's features followed by one intercept entry.
#[derive(Clone, Debug, PartialEq)]
pub struct LrModel {
    pub task: Task,
    pub w: Vec<f64>,
    pub lambda: f64,
}

impl LrModel {
    pub fn zeros(task: Task, space: &FeatureSpace, lambda: f64) -> LrModel {
        let n = match task {
            Task::Cf => space.user_dims() + space.pub_dims(),
            Task::Ctr => space.len(),
        };
        LrModel {
            task,
            w: vec![0.0; n + 1],
            lambda,
        }
    }

    /// Number of feature weights, excluding the intercept.
    pub fn features(&self) -> usize {
        self.w.len() - 1
    }

    pub fn intercept(&self) -> f64 {
        self.w[self.features()]
    }

    pub fn feature_weights(&self) -> &[f64] {
        &self.w[..self.features()]
    }

    fn check(&self, inst: &SparseInstance) -> Result<()> {
        if inst.task != self.task {
            return Err(Error::Contract(format!(
                "{} instance given to a {} model",
                inst.task, self.task
            )));
        }
        if let Some(i) = inst.active().find(|&i| i >= self.features()) {
            return Err(Error::Contract(format!(
                "feature index {i} outside model range {}",
                self.features()
            )));
        }
        Ok(())
    }

    fn logit_unchecked(&self, inst: &SparseInstance) -> f64 {
        let mut z = self.intercept();
        for i in inst.active() {
            z += self.w[i];
        }
        z
    }

    pub fn to_text(&self, space_fingerprint: &str) -> String {
        let mut out = format!(
            "{LR_HEADER}\ntask\t{}\nfeatures\t{}\nlambda\t{:.16e}\nspace\t{space_fingerprint}\n",
            self.task,
            self.features(),
            self.lambda
        );
        for (i, w) in self.feature_weights().iter().enumerate() {
            writeln!(out, "{i}\t{w:.16e}").unwrap();
        }
        writeln!(out, "intercept\t{:.16e}", self.intercept()).unwrap();
        out
    }

    /// Returns the model and the feature-space fingerprint it was saved with.
    pub fn from_text(text: &str) -> Result<(LrModel, String)> {
        let ctx = "lr model";
        let mut lines = text.lines().enumerate();
        let mut next = |key: &str| -> Result<(usize, String)> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::parse(ctx, 0, format!("missing `{key}` line")))?;
            let line = line.trim_end_matches('\r');
            match line.split_once('\t') {
                Some((k, v)) if k == key => Ok((n + 1, v.to_string())),
                _ if key.is_empty() => Ok((n + 1, line.to_string())),
                _ => Err(Error::parse(
                    ctx,
                    n + 1,
                    format!("expected `{key}`, found `{line}`"),
                )),
            }
        };
        let (n, header) = next("")?;
        if header != LR_HEADER {
            return Err(Error::parse(
                ctx,
                n,
                format!("expected header `{LR_HEADER}`"),
            ));
        }
        let (n, task) = next("task")?;
        let task = Task::parse(&task)
            .ok_or_else(|| Error::parse(ctx, n, format!("unknown task `{task}`")))?;
        let num = |(n, s): (usize, String)| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::parse(ctx, n, format!("bad number `{s}`")))
        };
        let (n, features) = next("features")?;
        let features: usize = features
            .parse()
            .map_err(|_| Error::parse(ctx, n, "bad feature count"))?;
        let lambda = num(next("lambda")?)?;
        let (_, space) = next("space")?;
        let mut w = Vec::with_capacity(features + 1);
        for i in 0..features {
            w.push(num(next(&i.to_string())?)?);
        }
        w.push(num(next("intercept")?)?);
        Ok((LrModel { task, w, lambda }, space))
    }
}

pub fn lr_logit(m: &LrModel, inst: &SparseInstance) -> Result<f64> {
    m.check(inst)?;
    Ok(m.logit_unchecked(inst))
}

pub fn lr_predict(m: &LrModel, inst: &SparseInstance) -> Result<f64> {
    lr_logit(m, inst).map(sigmoid)
}

/// `sum of log-likelihoods - lambda * ||w - centre||^2`, the quantity SGD
/// ascends. The intercept is not regularised.
pub fn lr_objective(m: &LrModel, d: &Dataset, centre: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for inst in d.instances() {
        let z = lr_logit(m, inst)?;
        total += if inst.label {
            log_sigmoid(z)
        } else {
            log_sigmoid(-z)
        };
    }
    let reg: f64 = m
        .feature_weights()
        .iter()
        .zip(centre)
        .map(|(w, c)| (w - c) * (w - c))
        .sum();
    Ok(total - m.lambda * reg)
}

/// Dense gradient of `lr_objective`.
pub fn lr_gradient(m: &LrModel, d: &Dataset, centre: &[f64]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; m.w.len()];
    let bias = m.features();
    for inst in d.instances() {
        let r = inst.y() - sigmoid(lr_logit(m, inst)?);
        g[bias] += r;
        for i in inst.active() {
            g[i] += r;
        }
    }
    for (i, c) in centre.iter().enumerate().take(bias) {
        g[i] -= 2.0 * m.lambda * (m.w[i] - c);
    }
    Ok(g)
}

/// SGD settings shared by both stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrParams {
    pub lambda: f64,
    pub eta: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl LrParams {
    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda {} must be finite and non-negative",
                self.lambda
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta {} must be finite and non-negative",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Per-instance SGD on the summed log-likelihood; the regulariser is spread
/// over the epoch as `lambda / N` per step and applied as a proximal
/// (implicit) shrink toward the centre, so it stays stable for very large
/// lambda. With `lambda = 0` no shrink is applied at all.
fn sgd(d: &Dataset, mut m: LrModel, centre: &[f64], p: LrParams) -> Result<LrModel> {
    p.validate()?;
    let n = d.len();
    let bias = m.features();
    let shrink = if p.lambda > 0.0 && n > 0 {
        Some(1.0 / (1.0 + 2.0 * p.eta * p.lambda / n as f64))
    } else {
        None
    };
    let pull = |w: &mut f64, c: f64, steps: u64| {
        if let Some(s) = shrink {
            if steps > 0 {
                *w = c + s.powf(steps as f64) * (*w - c);
            }
        }
    };
    let events = d.events();
    for epoch in 0..p.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mixed = p
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
        let mut last = vec![0u64; bias];
        for (t, &pos) in order.iter().enumerate() {
            let t = t as u64;
            let inst = &events[pos].instance;
            m.check(inst)?;
            for i in inst.active() {
                pull(&mut m.w[i], centre[i], t - last[i]);
            }
            let step = p.eta * (inst.y() - sigmoid(m.logit_unchecked(inst)));
            m.w[bias] += step;
            for i in inst.active() {
                m.w[i] += step;
                pull(&mut m.w[i], centre[i], 1);
                last[i] = t + 1;
            }
            if !m.w[bias].is_finite() || inst.active().any(|i| !m.w[i].is_finite()) {
                return Err(Error::NonFinite(format!(
                    "logistic regression epoch {}, step {t}",
                    epoch + 1
                )));
            }
        }
        for (i, l) in last.iter().enumerate() {
            pull(&mut m.w[i], centre[i], n as u64 - l);
        }
    }
    Ok(m)
}

/// L2-regularised logistic regression toward zero on any dataset.
pub fn train_lr(d: &Dataset, p: LrParams) -> Result<LrModel> {
    let m = LrModel::zeros(d.task(), d.space(), p.lambda);
    let centre = vec![0.0; m.features()];
    sgd(d, m, &centre, p)
}

pub fn train_lr_cf(d_web: &Dataset, p: LrParams) -> Result<LrModel> {
    if d_web.task() != Task::Cf {
        return Err(Error::Contract("train_lr_cf needs a CF dataset".into()));
    }
    train_lr(d_web, p)
}

/// Regularisation centre for the CTR stage: CF user/publisher weights, zeros
/// for the ad block.
pub fn transfer_centre(space: &FeatureSpace, w_web_star: &[f64]) -> Result<Vec<f64>> {
    let up = space.range(Group::Publisher).end;
    if w_web_star.len() < up {
        return Err(Error::Contract(format!(
            "CF weights cover {} features, the user/publisher range needs {up}",
            w_web_star.len()
        )));
    }
    let mut c = vec![0.0; space.len()];
    c[..up].copy_from_slice(&w_web_star[..up]);
    Ok(c)
}

pub fn train_lr_ctr_transfer(d_ads: &Dataset, w_web_star: &[f64], p: LrParams) -> Result<LrModel> {
    if d_ads.task() != Task::Ctr {
        return Err(Error::Contract(
            "train_lr_ctr_transfer needs a CTR dataset".into(),
        ));
    }
    let centre = transfer_centre(d_ads.space(), w_web_star)?;
    sgd(
        d_ads,
        LrModel::zeros(Task::Ctr, d_ads.space(), p.lambda),
        &centre,
        p,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Event;
    use crate::fm::tests::random_instance;
    use crate::fm::{predict, FmModel};
    use crate::testutil::{dataset_of, tiny_space};
    use rand::Rng;
    use std::sync::Arc;

    fn params(lambda: f64, eta: f64, epochs: usize) -> LrParams {
        LrParams {
            lambda,
            eta,
            epochs,
            seed: 9,
        }
    }

    #[test]
    fn prediction_basics() {
        let space = tiny_space([3, 3, 2]);
        let mut m = LrModel::zeros(Task::Ctr, &space, 0.0);
        let x = SparseInstance::new(vec![0], vec![4], vec![6], true, Task::Ctr).unwrap();
        assert_eq!(lr_predict(&m, &x).unwrap(), 0.5);
        let last = m.features();
        m.w[last] = 1.0;
        assert_eq!(lr_predict(&m, &x).unwrap(), sigmoid(1.0));
        let bad = SparseInstance::new(vec![0], vec![4], vec![], true, Task::Cf).unwrap();
        assert!(matches!(lr_predict(&m, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn matches_fm_without_latent_vectors() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let dims = [5, 4, 3];
        let space = tiny_space(dims);
        for _ in 0..1000 {
            let mut m = LrModel::zeros(Task::Ctr, &space, 0.0);
            for w in m.w.iter_mut() {
                *w = r.random_range(-2.0..2.0);
            }
            let mut fm = FmModel::with_dims(Task::Ctr, dims, 0);
            fm.w.copy_from_slice(m.feature_weights());
            fm.w0 = m.intercept();
            let x = random_instance(&mut r, Task::Ctr, dims);
            assert_eq!(lr_predict(&m, &x).unwrap(), predict(&fm, &x).unwrap());
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let space = tiny_space([4, 3, 3]);
        let d = dataset_of(&space, Task::Ctr, 15, &mut r);
        for _ in 0..20 {
            let mut m = LrModel::zeros(Task::Ctr, &space, r.random_range(0.0..2.0));
            m.w.iter_mut().for_each(|w| *w = r.random_range(-1.0..1.0));
            let centre: Vec<f64> = (0..m.features())
                .map(|_| r.random_range(-1.0..1.0))
                .collect();
            let g = lr_gradient(&m, &d, &centre).unwrap();
            for i in 0..m.w.len() {
                let h = 1e-5;
                let (mut p, mut q) = (m.clone(), m.clone());
                p.w[i] += h;
                q.w[i] -= h;
                let num = (lr_objective(&p, &d, &centre).unwrap()
                    - lr_objective(&q, &d, &centre).unwrap())
                    / (2.0 * h);
                let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-6, "{i}: {} vs {num}", g[i]);
            }
        }
    }

    #[test]
    fn huge_lambda_shrinks_to_centre() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let space = tiny_space([6, 5, 3]);
        let web = dataset_of(&space, Task::Cf, 80, &mut r);
        let ads = dataset_of(&space, Task::Ctr, 60, &mut r);
        let cf = train_lr_cf(&web, params(1e6, 0.1, 10)).unwrap();
        let norm = cf
            .feature_weights()
            .iter()
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-2, "{norm}");
        let star: Vec<f64> = (0..11).map(|i| 0.1 * i as f64 - 0.5).collect();
        let m = train_lr_ctr_transfer(&ads, &star, params(1e6, 0.1, 10)).unwrap();
        for i in 0..11 {
            assert!((m.w[i] - star[i]).abs() < 1e-2);
        }
    }

    #[test]
    fn zero_lambda_is_plain_lr() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let space = tiny_space([6, 5, 3]);
        let ads = dataset_of(&space, Task::Ctr, 60, &mut r);
        let star: Vec<f64> = (0..11).map(|i| i as f64).collect();
        let a = train_lr_ctr_transfer(&ads, &star, params(0.0, 0.2, 5)).unwrap();
        let b = train_lr(&ads, params(0.0, 0.2, 5)).unwrap();
        assert_eq!(a.to_text("s"), b.to_text("s"));
    }

    #[test]
    fn separable_toy_set() {
        let space = tiny_space([3, 3, 1]);
        let ev = |u: usize, p: usize, y: bool| Event {
            timestamp: 0,
            instance: SparseInstance::new(vec![u], vec![p], vec![], y, Task::Cf).unwrap(),
        };
        let d = Dataset::new(
            Arc::clone(&space),
            Task::Cf,
            vec![
                ev(0, 3, true),
                ev(0, 4, true),
                ev(1, 3, false),
                ev(1, 4, false),
            ],
        )
        .unwrap();
        let m = train_lr_cf(&d, params(0.0, 0.5, 50)).unwrap();
        for inst in d.instances() {
            assert_eq!(lr_predict(&m, inst).unwrap() > 0.5, inst.label);
        }
    }

    #[test]
    fn objective_trend_on_small_set() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let space = tiny_space([4, 4, 2]);
        let d = dataset_of(&space, Task::Ctr, 20, &mut r);
        let zero = vec![0.0; space.len()];
        let mut values = Vec::new();
        for epochs in 0..=40 {
            let m = train_lr(&d, params(0.1, 0.02, epochs)).unwrap();
            values.push(-lr_objective(&m, &d, &zero).unwrap());
        }
        let down = values.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(down * 10 >= 9 * (values.len() - 1), "{down}");
    }

    #[test]
    fn shrinkage_monotone_in_lambda() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let space = tiny_space([4, 4, 2]);
        let d = dataset_of(&space, Task::Ctr, 30, &mut r);
        let star: Vec<f64> = (0..8).map(|i| 0.3 * i as f64 - 1.0).collect();
        let centre = transfer_centre(&space, &star).unwrap();
        let dist = |m: &LrModel| {
            m.feature_weights()
                .iter()
                .zip(&centre)
                .map(|(w, c)| (w - c).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 0.01, 0.1, 1.0, 10.0] {
            let m = train_lr_ctr_transfer(&d, &star, params(lambda, 0.01, 300)).unwrap();
            let now = dist(&m);
            assert!(now < prev, "lambda {lambda}: {now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn text_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let space = tiny_space([3, 3, 2]);
        let mut m = LrModel::zeros(Task::Ctr, &space, 0.25);
        m.w.iter_mut().for_each(|w| *w = r.random_range(-3.0..3.0));
        let (back, fp) = LrModel::from_text(&m.to_text("abc")).unwrap();
        assert_eq!(back, m);
        assert_eq!(fp, "abc");
        assert!(LrModel::from_text("nope").is_err());
    }
}
