//! Factorisation-machine parameters and the cross-group logistic predictors.
//!
//! Interactions are restricted to pairs of features from different groups
//! (user x publisher for CF; user x publisher, user x ad and publisher x ad
//! for CTR). Because intra-group pairs are excluded, the interaction part
//! of the logit equals `<S_u, S_p> + <S_u, S_a> + <S_p, S_a>` where `S_g`
//! is the sum of the latent vectors active in group `g`.

use std::fmt::Write as _;

use crate::data::{FeatureSpace, Group, SparseInstance, Task};
use crate::error::{Error, Result};

const MODEL_HEADER: &str = "xferfm-model v1";

/// Overflow-safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without forming the probability.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Bias, per-feature weights and K-dimensional latent vectors for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct FmModel {
    task: Task,
    k: usize,
    /// `[I, J, L]`; `L` is zero for CF models.
    dims: [usize; 3],
    pub w0: f64,
    pub w: Vec<f64>,
    /// Row-major `len() x k`.
    pub v: Vec<f64>,
}

/// Per-group latent sums of one instance.
#[derive(Clone, Debug, Default)]
pub struct GroupSums {
    pub user: Vec<f64>,
    pub publisher: Vec<f64>,
    pub ad: Vec<f64>,
}

impl GroupSums {
    pub fn new(k: usize) -> Self {
        GroupSums {
            user: vec![0.0; k],
            publisher: vec![0.0; k],
            ad: vec![0.0; k],
        }
    }

    pub fn get(&self, group: Group) -> &[f64] {
        match group {
            Group::User => &self.user,
            Group::Publisher => &self.publisher,
            Group::Ad => &self.ad,
        }
    }

    fn resize(&mut self, k: usize) {
        for s in [&mut self.user, &mut self.publisher, &mut self.ad] {
            s.clear();
            s.resize(k, 0.0);
        }
    }
}

impl FmModel {
    /// All-zero model covering the task's view of `space`.
    pub fn zeros(task: Task, space: &FeatureSpace, k: usize) -> Self {
        let ad = if task == Task::Ctr {
            space.ad_dims()
        } else {
            0
        };
        Self::with_dims(task, [space.user_dims(), space.pub_dims(), ad], k)
    }

    pub fn with_dims(task: Task, dims: [usize; 3], k: usize) -> Self {
        let dims = if task == Task::Cf {
            [dims[0], dims[1], 0]
        } else {
            dims
        };
        let n: usize = dims.iter().sum();
        FmModel {
            task,
            k,
            dims,
            w0: 0.0,
            w: vec![0.0; n],
            v: vec![0.0; n * k],
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Number of features this model covers.
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Index range of one group in this model.
    pub fn range(&self, group: Group) -> std::ops::Range<usize> {
        let [i, j, l] = self.dims;
        match group {
            Group::User => 0..i,
            Group::Publisher => i..i + j,
            Group::Ad => i + j..i + j + l,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.k..(i + 1) * self.k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.v[i * self.k..(i + 1) * self.k]
    }

    /// Scalar parameters excluding the bias.
    pub fn param_count(&self) -> usize {
        self.w.len() + self.v.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w0.is_finite() && self.w.iter().chain(&self.v).all(|x| x.is_finite())
    }

    /// Rejects instances of another task or with indices outside this model.
    pub fn check(&self, inst: &SparseInstance) -> Result<()> {
        if inst.task != self.task {
            return Err(Error::Contract(format!(
                "{} instance given to a {} model",
                inst.task, self.task
            )));
        }
        for group in Group::ALL {
            let range = self.range(group);
            if let Some(bad) = inst.group(group).iter().find(|i| !range.contains(i)) {
                return Err(Error::Contract(format!(
                    "{group} index {bad} outside {range:?}"
                )));
            }
        }
        Ok(())
    }

    /// Fills `sums` with the per-group latent sums and returns the logit.
    /// Indices are assumed valid.
    pub fn logit_with_sums(&self, inst: &SparseInstance, sums: &mut GroupSums) -> f64 {
        sums.resize(self.k);
        let mut score = self.w0;
        for (group, sum) in [
            (&inst.user_idx, &mut sums.user),
            (&inst.pub_idx, &mut sums.publisher),
            (&inst.ad_idx, &mut sums.ad),
        ] {
            for &i in group {
                score += self.w[i];
                for (s, x) in sum.iter_mut().zip(self.row(i)) {
                    *s += x;
                }
            }
        }
        score += dot(&sums.user, &sums.publisher);
        if !inst.ad_idx.is_empty() {
            score += dot(&sums.user, &sums.ad) + dot(&sums.publisher, &sums.ad);
        }
        score
    }

    pub(crate) fn logit_unchecked(&self, inst: &SparseInstance) -> f64 {
        self.logit_with_sums(inst, &mut GroupSums::new(self.k))
    }

    /// Text form with 17 significant digits, bound to a feature-space
    /// fingerprint.
    pub fn to_text(&self, space_fingerprint: &str) -> String {
        let mut out = String::new();
        let [i, j, l] = self.dims;
        let _ = writeln!(out, "{MODEL_HEADER}");
        let _ = writeln!(out, "task\t{}", self.task);
        let _ = writeln!(out, "k\t{}", self.k);
        let _ = writeln!(out, "dims\t{i}\t{j}\t{l}");
        let _ = writeln!(out, "space\t{space_fingerprint}");
        let _ = writeln!(out, "w0\t{:.16e}", self.w0);
        for f in 0..self.len() {
            let _ = write!(out, "{f}\t{:.16e}", self.w[f]);
            for x in self.row(f) {
                let _ = write!(out, "\t{x:.16e}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the text form, returning the model and its space fingerprint.
    pub fn from_text(text: &str) -> Result<(FmModel, String)> {
        const CTX: &str = "model";
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
        let mut next = |key: &str| -> Result<(usize, Vec<String>)> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::parse(CTX, 0, format!("missing `{key}` line")))?;
            let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
            if !key.is_empty() && fields[0] != key {
                return Err(Error::parse(CTX, n + 1, format!("expected `{key}`")));
            }
            Ok((n + 1, fields))
        };
        let (_, header) = next("")?;
        if header.join("\t") != MODEL_HEADER {
            return Err(Error::parse(
                CTX,
                1,
                format!("expected header `{MODEL_HEADER}`"),
            ));
        }
        let (n, f) = next("task")?;
        let task = f
            .get(1)
            .and_then(|t| Task::parse(t))
            .ok_or_else(|| Error::parse(CTX, n, "bad task"))?;
        let (n, f) = next("k")?;
        let k: usize = parse_field(&f, 1, n)?;
        let (n, f) = next("dims")?;
        let dims = [
            parse_field(&f, 1, n)?,
            parse_field(&f, 2, n)?,
            parse_field(&f, 3, n)?,
        ];
        let (n, f) = next("space")?;
        let fingerprint = f
            .get(1)
            .cloned()
            .ok_or_else(|| Error::parse(CTX, n, "missing fingerprint"))?;
        let (n, f) = next("w0")?;
        let mut model = FmModel::with_dims(task, dims, k);
        if model.dims != dims {
            return Err(Error::parse(CTX, n, "CF model with nonzero ad dimension"));
        }
        model.w0 = parse_field(&f, 1, n)?;
        for feature in 0..model.len() {
            let (n, f) = next("")?;
            if f.len() != k + 2 || parse_field::<usize>(&f, 0, n)? != feature {
                return Err(Error::parse(
                    CTX,
                    n,
                    format!("bad row for feature {feature}"),
                ));
            }
            model.w[feature] = parse_field(&f, 1, n)?;
            for c in 0..k {
                model.v[feature * k + c] = parse_field(&f, 2 + c, n)?;
            }
        }
        if let Ok((n, _)) = next("") {
            return Err(Error::parse(CTX, n, "trailing content"));
        }
        Ok((model, fingerprint))
    }
}

fn parse_field<T: std::str::FromStr>(fields: &[String], at: usize, line: usize) -> Result<T> {
    fields
        .get(at)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse("model", line, format!("bad field {at}")))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pre-sigmoid score of either task.
pub fn linear_score(m: &FmModel, inst: &SparseInstance) -> Result<f64> {
    m.check(inst)?;
    Ok(m.logit_unchecked(inst))
}

/// Browsing probability from the two-group predictor.
pub fn predict_cf(m: &FmModel, inst: &SparseInstance) -> Result<f64> {
    if m.task() != Task::Cf {
        return Err(Error::Contract("predict_cf needs a CF model".into()));
    }
    linear_score(m, inst).map(sigmoid)
}

/// Click probability from the three-group predictor.
pub fn predict_ctr(m: &FmModel, inst: &SparseInstance) -> Result<f64> {
    if m.task() != Task::Ctr {
        return Err(Error::Contract("predict_ctr needs a CTR model".into()));
    }
    linear_score(m, inst).map(sigmoid)
}

/// Dispatches on the model's task.
pub fn predict(m: &FmModel, inst: &SparseInstance) -> Result<f64> {
    linear_score(m, inst).map(sigmoid)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pairwise enumeration of every active cross-group pair.
    pub(crate) fn brute_force_logit(m: &FmModel, inst: &SparseInstance) -> f64 {
        let active: Vec<(usize, Group)> = Group::ALL
            .iter()
            .flat_map(|&g| inst.group(g).iter().map(move |&i| (i, g)))
            .collect();
        let mut s = m.w0;
        for &(i, _) in &active {
            s += m.w[i];
        }
        for (a, &(i, gi)) in active.iter().enumerate() {
            for &(j, gj) in &active[a + 1..] {
                if gi != gj {
                    s += (0..m.k()).map(|f| m.row(i)[f] * m.row(j)[f]).sum::<f64>();
                }
            }
        }
        s
    }

    pub(crate) fn random_model(
        rng: &mut impl Rng,
        task: Task,
        dims: [usize; 3],
        k: usize,
        scale: f64,
    ) -> FmModel {
        let mut m = FmModel::with_dims(task, dims, k);
        m.w0 = rng.random_range(-scale..scale);
        for x in m.w.iter_mut().chain(m.v.iter_mut()) {
            *x = rng.random_range(-scale..scale);
        }
        m
    }

    pub(crate) fn random_instance(
        rng: &mut impl Rng,
        task: Task,
        dims: [usize; 3],
    ) -> SparseInstance {
        let [i, j, l] = dims;
        let mut pick = |lo: usize, n: usize, max: usize| -> Vec<usize> {
            let count = rng.random_range(1..=max.min(n));
            rand::seq::index::sample(rng, n, count)
                .into_iter()
                .map(|x| lo + x)
                .collect()
        };
        let u = pick(0, i, 3);
        let p = pick(i, j, 3);
        let a = if task == Task::Ctr {
            pick(i + j, l, 2)
        } else {
            Vec::new()
        };
        SparseInstance::new(u, p, a, rng.random_bool(0.4), task).unwrap()
    }

    fn inst(u: &[usize], p: &[usize], a: &[usize], task: Task) -> SparseInstance {
        SparseInstance::new(u.to_vec(), p.to_vec(), a.to_vec(), true, task).unwrap()
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((1.0 - sigmoid(40.0)).abs() < 1e-12);
        assert!(sigmoid(1000.0) <= 1.0 && sigmoid(-1000.0) >= 0.0);
        assert!(sigmoid(-1000.0).is_finite() && sigmoid(1000.0).is_finite());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: f64 = rng.random_range(-50.0..50.0);
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((log_sigmoid(0.3) - sigmoid(0.3).ln()).abs() < 1e-15);
    }

    #[test]
    fn cf_predictions_by_hand() {
        let mut m = FmModel::with_dims(Task::Cf, [1, 1, 0], 1);
        let x = inst(&[0], &[1], &[], Task::Cf);
        assert_eq!(predict_cf(&m, &x).unwrap(), 0.5);
        m.w0 = 1.0;
        assert_eq!(predict_cf(&m, &x).unwrap(), sigmoid(1.0));
        m.w0 = 0.0;
        m.v = vec![0.5, 0.4];
        let logit = linear_score(&m, &x).unwrap();
        assert!((logit - 0.2).abs() < 1e-15);
        assert_eq!(logit, brute_force_logit(&m, &x));
        assert_eq!(predict_cf(&m, &x).unwrap(), sigmoid(logit));
    }

    #[test]
    fn ctr_three_way_by_hand() {
        let mut m = FmModel::with_dims(Task::Ctr, [1, 1, 1], 2);
        let (a, b, c) = ([0.3, -0.2], [0.7, 0.1], [-0.4, 0.9]);
        m.v = [a, b, c].concat();
        let x = inst(&[0], &[1], &[2], Task::Ctr);
        let expected = dot(&a, &b) + dot(&a, &c) + dot(&b, &c);
        assert!((linear_score(&m, &x).unwrap() - expected).abs() < 1e-15);
        assert!((brute_force_logit(&m, &x) - expected).abs() < 1e-15);
        assert_eq!(
            predict_ctr(&FmModel::with_dims(Task::Ctr, [1, 1, 1], 2), &x).unwrap(),
            0.5
        );
    }

    #[test]
    fn ctr_with_zero_ad_block_reduces_to_cf() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [4, 3, 2];
        for _ in 0..50 {
            let mut ctr = random_model(&mut rng, Task::Ctr, dims, 3, 1.0);
            for a in 7..9 {
                ctr.w[a] = 0.0;
                ctr.row_mut(a).fill(0.0);
            }
            let mut cf = FmModel::with_dims(Task::Cf, dims, 3);
            cf.w0 = ctr.w0;
            cf.w.copy_from_slice(&ctr.w[..7]);
            cf.v.copy_from_slice(&ctr.v[..7 * 3]);
            let x = random_instance(&mut rng, Task::Ctr, dims);
            let xc = inst(&x.user_idx, &x.pub_idx, &[], Task::Cf);
            let a = predict_ctr(&ctr, &x).unwrap();
            let b = predict_cf(&cf, &xc).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn contract_errors() {
        let m = FmModel::with_dims(Task::Cf, [2, 2, 0], 2);
        assert!(predict_cf(&m, &inst(&[0], &[5], &[], Task::Cf)).is_err());
        assert!(predict_cf(&m, &inst(&[2], &[3], &[], Task::Cf)).is_err());
        assert!(predict_ctr(&m, &inst(&[0], &[2], &[], Task::Cf)).is_err());
        let c = FmModel::with_dims(Task::Ctr, [2, 2, 1], 2);
        assert!(predict_ctr(&c, &inst(&[0], &[2], &[], Task::Cf)).is_err());
    }

    #[test]
    fn k_zero_is_logistic_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = [5, 4, 3];
        let m = random_model(&mut rng, Task::Ctr, dims, 0, 1.0);
        for _ in 0..100 {
            let x = random_instance(&mut rng, Task::Ctr, dims);
            let lr = m.w0 + x.active().map(|i| m.w[i]).sum::<f64>();
            assert_eq!(linear_score(&m, &x).unwrap(), lr);
        }
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, Task::Ctr, [3, 2, 2], 4, 3.0);
        let text = m.to_text("abc123");
        let (back, fp) = FmModel::from_text(&text).unwrap();
        assert_eq!(fp, "abc123");
        assert_eq!(back, m);
        assert!(FmModel::from_text(&text.replace("task\tCTR", "task\tXX")).is_err());
        assert!(FmModel::from_text(&text[..text.len() - 30]).is_err());
    }

    proptest! {
        #[test]
        fn grouped_sums_match_pairwise_oracle(seed in 0u64..10_000, k in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [5, 4, 3];
            for task in [Task::Cf, Task::Ctr] {
                let m = random_model(&mut rng, task, dims, k, 1.0);
                let x = random_instance(&mut rng, task, dims);
                let fast = linear_score(&m, &x).unwrap();
                prop_assert!((fast - brute_force_logit(&m, &x)).abs() < 1e-12);
                prop_assert_eq!(predict(&m, &x).unwrap(), sigmoid(fast));
            }
        }

        #[test]
        fn zeroed_group_drops_its_interactions(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [4, 4, 3];
            let mut m = random_model(&mut rng, Task::Ctr, dims, 3, 1.0);
            for i in 4..8 {
                m.row_mut(i).fill(0.0);
            }
            let x = random_instance(&mut rng, Task::Ctr, dims);
            let lin = m.w0 + x.active().map(|i| m.w[i]).sum::<f64>();
            let su: Vec<f64> = (0..3).map(|f| x.user_idx.iter().map(|&i| m.row(i)[f]).sum()).collect();
            let sa: Vec<f64> = (0..3).map(|f| x.ad_idx.iter().map(|&i| m.row(i)[f]).sum()).collect();
            let got = linear_score(&m, &x).unwrap();
            prop_assert!((got - (lin + dot(&su, &sa))).abs() < 1e-12);
        }

        #[test]
        fn permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [6, 5, 4];
            let m = random_model(&mut rng, Task::Ctr, dims, 3, 1.0);
            let x = random_instance(&mut rng, Task::Ctr, dims);
            let mut u = x.user_idx.clone();
            u.reverse();
            let mut p = x.pub_idx.clone();
            p.rotate_left(1);
            let y = SparseInstance::new(u, p, x.ad_idx.clone(), x.label, Task::Ctr).unwrap();
            prop_assert_eq!(linear_score(&m, &x).unwrap().to_bits(), linear_score(&m, &y).unwrap().to_bits());
        }

        #[test]
        fn monotone_in_bias(seed in 0u64..10_000, d in 0.001f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [4, 3, 2];
            let mut m = random_model(&mut rng, Task::Ctr, dims, 2, 0.5);
            let x = random_instance(&mut rng, Task::Ctr, dims);
            let before = predict_ctr(&m, &x).unwrap();
            m.w0 += d;
            prop_assert!(predict_ctr(&m, &x).unwrap() >= before);
        }
    }
}
