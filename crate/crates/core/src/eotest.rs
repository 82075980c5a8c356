//! Monte Carlo test of equalized odds against permuted attribute copies.
//!
//! The observed statistic `t*` is compared with statistics on `K` copies
//! `A~` drawn by the inverse conditional permutation sampler, which are
//! exchangeable with `A` when `Y_hat` is independent of `A` given `Y`.
//! Large `t*` is evidence of a violation:
//!
//! ```text
//! p = (1 + #{k : t_null[k] >= t*}) / (K + 1)
//! ```

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{expand_attrs, AttrKind, Coding, Response};
use crate::density::{ConditionalDensity, Direction};
use crate::error::{bail, Result};
use crate::kpc::{KpcConfig, PreparedKpc};
use crate::linalg::Matrix;
use crate::perm::{PermMethod, PermutationSampler, DEFAULT_SWEEPS};
use crate::rng::derive_seed;

pub const DEFAULT_COPIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EoTestResult {
    pub t_star: f64,
    pub t_null: Vec<f64>,
    pub p_value: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub statistic_tag: String,
}

/// `(1 + #{k : t_null[k] >= t_star}) / (K + 1)`.
pub fn p_value(t_star: f64, t_null: &[f64]) -> f64 {
    let exceed = t_null.iter().filter(|&&t| t >= t_star).count();
    (1 + exceed) as f64 / (t_null.len() + 1) as f64
}

impl EoTestResult {
    /// Recomputes the p-value from the stored statistics.
    pub fn recomputed_p_value(&self) -> f64 {
        p_value(self.t_star, &self.t_null)
    }
}

/// A statistic bound to fixed `Y_hat` and `Y`, as a function of the attributes.
pub type BoundStatistic<'a> = Box<dyn Fn(&Matrix) -> Result<f64> + 'a>;

/// A statistic `T(Y_hat, A, Y)` evaluated on one observed and many permuted
/// attribute blocks.
pub trait EoStatistic {
    fn tag(&self) -> String;

    /// Fixes `Y_hat` and `Y`; the returned closure maps an attribute block
    /// (raw codes, one row per sample) to the statistic.
    fn bind<'a>(
        &'a self,
        yhat: &Matrix,
        a_kinds: &[AttrKind],
        y: &Response,
    ) -> Result<BoundStatistic<'a>>;
}

/// `rho^2(Y_hat, A | Y)` with categorical attributes one-hot expanded and
/// the response as a real column or one-hot rows.
///
/// The default leaves the estimate unclamped: clamping at 0 creates ties
/// between `t*` and the null statistics, which only makes the test coarser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KpcStatistic {
    pub kpc: KpcConfig,
    /// Attribute columns entering `V`; all when `None`.
    pub attr_cols: Option<Vec<usize>>,
}

impl Default for KpcStatistic {
    fn default() -> Self {
        KpcStatistic {
            kpc: KpcConfig { clamp: false, ..KpcConfig::default() },
            attr_cols: None,
        }
    }
}

impl EoStatistic for KpcStatistic {
    fn tag(&self) -> String {
        match &self.attr_cols {
            None => String::from("kpc"),
            Some(cols) => {
                let list: Vec<String> = cols.iter().map(|c| alloc::format!("{c}")).collect();
                alloc::format!("kpc[a{}]", list.join(",a"))
            }
        }
    }

    fn bind<'a>(
        &'a self,
        yhat: &Matrix,
        a_kinds: &[AttrKind],
        y: &Response,
    ) -> Result<Box<dyn Fn(&Matrix) -> Result<f64> + 'a>> {
        let (cols, kinds): (Vec<usize>, Vec<AttrKind>) = match &self.attr_cols {
            None => ((0..a_kinds.len()).collect(), a_kinds.to_vec()),
            Some(cols) => {
                if cols.is_empty() || cols.iter().any(|&c| c >= a_kinds.len()) {
                    bail!(InvalidArgument, "attribute selection {cols:?} out of range for {} columns", a_kinds.len());
                }
                (cols.clone(), cols.iter().map(|&c| a_kinds[c]).collect())
            }
        };
        let prepared = PreparedKpc::new(yhat, &y.encoding(), &self.kpc)?;
        Ok(Box::new(move |a: &Matrix| {
            let v = expand_attrs(&a.select_cols(&cols), &kinds, Coding::Full);
            prepared.evaluate(&v)
        }))
    }
}

/// Sampling and statistic settings shared by single tests and power studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EoTestConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub sweeps: usize,
    pub alpha: f64,
    pub statistic: KpcStatistic,
}

impl Default for EoTestConfig {
    fn default() -> Self {
        EoTestConfig {
            k: DEFAULT_COPIES,
            sweeps: DEFAULT_SWEEPS,
            alpha: 0.05,
            statistic: KpcStatistic::default(),
        }
    }
}

impl EoTestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            bail!(InvalidArgument, "K must be >= 1");
        }
        if self.sweeps == 0 {
            bail!(InvalidArgument, "sampler sweeps must be >= 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bail!(InvalidArgument, "alpha must lie in (0, 1), got {}", self.alpha);
        }
        self.statistic.kpc.validate()
    }
}

/// Runs the test with copy `k` drawn on seed stream `derive_seed(seed, k)`.
#[allow(clippy::too_many_arguments)]
pub fn eo_test<Q, T>(
    yhat: &Matrix,
    a: &Matrix,
    a_kinds: &[AttrKind],
    y: &Response,
    q: &Q,
    k: usize,
    sweeps: usize,
    statistic: &T,
    seed: u64,
) -> Result<EoTestResult>
where
    Q: ConditionalDensity + ?Sized,
    T: EoStatistic + ?Sized,
{
    if k == 0 {
        bail!(InvalidArgument, "K must be >= 1");
    }
    let n = y.len();
    if yhat.rows() != n || a.rows() != n {
        bail!(Dimension, "Y_hat has {} rows, A {}, Y {}", yhat.rows(), a.rows(), n);
    }
    if q.direction() != Direction::YGivenA {
        bail!(InvalidArgument, "the test samples by ICP and needs q(y | a)");
    }
    let sampler = PermutationSampler::with_method(q, a, &y.values(), PermMethod::Icp)?;
    let stat = statistic.bind(yhat, a_kinds, y)?;
    let t_star = stat(a)?;
    let mut t_null = Vec::with_capacity(k);
    for c in 0..k {
        let copy = sampler.draw(a, sweeps, derive_seed(seed, c as u64))?;
        t_null.push(stat(&copy.a_tilde)?);
    }
    if !t_star.is_finite() || t_null.iter().any(|t| !t.is_finite()) {
        bail!(NonFinite, "test statistic is not finite");
    }
    Ok(EoTestResult {
        p_value: p_value(t_star, &t_null),
        t_star,
        t_null,
        k,
        seed,
        statistic_tag: statistic.tag(),
    })
}

/// Fraction of `reps` replicate tests with `p < alpha`; replicate `r` gets
/// seed `derive_seed(seed, r)`.
pub fn power_estimate<F>(reps: usize, alpha: f64, seed: u64, mut replicate: F) -> Result<f64>
where
    F: FnMut(u64) -> Result<EoTestResult>,
{
    if reps == 0 {
        bail!(InvalidArgument, "reps must be >= 1");
    }
    let mut hits = 0usize;
    for r in 0..reps {
        if replicate(derive_seed(seed, r as u64))?.p_value < alpha {
            hits += 1;
        }
    }
    Ok(hits as f64 / reps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_quality, SimSpec, SimVariant};
    use crate::density::CondDensity;
    use crate::rng::rng_from_seed;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn p_value_edges() {
        assert_eq!(p_value(5.0, &[1.0, 2.0, 3.0]), 0.25);
        assert_eq!(p_value(0.0, &[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(p_value(2.0, &[2.0]), 1.0);
        assert_eq!(p_value(2.1, &[2.0]), 0.5);
    }

    proptest! {
        #[test]
        fn p_value_bounds_and_monotone(t_star in -1.0f64..1.0, nulls in proptest::collection::vec(-1.0f64..1.0, 1..50)) {
            let p = p_value(t_star, &nulls);
            let k = nulls.len() as f64;
            prop_assert!(p >= 1.0 / (k + 1.0) && p <= 1.0);
            // a smaller extra null leaves the exceedance count unchanged
            let mut more = nulls.clone();
            more.push(t_star - 1.0);
            let exceed = |p: f64, k: usize| p * (k as f64 + 1.0) - 1.0;
            prop_assert!((exceed(p_value(t_star, &more), more.len()) - exceed(p, nulls.len())).abs() < 1e-9);
        }
    }

    struct Sum;

    impl EoStatistic for Sum {
        fn tag(&self) -> String {
            String::from("sum")
        }

        fn bind<'a>(&'a self, yhat: &Matrix, _: &[AttrKind], _: &Response) -> Result<Box<dyn Fn(&Matrix) -> Result<f64> + 'a>> {
            let u = yhat.column(0);
            Ok(Box::new(move |a: &Matrix| Ok(u.iter().zip(a.column(0)).map(|(x, y)| x * y).sum())))
        }
    }

    fn quality_case(seed: u64, n: usize) -> (crate::data::Dataset, CondDensity) {
        let spec = SimSpec::new(SimVariant::Quality, n, 1, 0, 0.6, seed);
        let ds = gen_quality(&spec).unwrap();
        (ds, CondDensity::oracle(spec, Direction::YGivenA))
    }

    #[test]
    fn result_is_deterministic_and_consistent() {
        let (ds, q) = quality_case(1, 60);
        let yhat = Matrix::column_vector(&ds.y().values());
        let run = |seed| eo_test(&yhat, ds.a(), ds.a_kinds(), ds.y(), &q, 19, 20, &KpcStatistic::default(), seed).unwrap();
        let r = run(3);
        assert_eq!(r, run(3));
        assert_eq!(r.t_null.len(), 19);
        assert_eq!(r.p_value, r.recomputed_p_value());
        assert_eq!(r.statistic_tag, "kpc");
        let r1 = eo_test(&yhat, ds.a(), ds.a_kinds(), ds.y(), &q, 1, 20, &Sum, 0).unwrap();
        assert!(r1.p_value == 0.5 || r1.p_value == 1.0);
    }

    #[test]
    fn copied_attribute_is_detected() {
        let (ds, q) = quality_case(2, 300);
        let yhat = ds.a().select_cols(&[0]);
        let r = eo_test(&yhat, ds.a(), ds.a_kinds(), ds.y(), &q, 19, 50, &KpcStatistic::default(), 1).unwrap();
        assert_eq!(r.p_value, 0.05);
    }

    #[test]
    fn errors_on_bad_input() {
        let (ds, q) = quality_case(3, 20);
        let yhat = Matrix::zeros(19, 1);
        assert!(eo_test(&yhat, ds.a(), ds.a_kinds(), ds.y(), &q, 5, 5, &Sum, 0).is_err());
        let yhat = Matrix::zeros(20, 1);
        assert!(eo_test(&yhat, ds.a(), ds.a_kinds(), ds.y(), &q, 0, 5, &Sum, 0).is_err());
        let cp = CondDensity::oracle(SimSpec::new(SimVariant::Quality, 20, 1, 0, 0.6, 3), Direction::AGivenY);
        assert!(eo_test(&yhat, ds.a(), ds.a_kinds(), ds.y(), &cp, 5, 5, &Sum, 0).is_err());
        let bad = KpcStatistic { attr_cols: Some(vec![4]), ..Default::default() };
        assert!(eo_test(&yhat, ds.a(), ds.a_kinds(), ds.y(), &q, 5, 5, &bad, 0).is_err());
    }

    #[test]
    fn power_of_single_rep_is_binary() {
        let (ds, q) = quality_case(4, 40);
        let mut rng = rng_from_seed(9);
        let yhat = Matrix::column_vector(&(0..40).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>());
        let p = power_estimate(1, 0.05, 0, |s| eo_test(&yhat, ds.a(), ds.a_kinds(), ds.y(), &q, 9, 10, &Sum, s)).unwrap();
        assert!(p == 0.0 || p == 1.0);
        assert!(power_estimate(0, 0.05, 0, |s| eo_test(&yhat, ds.a(), ds.a_kinds(), ds.y(), &q, 9, 10, &Sum, s)).is_err());
    }
}
