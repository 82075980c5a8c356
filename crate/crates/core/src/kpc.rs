//! Graph-based kernel partial correlation `rho^2(U, V | W)`.
//!
//! With `N_W(i)` the nearest neighbours of `i` in `W` and `N_WV(i)` those in
//! the standardized concatenation `(W, V)`:
//!
//! ```text
//!         mean_i k(U_i, U_{N_WV(i)}) - mean_i k(U_i, U_{N_W(i)})
//! rho^2 = -------------------------------------------------------
//!             mean_i k(U_i, U_i)     - mean_i k(U_i, U_{N_W(i)})
//! ```
//!
//! `k` is a Gaussian kernel on `U`; neighbour terms average over `k` neighbours.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::linalg::{sq_dist, Matrix, Standardizer};
use crate::rng::rng_from_seed;

const BANDWIDTH_FLOOR: f64 = 1e-8;
const SD_FLOOR: f64 = 1e-8;
const DENOMINATOR_FLOOR: f64 = 1e-12;
const MAX_BANDWIDTH_PAIRS: usize = 1_000_000;
const BANDWIDTH_SEED: u64 = 0x6b70_635f_6277;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "h", rename_all = "snake_case")]
pub enum Bandwidth {
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Equal distances resolve to the lowest index.
    LowestIndex,
    /// Every point tied with the k-th neighbour joins the neighbour set.
    ///
    /// A constant or discrete `W` then compares each point with its whole
    /// tied group rather than a single arbitrary member.
    #[default]
    IncludeTies,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KpcConfig {
    pub bandwidth: Bandwidth,
    pub neighbors: usize,
    pub tie_break: TieBreak,
    pub clamp: bool,
}

impl Default for KpcConfig {
    fn default() -> Self {
        KpcConfig {
            bandwidth: Bandwidth::MedianHeuristic,
            neighbors: 1,
            tie_break: TieBreak::IncludeTies,
            clamp: true,
        }
    }
}

impl KpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            bail!(InvalidArgument, "neighbors must be >= 1");
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                bail!(InvalidArgument, "fixed bandwidth must be positive, got {h}");
            }
        }
        Ok(())
    }
}

fn median_of(values: &mut [f64]) -> f64 {
    let m = values.len();
    let (_, hi, _) = values.select_nth_unstable_by(m / 2, f64::total_cmp);
    let hi = *hi;
    if m % 2 == 1 {
        hi
    } else {
        let lo = values[..m / 2].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Median pairwise Euclidean distance, over all pairs when there are at
/// most 10^6 of them and over 10^6 seeded random pairs otherwise.
pub fn median_bandwidth(u: &Matrix) -> Result<f64> {
    let n = u.rows();
    if n < 2 {
        bail!(InvalidArgument, "bandwidth needs at least two points");
    }
    let mut d = if n * n <= MAX_BANDWIDTH_PAIRS {
        let mut d = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                d.push(sq_dist(u.row(i), u.row(j)).sqrt());
            }
        }
        d
    } else {
        let mut rng = rng_from_seed(BANDWIDTH_SEED);
        (0..MAX_BANDWIDTH_PAIRS)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                sq_dist(u.row(i), u.row(j)).sqrt()
            })
            .collect()
    };
    Ok(median_of(&mut d).max(BANDWIDTH_FLOOR))
}

/// Exact `k`-nearest-neighbour table (excluding self) by Euclidean distance.
///
/// Rows are sorted by (distance, index). Under [`TieBreak::IncludeTies`] a
/// row may hold more than `k` entries.
pub fn knn_graph(z: &Matrix, k: usize, tie_break: TieBreak) -> Result<Vec<Vec<usize>>> {
    let n = z.rows();
    if n < 2 {
        bail!(InvalidArgument, "neighbour graph needs n >= 2");
    }
    if k == 0 || k >= n {
        bail!(InvalidArgument, "k = {k} must lie in 1..{n}");
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let zi = z.row(i);
        if k == 1 && tie_break == TieBreak::LowestIndex {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in (0..n).filter(|&j| j != i) {
                let d = sq_dist(zi, z.row(j));
                if d < best.0 || best.1 == usize::MAX {
                    best = (d, j);
                }
            }
            out.push(alloc::vec![best.1]);
            continue;
        }
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (sq_dist(zi, z.row(j)), j)));
        cand.select_nth_unstable_by(k - 1, cmp);
        let kth = cand[k - 1].0;
        let mut top: Vec<(f64, usize)> = match tie_break {
            TieBreak::LowestIndex => cand[..k].to_vec(),
            TieBreak::IncludeTies => cand.iter().copied().filter(|c| c.0 <= kth).collect(),
        };
        top.sort_by(cmp);
        out.push(top.into_iter().map(|(_, j)| j).collect());
    }
    Ok(out)
}

fn gaussian_kernel(a: &[f64], b: &[f64], h: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * h * h)).exp()
}

fn standardize(m: &Matrix) -> Matrix {
    Standardizer::fit(m, SD_FLOOR).apply(m)
}

fn neighbour_term(u: &Matrix, graph: &[Vec<usize>], h: f64) -> f64 {
    let n = u.rows();
    graph
        .iter()
        .enumerate()
        .map(|(i, nb)| nb.iter().map(|&j| gaussian_kernel(u.row(i), u.row(j), h)).sum::<f64>() / nb.len() as f64)
        .sum::<f64>()
        / n as f64
}

/// KPC estimator with `U` and `W` bound, evaluating many candidate `V` blocks.
///
/// The `W` graph and bandwidth are computed once, which is what the
/// permutation test needs.
#[derive(Debug, Clone)]
pub struct PreparedKpc {
    u: Matrix,
    w_std: Matrix,
    h: f64,
    w_term: f64,
    cfg: KpcConfig,
}

impl PreparedKpc {
    pub fn new(u: &Matrix, w: &Matrix, cfg: &KpcConfig) -> Result<Self> {
        cfg.validate()?;
        let n = u.rows();
        if w.rows() != n {
            bail!(Dimension, "U has {} rows, W has {}", n, w.rows());
        }
        if n < 3 {
            bail!(InvalidArgument, "KPC needs n >= 3");
        }
        let h = match cfg.bandwidth {
            Bandwidth::MedianHeuristic => median_bandwidth(u)?,
            Bandwidth::Fixed(h) => h,
        };
        let w_std = standardize(w);
        let graph = knn_graph(&w_std, cfg.neighbors, cfg.tie_break)?;
        let w_term = neighbour_term(u, &graph, h);
        Ok(PreparedKpc {
            u: u.clone(),
            w_std,
            h,
            w_term,
            cfg: *cfg,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn evaluate(&self, v: &Matrix) -> Result<f64> {
        if v.rows() != self.u.rows() {
            bail!(Dimension, "V has {} rows, expected {}", v.rows(), self.u.rows());
        }
        let wv = self.w_std.hcat(&standardize(v))?;
        let graph = knn_graph(&wv, self.cfg.neighbors, self.cfg.tie_break)?;
        let wv_term = neighbour_term(&self.u, &graph, self.h);
        // k(u, u) = 1 for the Gaussian kernel
        let denom = 1.0 - self.w_term;
        if denom.abs() < DENOMINATOR_FLOOR {
            return Ok(0.0);
        }
        let rho = (wv_term - self.w_term) / denom;
        Ok(if self.cfg.clamp { rho.clamp(0.0, 1.0) } else { rho })
    }
}

/// `rho^2(U, V | W)` with the rows of each block as points.
pub fn kpc_estimate(u: &Matrix, v: &Matrix, w: &Matrix, cfg: &KpcConfig) -> Result<f64> {
    PreparedKpc::new(u, w, cfg)?.evaluate(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use alloc::vec;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn col(v: &[f64]) -> Matrix {
        Matrix::column_vector(v)
    }

    #[test]
    fn bandwidth_basics() {
        assert_eq!(median_bandwidth(&col(&[0.0, 2.0])).unwrap(), 2.0);
        assert_eq!(median_bandwidth(&col(&[3.0; 10])).unwrap(), 1e-8);
        assert!(median_bandwidth(&col(&[1.0])).is_err());
    }

    #[test]
    fn bandwidth_matches_brute_force_median() {
        let mut rng = rng_from_seed(1);
        let x: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
        let mut all = Vec::new();
        for i in 0..1000 {
            for j in i + 1..1000 {
                all.push((x[i] - x[j]).abs());
            }
        }
        all.sort_by(f64::total_cmp);
        let m = all.len();
        let brute = 0.5 * (all[m / 2 - 1] + all[m / 2]);
        let h = median_bandwidth(&col(&x)).unwrap();
        assert!((h - brute).abs() <= 0.1 * brute);
        // |X - X'| for X, X' ~ N(0, 1) has median sqrt(2) * 0.6745
        assert!((h - 2f64.sqrt() * 0.6745).abs() < 0.1 * h);
    }

    #[test]
    fn collinear_and_duplicate_neighbours() {
        let g = knn_graph(&col(&[0.0, 1.0, 3.0]), 1, TieBreak::LowestIndex).unwrap();
        assert_eq!(g, vec![vec![1], vec![0], vec![1]]);
        let g = knn_graph(&col(&[5.0, 2.0, 5.0, 5.0]), 1, TieBreak::LowestIndex).unwrap();
        assert_eq!(g[0], vec![2]);
        assert_eq!(g[2], vec![0]);
        assert_eq!(g[3], vec![0]);
        assert!(knn_graph(&col(&[1.0, 2.0]), 2, TieBreak::LowestIndex).is_err());
        let g = knn_graph(&col(&[5.0, 2.0, 5.0, 5.0]), 1, TieBreak::IncludeTies).unwrap();
        assert_eq!(g[0], vec![2, 3]);
        assert_eq!(g[1], vec![0, 2, 3]);
    }

    fn brute_knn(z: &Matrix, k: usize) -> Vec<Vec<usize>> {
        (0..z.rows())
            .map(|i| {
                let mut c: Vec<(f64, usize)> = (0..z.rows()).filter(|&j| j != i).map(|j| (sq_dist(z.row(i), z.row(j)), j)).collect();
                c.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                c.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    #[test]
    fn knn_equals_brute_force() {
        let mut rng = rng_from_seed(2);
        let data: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
        let z = Matrix::from_vec(500, 2, data).unwrap();
        for k in [1, 3] {
            assert_eq!(knn_graph(&z, k, TieBreak::LowestIndex).unwrap(), brute_knn(&z, k));
            assert_eq!(knn_graph(&z, k, TieBreak::IncludeTies).unwrap(), brute_knn(&z, k));
        }
    }

    #[test]
    fn deterministic_dependence_gives_high_kpc() {
        let mut rng = rng_from_seed(3);
        let n = 500;
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let u: Vec<f64> = v.iter().map(|x| x.sin() + 0.5 * x).collect();
        let w = vec![1.0; n];
        let r = kpc_estimate(&col(&u), &col(&v), &col(&w), &KpcConfig::default()).unwrap();
        assert!(r >= 0.9, "kpc {r}");
    }

    #[test]
    fn conditional_independence_gives_small_kpc() {
        let mut rng = rng_from_seed(5);
        let n = 500;
        let reps = 10;
        let mut total = 0.0;
        for _ in 0..reps {
            let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let u: Vec<f64> = w.iter().map(|x| x.sin() + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            let v: Vec<f64> = w.iter().map(|x| x * x + rng.sample::<f64, _>(StandardNormal)).collect();
            total += kpc_estimate(&col(&u), &col(&v), &col(&w), &KpcConfig::default()).unwrap();
        }
        assert!(total / reps as f64 <= 0.05, "mean kpc {}", total / reps as f64);
    }

    #[test]
    fn signal_strength_is_monotone() {
        let mut rng = rng_from_seed(6);
        let n = 300;
        let reps = 20;
        let mut means = Vec::new();
        for rho in [0.0, 0.25, 0.5, 0.75, 1.0f64] {
            let mut total = 0.0;
            for _ in 0..reps {
                let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let u: Vec<f64> = v.iter().map(|x| rho.sqrt() * x.tanh() + (1.0 - rho).sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
                total += kpc_estimate(&col(&u), &col(&v), &col(&vec![0.0; n]), &KpcConfig::default()).unwrap();
            }
            means.push(total / reps as f64);
        }
        assert!(means.windows(2).all(|p| p[0] <= p[1]), "{means:?}");
    }

    #[test]
    fn clamp_semantics() {
        let mut rng = rng_from_seed(4);
        let n = 200;
        let mut any_negative = false;
        for _ in 0..5 {
            let u: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let raw = kpc_estimate(&col(&u), &col(&v), &col(&w), &KpcConfig { clamp: false, ..Default::default() }).unwrap();
            let clamped = kpc_estimate(&col(&u), &col(&v), &col(&w), &KpcConfig::default()).unwrap();
            assert!((0.0..=1.0).contains(&clamped));
            if raw < 0.0 {
                any_negative = true;
                assert_eq!(clamped, 0.0);
            }
        }
        assert!(any_negative);
    }

    #[test]
    fn constant_u_is_zero() {
        let r = kpc_estimate(&col(&[1.0; 5]), &col(&[1.0, 2.0, 3.0, 4.0, 5.0]), &col(&[0.0, 1.0, 0.0, 1.0, 0.0]), &KpcConfig::default()).unwrap();
        assert_eq!(r, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn kpc_in_unit_interval_and_reindex_invariant(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let mut rng = rng_from_seed(seed);
            let n = 40;
            let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let u: Vec<f64> = (0..n).map(|i| w[i] + 0.5 * v[i] + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
            let cfg = KpcConfig::default();
            let r = kpc_estimate(&col(&u), &col(&v), &col(&w), &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));

            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            let r2 = kpc_estimate(&col(&u), &col(&scaled), &col(&w), &cfg).unwrap();
            prop_assert!((r - r2).abs() < 1e-12);

            // reversal keeps every distance, so ties resolve the same way up to relabelling
            let idx: Vec<usize> = (0..n).rev().collect();
            let pick = |x: &[f64]| idx.iter().map(|&i| x[i]).collect::<Vec<_>>();
            let r3 = kpc_estimate(&col(&pick(&u)), &col(&pick(&v)), &col(&pick(&w)), &cfg).unwrap();
            prop_assert!((r - r3).abs() < 1e-12);
        }
    }
}
