//! Conditional permutations of the sensitive attributes.
//!
//! Both schemes sample an assignment `s` of items to slots with probability
//! proportional to `exp(sum_i S[i][s(i)])`, where `S` comes from
//! [`ConditionalDensity::assignment_scores`]:
//!
//! * ICP: slots are attribute rows, items are responses (`S[i][j] = log q(y_j | a_i)`).
//!   The copy is `A` reindexed by the inverse of the final assignment.
//! * CP: slots are responses, items are attribute rows (`S[i][j] = log q(a_j | y_i)`).
//!   The copy is `A` reindexed by the assignment itself.
//!
//! In every [`PermutedCopy`], `pi` is the permutation with `a_tilde[k] = a[pi[k]]`.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::{ConditionalDensity, Direction};
use crate::error::{bail, Result};
use crate::linalg::Matrix;
use crate::rng::rng_from_seed;

/// Default number of sweeps for production sampling.
pub const DEFAULT_SWEEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermMethod {
    Icp,
    Cp,
    OracleIcp,
    OracleCp,
    Uniform,
}

impl PermMethod {
    /// ICP or CP layout of the permutation law.
    pub fn is_inverse(self) -> bool {
        matches!(self, PermMethod::Icp | PermMethod::OracleIcp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutedCopy {
    pub pi: Vec<usize>,
    pub a_tilde: Matrix,
    pub method: PermMethod,
    pub sweeps: usize,
}

pub fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&v| v < p.len() && !core::mem::replace(&mut seen[v], true))
}

pub fn invert(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &v) in p.iter().enumerate() {
        inv[v] = i;
    }
    inv
}

/// Probability of a Bernoulli with the given log-odds; infinities are clamped
/// to certain rejection or acceptance.
fn swap_probability(log_odds: f64) -> Result<f64> {
    if log_odds.is_nan() {
        bail!(NonFinite, "swap log-odds is NaN");
    }
    Ok(if log_odds >= 0.0 {
        1.0 / (1.0 + (-log_odds).exp())
    } else {
        let e = log_odds.exp();
        e / (1.0 + e)
    })
}

/// Parallelized pairwise sampler.
///
/// Each of the `sweeps` passes draws `floor(n/2)` disjoint uniformly random
/// pairs `(i, j)` and swaps `state[i]` and `state[j]` with probability
/// `sigmoid(log_odds(i, j, state))`. The log-odds of all pairs in a sweep are
/// evaluated against the state at the start of the sweep; since the pairs are
/// disjoint this equals sequential evaluation.
pub fn pairwise_sample<F>(
    mut log_odds: F,
    n: usize,
    sweeps: usize,
    seed: u64,
    init: Vec<usize>,
) -> Result<Vec<usize>>
where
    F: FnMut(usize, usize, &[usize]) -> f64,
{
    if sweeps == 0 {
        bail!(InvalidArgument, "at least one sweep is required");
    }
    if n < 2 {
        bail!(InvalidArgument, "pairwise sampling needs n >= 2");
    }
    if init.len() != n || !is_bijection(&init) {
        bail!(InvalidArgument, "initial state is not a permutation of 0..{n}");
    }
    let mut rng = rng_from_seed(seed);
    let mut state = init;
    let mut order: Vec<usize> = (0..n).collect();
    let mut accepted = Vec::with_capacity(n / 2);
    for _ in 0..sweeps {
        order.shuffle(&mut rng);
        accepted.clear();
        for pair in order.chunks_exact(2) {
            let (i, j) = (pair[0], pair[1]);
            let p = swap_probability(log_odds(i, j, &state))?;
            let u: f64 = rng.random();
            if u < p {
                accepted.push((i, j));
            }
        }
        for &(i, j) in &accepted {
            state.swap(i, j);
        }
    }
    Ok(state)
}

/// Log-odds of swapping slots `i` and `j` under assignment scores `s`.
#[inline]
pub fn swap_log_odds(s: &Matrix, i: usize, j: usize, state: &[usize]) -> f64 {
    let (si, sj) = (state[i], state[j]);
    s.get(i, sj) + s.get(j, si) - s.get(i, si) - s.get(j, sj)
}

/// Precomputed sampler for repeated draws on fixed `(A, Y)`.
#[derive(Debug, Clone)]
pub struct PermutationSampler {
    method: PermMethod,
    n: usize,
    scores: Option<Matrix>,
}

impl PermutationSampler {
    /// ICP sampler from `q(y | a)`.
    pub fn icp<Q: ConditionalDensity + ?Sized>(q: &Q, a: &Matrix, y: &[f64]) -> Result<Self> {
        Self::with_method(q, a, y, PermMethod::Icp)
    }

    /// CP sampler from `q(a | y)`.
    pub fn cp<Q: ConditionalDensity + ?Sized>(q: &Q, a: &Matrix, y: &[f64]) -> Result<Self> {
        Self::with_method(q, a, y, PermMethod::Cp)
    }

    pub fn with_method<Q: ConditionalDensity + ?Sized>(
        q: &Q,
        a: &Matrix,
        y: &[f64],
        method: PermMethod,
    ) -> Result<Self> {
        if method == PermMethod::Uniform {
            return Ok(Self::uniform(y.len()));
        }
        let want = if method.is_inverse() {
            Direction::YGivenA
        } else {
            Direction::AGivenY
        };
        if q.direction() != want {
            bail!(InvalidArgument, "{method:?} sampling needs a {want:?} density");
        }
        if a.rows() != y.len() {
            bail!(Dimension, "{} attribute rows vs {} responses", a.rows(), y.len());
        }
        let scores = q.assignment_scores(a, y)?;
        if scores.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            bail!(NonFinite, "conditional density produced NaN or +inf");
        }
        Ok(PermutationSampler {
            method,
            n: y.len(),
            scores: Some(scores),
        })
    }

    pub fn uniform(n: usize) -> Self {
        PermutationSampler {
            method: PermMethod::Uniform,
            n,
            scores: None,
        }
    }

    pub fn method(&self) -> PermMethod {
        self.method
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn scores(&self) -> Option<&Matrix> {
        self.scores.as_ref()
    }

    /// One draw of `pi` (with `a_tilde[k] = a[pi[k]]`), starting from the identity.
    pub fn draw_pi(&self, sweeps: usize, seed: u64) -> Result<Vec<usize>> {
        let identity: Vec<usize> = (0..self.n).collect();
        let Some(s) = &self.scores else {
            let mut p = identity;
            p.shuffle(&mut rng_from_seed(seed));
            return Ok(p);
        };
        if self.n < 2 {
            if sweeps == 0 {
                bail!(InvalidArgument, "at least one sweep is required");
            }
            return Ok(identity);
        }
        let state = pairwise_sample(|i, j, st| swap_log_odds(s, i, j, st), self.n, sweeps, seed, identity)?;
        Ok(if self.method.is_inverse() { invert(&state) } else { state })
    }

    pub fn draw(&self, a: &Matrix, sweeps: usize, seed: u64) -> Result<PermutedCopy> {
        if a.rows() != self.n {
            bail!(Dimension, "sampler built for {} rows, got {}", self.n, a.rows());
        }
        let pi = self.draw_pi(sweeps, seed)?;
        Ok(PermutedCopy {
            a_tilde: a.select_rows(&pi),
            pi,
            method: self.method,
            sweeps,
        })
    }
}

/// Inverse conditional permutation copy of `a` from `q(y | a)`.
pub fn sample_icp<Q: ConditionalDensity + ?Sized>(
    q: &Q,
    a: &Matrix,
    y: &[f64],
    sweeps: usize,
    seed: u64,
) -> Result<PermutedCopy> {
    PermutationSampler::icp(q, a, y)?.draw(a, sweeps, seed)
}

/// Conditional permutation copy of `a` from `q(a | y)`.
pub fn sample_cp<Q: ConditionalDensity + ?Sized>(
    q: &Q,
    a: &Matrix,
    y: &[f64],
    sweeps: usize,
    seed: u64,
) -> Result<PermutedCopy> {
    PermutationSampler::cp(q, a, y)?.draw(a, sweeps, seed)
}

fn log_normalize(logw: &[f64]) -> Vec<f64> {
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

fn method_direction(method: PermMethod) -> Result<bool> {
    match method {
        PermMethod::Uniform => bail!(InvalidArgument, "permutation laws need icp or cp"),
        m => Ok(m.is_inverse()),
    }
}

/// Permutation law restricted to the identity and all transpositions.
///
/// Atom 0 is the identity; atom `1 + k` is the `k`-th pair `(i, j)`, `i < j`,
/// in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictedPermLaw {
    pub n: usize,
    pub probs: Vec<f64>,
}

impl RestrictedPermLaw {
    pub fn atom_count(n: usize) -> usize {
        1 + n * n.saturating_sub(1) / 2
    }

    /// Index of the transposition `(i, j)`.
    pub fn atom_index(n: usize, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        1 + i * (2 * n - i - 1) / 2 + (j - i - 1)
    }

    pub fn uniform(n: usize) -> Self {
        let m = Self::atom_count(n);
        RestrictedPermLaw {
            n,
            probs: vec![1.0 / m as f64; m],
        }
    }

    /// Law from precomputed assignment scores. A transposition is its own
    /// inverse, so the ICP and CP layouts coincide here.
    pub fn from_scores(s: &Matrix) -> Self {
        let n = s.rows();
        let mut logw = Vec::with_capacity(Self::atom_count(n));
        logw.push(0.0);
        for i in 0..n {
            for j in i + 1..n {
                logw.push(s.get(i, j) + s.get(j, i) - s.get(i, i) - s.get(j, j));
            }
        }
        RestrictedPermLaw {
            n,
            probs: log_normalize(&logw),
        }
    }
}

pub fn restricted_law<Q: ConditionalDensity + ?Sized>(
    q: &Q,
    a: &Matrix,
    y: &[f64],
    method: PermMethod,
) -> Result<RestrictedPermLaw> {
    if y.len() < 2 {
        bail!(InvalidArgument, "restricted law needs n >= 2");
    }
    method_direction(method)?;
    let sampler = PermutationSampler::with_method(q, a, y, method)?;
    Ok(RestrictedPermLaw::from_scores(sampler.scores().expect("non-uniform sampler has scores")))
}

/// Total-variation distance `0.5 * sum |p1 - p2|` over a shared atom set.
pub fn restricted_tv(law1: &RestrictedPermLaw, law2: &RestrictedPermLaw) -> Result<f64> {
    if law1.probs.len() != law2.probs.len() {
        bail!(Dimension, "atom counts differ: {} vs {}", law1.probs.len(), law2.probs.len());
    }
    let tv = 0.5 * law1.probs.iter().zip(&law2.probs).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(tv.min(1.0))
}

/// Exact permutation law over all of `S_n`, permutations in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct FullPermLaw {
    pub perms: Vec<Vec<usize>>,
    pub probs: Vec<f64>,
}

impl FullPermLaw {
    pub fn index_of(&self, pi: &[usize]) -> Option<usize> {
        self.perms.binary_search_by(|p| p.as_slice().cmp(pi)).ok()
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Brute-force law of `pi` over all `n!` permutations (`n <= 8`).
pub fn enumerate_exact<Q: ConditionalDensity + ?Sized>(
    q: &Q,
    a: &Matrix,
    y: &[f64],
    method: PermMethod,
) -> Result<FullPermLaw> {
    let n = y.len();
    if n > 8 {
        bail!(InvalidArgument, "exact enumeration is limited to n <= 8, got {n}");
    }
    if n == 0 {
        bail!(InvalidArgument, "exact enumeration needs n >= 1");
    }
    let inverse = method_direction(method)?;
    let sampler = PermutationSampler::with_method(q, a, y, method)?;
    let s = sampler.scores().expect("non-uniform sampler has scores");
    let mut perms = Vec::new();
    let mut logw = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        let assignment = if inverse { invert(&p) } else { p.clone() };
        logw.push((0..n).map(|i| s.get(i, assignment[i])).sum::<f64>());
        perms.push(p.clone());
        if !next_permutation(&mut p) {
            break;
        }
    }
    Ok(FullPermLaw {
        perms,
        probs: log_normalize(&logw),
    })
}
