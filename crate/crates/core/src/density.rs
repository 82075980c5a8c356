//! Conditional densities driving the permutation samplers.
//!
//! `q(y | a)` feeds the inverse conditional permutation (ICP) sampler and
//! `q(a | y)` feeds the conditional permutation (CP) sampler. Every model is
//! immutable after fitting and evaluates log-densities only.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{expand_attr_row, expand_attrs, expanded_width, AttrKind, Coding, Dataset, Response, SimSpec, SimVariant, Task};
use crate::error::{bail, Error, Result};
use crate::linalg::{cholesky, floor_eigenvalues, forward_substitute, mean, solve_spd, sym_eigen, Matrix, Standardizer};

/// Residual variance floor.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Smallest eigenvalue allowed in a fitted covariance.
pub const EIGEN_FLOOR: f64 = 1e-8;

const LASSO_TOL: f64 = 1e-8;
const LASSO_MAX_SWEEPS: usize = 10_000;
const LOGISTIC_GRAD_TOL: f64 = 1e-6;
const LOGISTIC_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    YGivenA,
    AGivenY,
}

/// A conditional log-density usable by the permutation samplers.
///
/// Responses are passed as one value per row: the real response for
/// regression, the class index (as `f64`) for classification.
pub trait ConditionalDensity {
    fn direction(&self) -> Direction;

    /// `log q(left | right)`: `(y, a_row)` for `YGivenA`, `(a_row, y)` for `AGivenY`.
    fn log_density(&self, left: &[f64], right: &[f64]) -> Result<f64>;

    /// Log-weight matrix `S` of assigning item `j` to slot `i`.
    ///
    /// For `YGivenA`, `S[i][j] = log q(y_j | a_i)`; for `AGivenY`,
    /// `S[i][j] = log q(a_j | y_i)`. A permutation `s` then has product
    /// log-density `sum_i S[i][s(i)]`.
    fn assignment_scores(&self, a: &Matrix, y: &[f64]) -> Result<Matrix> {
        check_rows(a, y)?;
        let n = y.len();
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v = match self.direction() {
                    Direction::YGivenA => self.log_density(&[y[j]], a.row(i))?,
                    Direction::AGivenY => self.log_density(a.row(j), &[y[i]])?,
                };
                s.set(i, j, v);
            }
        }
        Ok(s)
    }
}

fn check_rows(a: &Matrix, y: &[f64]) -> Result<()> {
    if a.rows() != y.len() {
        bail!(Dimension, "{} attribute rows vs {} responses", a.rows(), y.len());
    }
    Ok(())
}

fn check_scalar(v: &[f64]) -> Result<f64> {
    match v {
        [y] => Ok(*y),
        _ => bail!(Dimension, "expected a single response value, got {}", v.len()),
    }
}

fn gaussian_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var)
}

/// Regularization for `q(y | a)` mean fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "lambda", rename_all = "snake_case")]
pub enum Penalty {
    /// `(lambda / 2) ||beta||^2` added to the half mean squared error.
    Ridge(f64),
    /// `lambda ||beta||_1` added to the half mean squared error.
    Lasso(f64),
}

/// `Y | A = a ~ N(intercept + coef . phi(a), sigma2)` with `phi` the
/// reference-coded attribute expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLinear {
    pub kinds: Vec<AttrKind>,
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub sigma2: f64,
}

impl GaussianLinear {
    pub fn new(kinds: Vec<AttrKind>, intercept: f64, coef: Vec<f64>, sigma2: f64) -> Result<Self> {
        if coef.len() != expanded_width(&kinds, Coding::Reference) {
            bail!(Dimension, "{} coefficients for expanded width {}", coef.len(), expanded_width(&kinds, Coding::Reference));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            bail!(InvalidArgument, "variance must be positive, got {sigma2}");
        }
        Ok(GaussianLinear {
            kinds,
            intercept,
            coef,
            sigma2,
        })
    }

    pub fn mean(&self, a_row: &[f64]) -> Result<f64> {
        if a_row.len() != self.kinds.len() {
            bail!(Dimension, "attribute row has {} entries, model expects {}", a_row.len(), self.kinds.len());
        }
        let mut phi = Vec::with_capacity(self.coef.len());
        expand_attr_row(a_row, &self.kinds, Coding::Reference, &mut phi);
        Ok(self.intercept + self.coef.iter().zip(&phi).map(|(b, x)| b * x).sum::<f64>())
    }
}

impl ConditionalDensity for GaussianLinear {
    fn direction(&self) -> Direction {
        Direction::YGivenA
    }

    fn log_density(&self, left: &[f64], right: &[f64]) -> Result<f64> {
        let y = check_scalar(left)?;
        Ok(gaussian_log_pdf(y, self.mean(right)?, self.sigma2))
    }

    fn assignment_scores(&self, a: &Matrix, y: &[f64]) -> Result<Matrix> {
        check_rows(a, y)?;
        let means = (0..a.rows()).map(|i| self.mean(a.row(i))).collect::<Result<Vec<_>>>()?;
        let n = y.len();
        let c = -0.5 * (2.0 * PI * self.sigma2).ln();
        let mut s = Matrix::zeros(n, n);
        for (i, m) in means.iter().enumerate() {
            for (v, yj) in s.row_mut(i).iter_mut().zip(y) {
                let d = yj - m;
                *v = c - d * d / (2.0 * self.sigma2);
            }
        }
        Ok(s)
    }
}

/// Encoding of the response inside `q(a | y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseCoding {
    Real,
    /// Reference-coded indicators of classes `1..classes`.
    Classes(usize),
}

impl ResponseCoding {
    fn width(&self) -> usize {
        match self {
            ResponseCoding::Real => 1,
            ResponseCoding::Classes(c) => c.saturating_sub(1),
        }
    }

    fn encode(&self, y: f64, out: &mut [f64]) {
        match self {
            ResponseCoding::Real => out[0] = y,
            ResponseCoding::Classes(_) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let k = y as usize;
                if k >= 1 && k - 1 < out.len() {
                    out[k - 1] = 1.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MultivariateParams {
    response: ResponseCoding,
    intercept: Vec<f64>,
    slope: Matrix,
    cov: Matrix,
}

/// `A | Y = y ~ N(intercept + slope z(y), cov)` over all-continuous attributes.
/// The Cholesky factor and log-determinant are cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MultivariateParams", into = "MultivariateParams")]
pub struct GaussianMultivariate {
    response: ResponseCoding,
    intercept: Vec<f64>,
    slope: Matrix,
    cov: Matrix,
    chol: Matrix,
    log_det: f64,
}

impl TryFrom<MultivariateParams> for GaussianMultivariate {
    type Error = Error;

    fn try_from(p: MultivariateParams) -> Result<Self> {
        GaussianMultivariate::new(p.response, p.intercept, p.slope, p.cov)
    }
}

impl From<GaussianMultivariate> for MultivariateParams {
    fn from(g: GaussianMultivariate) -> Self {
        MultivariateParams {
            response: g.response,
            intercept: g.intercept,
            slope: g.slope,
            cov: g.cov,
        }
    }
}

impl GaussianMultivariate {
    pub fn new(response: ResponseCoding, intercept: Vec<f64>, slope: Matrix, cov: Matrix) -> Result<Self> {
        let p = intercept.len();
        if slope.rows() != p || slope.cols() != response.width() {
            bail!(Dimension, "slope must be {}x{}", p, response.width());
        }
        if cov.rows() != p || cov.cols() != p {
            bail!(Dimension, "covariance must be {p}x{p}");
        }
        if !cov.is_symmetric(1e-9 * (1.0 + cov.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))) {
            bail!(InvalidArgument, "covariance must be symmetric");
        }
        let chol = cholesky(&cov)?;
        let log_det = 2.0 * (0..p).map(|i| chol.get(i, i).ln()).sum::<f64>();
        Ok(GaussianMultivariate {
            response,
            intercept,
            slope,
            cov,
            chol,
            log_det,
        })
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn intercept(&self) -> &[f64] {
        &self.intercept
    }

    pub fn slope(&self) -> &Matrix {
        &self.slope
    }

    pub fn dim(&self) -> usize {
        self.intercept.len()
    }

    fn conditional_mean(&self, y: f64) -> Vec<f64> {
        let mut z = vec![0.0; self.response.width()];
        self.response.encode(y, &mut z);
        (0..self.dim())
            .map(|r| self.intercept[r] + self.slope.row(r).iter().zip(&z).map(|(s, v)| s * v).sum::<f64>())
            .collect()
    }

    fn whiten(&self, v: &[f64]) -> Vec<f64> {
        forward_substitute(&self.chol, v)
    }

    fn log_norm(&self) -> f64 {
        -0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.log_det)
    }
}

impl ConditionalDensity for GaussianMultivariate {
    fn direction(&self) -> Direction {
        Direction::AGivenY
    }

    fn log_density(&self, left: &[f64], right: &[f64]) -> Result<f64> {
        let y = check_scalar(right)?;
        if left.len() != self.dim() {
            bail!(Dimension, "attribute row has {} entries, model expects {}", left.len(), self.dim());
        }
        let m = self.conditional_mean(y);
        let d: Vec<f64> = left.iter().zip(&m).map(|(a, b)| a - b).collect();
        let u = self.whiten(&d);
        Ok(self.log_norm() - 0.5 * u.iter().map(|x| x * x).sum::<f64>())
    }

    fn assignment_scores(&self, a: &Matrix, y: &[f64]) -> Result<Matrix> {
        check_rows(a, y)?;
        if a.cols() != self.dim() {
            bail!(Dimension, "attribute matrix has {} columns, model expects {}", a.cols(), self.dim());
        }
        let n = y.len();
        let p = self.dim();
        // ||L^-1 (a_j - c) - L^-1 (G z(y_i))||^2 expanded so each pair costs O(p)
        let mut whitened_a = Matrix::zeros(n, p);
        let mut whitened_m = Matrix::zeros(n, p);
        let mut zero = vec![0.0; p];
        for j in 0..n {
            let d: Vec<f64> = a.row(j).iter().zip(&self.intercept).map(|(x, c)| x - c).collect();
            whitened_a.row_mut(j).copy_from_slice(&self.whiten(&d));
            let m = self.conditional_mean(y[j]);
            for (z, (mv, c)) in zero.iter_mut().zip(m.iter().zip(&self.intercept)) {
                *z = mv - c;
            }
            whitened_m.row_mut(j).copy_from_slice(&self.whiten(&zero));
        }
        let na: Vec<f64> = (0..n).map(|j| whitened_a.row(j).iter().map(|x| x * x).sum()).collect();
        let nm: Vec<f64> = (0..n).map(|i| whitened_m.row(i).iter().map(|x| x * x).sum()).collect();
        let c = self.log_norm();
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            let gi = whitened_m.row(i);
            for j in 0..n {
                let cross: f64 = whitened_a.row(j).iter().zip(gi).map(|(u, g)| u * g).sum();
                let q = (na[j] - 2.0 * cross + nm[i]).max(0.0);
                s.set(i, j, c - 0.5 * q);
            }
        }
        Ok(s)
    }
}

/// Multinomial logistic model of `Y | A` over standardized reference-coded
/// attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultinomialLogistic {
    pub kinds: Vec<AttrKind>,
    pub classes: usize,
    pub scaler: Standardizer,
    /// `classes x (d + 1)`, intercept in the last column.
    pub weights: Matrix,
}

impl MultinomialLogistic {
    fn features(&self, a_row: &[f64]) -> Result<Vec<f64>> {
        if a_row.len() != self.kinds.len() {
            bail!(Dimension, "attribute row has {} entries, model expects {}", a_row.len(), self.kinds.len());
        }
        let mut phi = Vec::with_capacity(self.weights.cols());
        expand_attr_row(a_row, &self.kinds, Coding::Reference, &mut phi);
        for (j, v) in phi.iter_mut().enumerate() {
            *v = (*v - self.scaler.mean[j]) / self.scaler.sd[j];
        }
        phi.push(1.0);
        Ok(phi)
    }

    pub fn log_probs(&self, a_row: &[f64]) -> Result<Vec<f64>> {
        let phi = self.features(a_row)?;
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| self.weights.row(c).iter().zip(&phi).map(|(w, x)| w * x).sum())
            .collect();
        Ok(log_softmax(&logits))
    }

    pub fn probs(&self, a_row: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_probs(a_row)?.into_iter().map(f64::exp).collect())
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn class_index(y: f64, classes: usize) -> Result<usize> {
    if y < 0.0 || y.fract() != 0.0 || y >= classes as f64 {
        bail!(InvalidArgument, "class value {y} outside 0..{classes}");
    }
    Ok(y as usize)
}

impl ConditionalDensity for MultinomialLogistic {
    fn direction(&self) -> Direction {
        Direction::YGivenA
    }

    fn log_density(&self, left: &[f64], right: &[f64]) -> Result<f64> {
        let y = class_index(check_scalar(left)?, self.classes)?;
        Ok(self.log_probs(right)?[y])
    }

    fn assignment_scores(&self, a: &Matrix, y: &[f64]) -> Result<Matrix> {
        check_rows(a, y)?;
        let labels = y.iter().map(|&v| class_index(v, self.classes)).collect::<Result<Vec<_>>>()?;
        let n = y.len();
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            let lp = self.log_probs(a.row(i))?;
            for (v, &l) in s.row_mut(i).iter_mut().zip(&labels) {
                *v = lp[l];
            }
        }
        Ok(s)
    }
}

/// The true generating conditional of a synthetic spec.
///
/// In the `AGivenY` direction the value is `log q(y | a)`, which equals the
/// true `log q(a | y)` up to terms depending on `a` alone or `y` alone. Those
/// terms cancel in every permutation law, so CP with this density samples
/// the exact conditional permutation law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDensity {
    pub spec: SimSpec,
    pub direction: Direction,
}

impl OracleDensity {
    pub fn new(spec: SimSpec, direction: Direction) -> Self {
        OracleDensity { spec, direction }
    }

    /// Closed form of `Y | A` under the generator settings.
    pub fn y_given_a(&self) -> Result<GaussianLinear> {
        let s = &self.spec;
        let p = s.attr_dim();
        let root = s.w.sqrt();
        let s2 = s.sigma * s.sigma;
        let (coef, var) = match s.variant {
            SimVariant::Quality => (
                (0..p).map(|j| if j < s.k0 { root } else { 0.0 }).collect(),
                s2 + (1.0 - s.w) * s.k0 as f64,
            ),
            // Y = sum(X*) + sum(X') + e with X* = sqrt(w) A + sqrt(1-w) z
            SimVariant::Sim1 => (vec![root; p], s.k as f64 * (1.0 - s.w) + s.k as f64 + s2),
            SimVariant::Sim2 => (
                (0..p).map(|j| if j == 0 { root } else { 0.0 }).collect(),
                (1.0 - s.w) + 1.0 + s2,
            ),
        };
        GaussianLinear::new(vec![AttrKind::Continuous; p], 0.0, coef, var)
    }
}

impl ConditionalDensity for OracleDensity {
    fn direction(&self) -> Direction {
        self.direction
    }

    fn log_density(&self, left: &[f64], right: &[f64]) -> Result<f64> {
        let g = self.y_given_a()?;
        match self.direction {
            Direction::YGivenA => g.log_density(left, right),
            Direction::AGivenY => g.log_density(right, left),
        }
    }

    fn assignment_scores(&self, a: &Matrix, y: &[f64]) -> Result<Matrix> {
        let s = self.y_given_a()?.assignment_scores(a, y)?;
        Ok(match self.direction {
            Direction::YGivenA => s,
            Direction::AGivenY => s.transpose(),
        })
    }
}

/// Every supported conditional density, serializable with a `form` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum CondDensity {
    GaussianLinear(GaussianLinear),
    GaussianMultivariate(GaussianMultivariate),
    MultinomialLogistic(MultinomialLogistic),
    Oracle(OracleDensity),
}

impl CondDensity {
    pub fn oracle(spec: SimSpec, direction: Direction) -> Self {
        CondDensity::Oracle(OracleDensity::new(spec, direction))
    }

    fn inner(&self) -> &dyn ConditionalDensity {
        match self {
            CondDensity::GaussianLinear(m) => m,
            CondDensity::GaussianMultivariate(m) => m,
            CondDensity::MultinomialLogistic(m) => m,
            CondDensity::Oracle(m) => m,
        }
    }
}

impl ConditionalDensity for CondDensity {
    fn direction(&self) -> Direction {
        self.inner().direction()
    }

    fn log_density(&self, left: &[f64], right: &[f64]) -> Result<f64> {
        self.inner().log_density(left, right)
    }

    fn assignment_scores(&self, a: &Matrix, y: &[f64]) -> Result<Matrix> {
        self.inner().assignment_scores(a, y)
    }
}

fn regression_response(ds: &Dataset) -> Result<&[f64]> {
    match ds.y() {
        Response::Regression(v) => Ok(v),
        Response::Classification { .. } => bail!(Unsupported, "Gaussian q(y | a) needs a regression response"),
    }
}

fn center_columns(m: &Matrix) -> (Matrix, Vec<f64>) {
    let means: Vec<f64> = (0..m.cols()).map(|j| mean(&m.column(j))).collect();
    let mut c = m.clone();
    for i in 0..c.rows() {
        for (v, mu) in c.row_mut(i).iter_mut().zip(&means) {
            *v -= mu;
        }
    }
    (c, means)
}

/// `lambda = 0.01 * max_j |phi_j^T y| / n` on centered data.
pub fn default_lasso_lambda(ds: &Dataset) -> Result<f64> {
    let y = regression_response(ds)?;
    let (phi, _) = center_columns(&expand_attrs(ds.a(), ds.a_kinds(), Coding::Reference));
    let ybar = mean(y);
    let n = ds.n() as f64;
    let m = (0..phi.cols())
        .map(|j| (0..phi.rows()).map(|i| phi.get(i, j) * (y[i] - ybar)).sum::<f64>().abs())
        .fold(0.0, f64::max);
    Ok(0.01 * m / n)
}

/// Ridge solution of `(Xc^T Xc + n lambda I) beta = Xc^T yc`.
fn ridge_solve(xc: &Matrix, yc: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let (n, d) = (xc.rows(), xc.cols());
    if d == 0 {
        return Ok(Vec::new());
    }
    if lambda == 0.0 && n <= d {
        bail!(Singular, "{n} rows cannot identify {d} unpenalized coefficients");
    }
    let mut gram = Matrix::zeros(d, d);
    let mut rhs = vec![0.0; d];
    for i in 0..n {
        let r = xc.row(i);
        for j in 0..d {
            rhs[j] += r[j] * yc[i];
            for k in 0..=j {
                gram.set(j, k, gram.get(j, k) + r[j] * r[k]);
            }
        }
    }
    for j in 0..d {
        for k in 0..j {
            gram.set(k, j, gram.get(j, k));
        }
        gram.set(j, j, gram.get(j, j) + n as f64 * lambda);
    }
    solve_spd(&gram, &rhs).map_err(|_| Error::Singular(format!("normal equations are singular (lambda = {lambda})")))
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for `(1/2n)||yc - Xc beta||^2 + lambda ||beta||_1`.
pub(crate) fn lasso_cd(xc: &Matrix, yc: &[f64], lambda: f64) -> Vec<f64> {
    let (n, d) = (xc.rows(), xc.cols());
    let nf = n as f64;
    let cols: Vec<Vec<f64>> = (0..d).map(|j| xc.column(j)).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / nf).collect();
    let mut beta = vec![0.0; d];
    let mut resid = yc.to_vec();
    for _ in 0..LASSO_MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for j in 0..d {
            if norms[j] == 0.0 {
                continue;
            }
            let col = &cols[j];
            let rho = col.iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() / nf + norms[j] * beta[j];
            let new = soft_threshold(rho, lambda) / norms[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                for (r, x) in resid.iter_mut().zip(col) {
                    *r -= delta * x;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < LASSO_TOL {
            break;
        }
    }
    beta
}

/// Gaussian linear `q(y | a)` with ridge or lasso mean and residual variance.
pub fn fit_y_given_a(train: &Dataset, penalty: Penalty) -> Result<GaussianLinear> {
    let y = regression_response(train)?;
    let n = train.n();
    if n < 2 {
        bail!(InvalidArgument, "need at least two rows to fit q(y | a)");
    }
    let phi = expand_attrs(train.a(), train.a_kinds(), Coding::Reference);
    let (xc, means) = center_columns(&phi);
    let ybar = mean(y);
    let yc: Vec<f64> = y.iter().map(|v| v - ybar).collect();
    let coef = match penalty {
        Penalty::Ridge(l) | Penalty::Lasso(l) if !(l >= 0.0 && l.is_finite()) => {
            bail!(InvalidArgument, "penalty must be finite and non-negative, got {l}")
        }
        Penalty::Ridge(l) => ridge_solve(&xc, &yc, l)?,
        Penalty::Lasso(0.0) => ridge_solve(&xc, &yc, 0.0)?,
        Penalty::Lasso(l) => lasso_cd(&xc, &yc, l),
    };
    let intercept = ybar - coef.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
    let sse: f64 = (0..n)
        .map(|i| {
            let r = yc[i] - xc.row(i).iter().zip(&coef).map(|(x, b)| x * b).sum::<f64>();
            r * r
        })
        .sum();
    let sigma2 = (sse / n as f64).max(VARIANCE_FLOOR);
    GaussianLinear::new(train.a_kinds().to_vec(), intercept, coef, sigma2)
}

/// Gaussian `q(a | y)` with per-coordinate linear means and residual
/// covariance shrunk toward its diagonal.
pub fn fit_a_given_y(train: &Dataset, shrinkage: f64) -> Result<GaussianMultivariate> {
    if !(0.0..=1.0).contains(&shrinkage) {
        bail!(InvalidArgument, "shrinkage must be in [0, 1], got {shrinkage}");
    }
    if !train.all_continuous_attrs() {
        bail!(Unsupported, "q(a | y) supports continuous attributes only");
    }
    let n = train.n();
    if n < 2 {
        bail!(InvalidArgument, "need at least two rows to fit q(a | y)");
    }
    let response = match train.task() {
        Task::Regression => ResponseCoding::Real,
        Task::Classification { classes } => ResponseCoding::Classes(classes),
    };
    let yv = train.y().values();
    let mut z = Matrix::zeros(n, response.width());
    for i in 0..n {
        response.encode(yv[i], z.row_mut(i));
    }
    let (zc, zmeans) = center_columns(&z);
    let (ac, ameans) = center_columns(train.a());
    let p = ac.cols();
    let q = zc.cols();
    let mut slope = Matrix::zeros(p, q);
    for j in 0..p {
        let g = ridge_solve(&zc, &ac.column(j), 0.0)
            .map_err(|_| Error::Singular("response has no variation".into()))?;
        slope.row_mut(j).copy_from_slice(&g);
    }
    let intercept: Vec<f64> = (0..p)
        .map(|j| ameans[j] - slope.row(j).iter().zip(&zmeans).map(|(g, m)| g * m).sum::<f64>())
        .collect();
    let mut resid = ac.clone();
    for i in 0..n {
        let zi = zc.row(i).to_vec();
        for (j, r) in resid.row_mut(i).iter_mut().enumerate() {
            *r -= slope.row(j).iter().zip(&zi).map(|(g, v)| g * v).sum::<f64>();
        }
    }
    let mut s = resid.transpose().matmul(&resid)?;
    for v in s.data_mut() {
        *v /= n as f64;
    }
    for i in 0..p {
        for j in 0..p {
            if i != j {
                s.set(i, j, (1.0 - shrinkage) * s.get(i, j));
            }
        }
    }
    let cov = floor_eigenvalues(&s, EIGEN_FLOOR)?;
    GaussianMultivariate::new(response, intercept, slope, cov)
}

/// Multinomial logistic `q(y | a)` by full-batch gradient descent on the mean
/// cross-entropy plus `lambda ||W||^2` (intercepts unpenalized).
pub fn fit_y_given_a_classifier(train: &Dataset, lambda: f64) -> Result<MultinomialLogistic> {
    let (labels, classes) = match train.y() {
        Response::Classification { labels, classes } => (labels, *classes),
        Response::Regression(_) => bail!(Unsupported, "classifier needs a classification response"),
    };
    if !(lambda >= 0.0 && lambda.is_finite()) {
        bail!(InvalidArgument, "lambda must be finite and non-negative");
    }
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&l| seen[l] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        bail!(InvalidData, "training response has a single class");
    }
    let phi = expand_attrs(train.a(), train.a_kinds(), Coding::Reference);
    let scaler = Standardizer::fit(&phi, 1e-8);
    let x = scaler.apply(&phi).hcat(&Matrix::from_vec(phi.rows(), 1, vec![1.0; phi.rows()])?)?;
    let (n, d1) = (x.rows(), x.cols());
    let nf = n as f64;

    let gram = x.transpose().matmul(&x)?;
    let (eig, _) = sym_eigen(&gram)?;
    let lipschitz = 0.5 * eig.last().copied().unwrap_or(1.0) / nf + 2.0 * lambda;
    let step = 1.0 / lipschitz.max(1e-12);

    let mut w = Matrix::zeros(classes, d1);
    let mut grad = Matrix::zeros(classes, d1);
    let mut logits = vec![0.0; classes];
    for _ in 0..LOGISTIC_MAX_ITERS {
        grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let xi = x.row(i);
            for (c, z) in logits.iter_mut().enumerate() {
                *z = w.row(c).iter().zip(xi).map(|(a, b)| a * b).sum();
            }
            let lp = log_softmax(&logits);
            for c in 0..classes {
                let r = lp[c].exp() - if labels[i] == c { 1.0 } else { 0.0 };
                for (g, xv) in grad.row_mut(c).iter_mut().zip(xi) {
                    *g += r * xv / nf;
                }
            }
        }
        for c in 0..classes {
            for j in 0..d1 - 1 {
                let g = grad.get(c, j) + 2.0 * lambda * w.get(c, j);
                grad.set(c, j, g);
            }
        }
        let norm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            bail!(NonFinite, "logistic gradient diverged");
        }
        if norm < LOGISTIC_GRAD_TOL {
            break;
        }
        for (wv, g) in w.data_mut().iter_mut().zip(grad.data()) {
            *wv -= step * g;
        }
    }
    Ok(MultinomialLogistic {
        kinds: train.a_kinds().to_vec(),
        classes,
        scaler,
        weights: w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_mixed_gamma_attrs, gen_quality, gen_quality_response, SimVariant};
    use crate::linalg::variance;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn regression(a: Matrix, kinds: Vec<AttrKind>, y: Vec<f64>) -> Dataset {
        Dataset::unnamed(Matrix::zeros(y.len(), 0), a, kinds, Response::Regression(y)).unwrap()
    }

    fn classification(a: Matrix, kinds: Vec<AttrKind>, labels: Vec<usize>, classes: usize) -> Dataset {
        Dataset::unnamed(Matrix::zeros(labels.len(), 0), a, kinds, Response::Classification { labels, classes }).unwrap()
    }

    #[test]
    fn ols_recovers_quality_slope() {
        let spec = SimSpec::new(SimVariant::Quality, 10_000, 1, 0, 0.6, 17);
        let ds = gen_quality(&spec).unwrap();
        let m = fit_y_given_a(&ds, Penalty::Lasso(0.0)).unwrap();
        // s.e. of the OLS slope: sqrt(sigma_e^2 / (n var(a)))
        let va = variance(&ds.a().column(0));
        let se = (1.4 / (ds.n() as f64 * va)).sqrt();
        assert!((m.coef[0] - 0.6f64.sqrt()).abs() < 2.0 * se, "slope {}", m.coef[0]);
    }

    #[test]
    fn constant_column_is_inert_under_ridge() {
        let mut rng = rng_from_seed(4);
        let n = 50;
        let a1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = a1.iter().map(|v| 2.0 * v + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let with = regression(
            Matrix::from_vec(n, 2, a1.iter().flat_map(|v| [*v, 3.0]).collect()).unwrap(),
            vec![AttrKind::Continuous; 2],
            y.clone(),
        );
        let without = regression(Matrix::column_vector(&a1), vec![AttrKind::Continuous], y.clone());
        let m1 = fit_y_given_a(&with, Penalty::Ridge(1e-3)).unwrap();
        let m2 = fit_y_given_a(&without, Penalty::Ridge(1e-3)).unwrap();
        assert!(m1.coef[1].is_finite());
        for i in 0..n {
            let l1 = m1.log_density(&[y[i]], &[a1[i], 3.0]).unwrap();
            let l2 = m2.log_density(&[y[i]], &[a1[i]]).unwrap();
            assert!((l1 - l2).abs() < 1e-6);
        }
    }

    #[test]
    fn large_lasso_penalty_gives_marginal_model() {
        let spec = SimSpec::new(SimVariant::Quality, 300, 2, 3, 0.6, 1);
        let ds = gen_quality(&spec).unwrap();
        let m = fit_y_given_a(&ds, Penalty::Lasso(1e6)).unwrap();
        assert!(m.coef.iter().all(|&b| b == 0.0));
        let y = ds.y().values();
        assert!((m.intercept - mean(&y)).abs() < 1e-10);
        assert!((m.sigma2 - variance(&y)).abs() < 1e-8 * variance(&y));
    }

    #[test]
    fn lasso_satisfies_kkt() {
        let spec = SimSpec::new(SimVariant::Quality, 200, 3, 7, 0.6, 5);
        let ds = gen_quality(&spec).unwrap();
        let lambda = 5.0 * default_lasso_lambda(&ds).unwrap();
        let m = fit_y_given_a(&ds, Penalty::Lasso(lambda)).unwrap();
        let y = ds.y().values();
        let a = ds.a();
        let n = ds.n() as f64;
        let resid: Vec<f64> = (0..ds.n()).map(|i| y[i] - m.mean(a.row(i)).unwrap()).collect();
        for j in 0..a.cols() {
            let col = a.column(j);
            let cm = mean(&col);
            let g: f64 = col.iter().zip(&resid).map(|(x, r)| (x - cm) * r).sum::<f64>() / n;
            if m.coef[j] != 0.0 {
                assert!((g - lambda * m.coef[j].signum()).abs() < 1e-6, "active {j}: {g}");
            } else {
                assert!(g.abs() <= lambda + 1e-6, "inactive {j}: {g}");
            }
        }
    }

    #[test]
    fn ridge_path_tends_to_ols() {
        let spec = SimSpec::new(SimVariant::Quality, 500, 2, 2, 0.6, 6);
        let ds = gen_quality(&spec).unwrap();
        let ols = fit_y_given_a(&ds, Penalty::Ridge(0.0)).unwrap();
        let r = fit_y_given_a(&ds, Penalty::Ridge(1e-10)).unwrap();
        let d: f64 = ols.coef.iter().zip(&r.coef).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(d <= 1e-4);
    }

    #[test]
    fn singular_and_wrong_task_errors() {
        let ds = regression(
            Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0]).unwrap(),
            vec![AttrKind::Continuous; 3],
            vec![0.0, 1.0],
        );
        assert!(matches!(fit_y_given_a(&ds, Penalty::Ridge(0.0)), Err(Error::Singular(_))));
        let cls = classification(Matrix::column_vector(&[0.0, 1.0]), vec![AttrKind::Continuous], vec![0, 1], 2);
        assert!(fit_y_given_a(&cls, Penalty::Ridge(0.1)).is_err());
    }

    #[test]
    fn gaussian_mode_log_density() {
        let m = GaussianLinear::new(vec![AttrKind::Continuous], 1.0, vec![2.0], 0.7).unwrap();
        let v = m.log_density(&[1.0 + 2.0 * 3.0], &[3.0]).unwrap();
        assert!((v + 0.5 * (2.0 * PI * 0.7).ln()).abs() < 1e-14);
        assert!(m.log_density(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        let m = GaussianLinear::new(vec![AttrKind::Continuous], 0.5, vec![1.0], 2.0).unwrap();
        let sd = 2f64.sqrt();
        let (lo, hi, steps) = (1.5 - 10.0 * sd, 1.5 + 10.0 * sd, 20_000);
        let h = (hi - lo) / steps as f64;
        // composite Simpson
        let mut s = 0.0;
        for k in 0..=steps {
            let y = lo + k as f64 * h;
            let w = if k == 0 || k == steps { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * m.log_density(&[y], &[1.0]).unwrap().exp();
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn oracle_matches_hand_computed_normal() {
        let mut spec = SimSpec::new(SimVariant::Quality, 10, 5, 0, 0.6, 1);
        spec.sigma = 1.0;
        let q = OracleDensity::new(spec, Direction::YGivenA);
        let a = [1.0, 2.0, 0.5, 0.0, 3.0];
        let y = 4.0;
        let mu = 0.6f64.sqrt() * 6.5;
        let var = 3.0;
        let want = -0.5 * (2.0 * PI * var).ln() - (y - mu) * (y - mu) / (2.0 * var);
        assert!((q.log_density(&[y], &a).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn oracle_average_log_density_is_negative_entropy() {
        let spec = SimSpec::new(SimVariant::Quality, 20_000, 2, 1, 0.6, 3);
        let a = gen_mixed_gamma_attrs(spec.n, 2, 1, None, 4).unwrap();
        let y = gen_quality_response(&a, &spec).unwrap();
        let q = OracleDensity::new(spec.clone(), Direction::YGivenA);
        let vals: Vec<f64> = (0..spec.n).map(|i| q.log_density(&[y[i]], a.row(i)).unwrap()).collect();
        let var = 1.0 + 0.4 * 2.0;
        let neg_entropy = -0.5 * (2.0 * PI * core::f64::consts::E * var).ln();
        // log-density of a normal draw has variance 1/2
        let se = (0.5 / spec.n as f64).sqrt();
        assert!((mean(&vals) - neg_entropy).abs() < 4.0 * se);
    }

    #[test]
    fn multivariate_identity_at_mean() {
        let g = GaussianMultivariate::new(
            ResponseCoding::Real,
            vec![0.0; 3],
            Matrix::from_vec(3, 1, vec![1.0, 0.0, -1.0]).unwrap(),
            Matrix::identity(3),
        )
        .unwrap();
        let v = g.log_density(&[2.0, 0.0, -2.0], &[2.0]).unwrap();
        assert!((v + 1.5 * (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn univariate_cp_fit_uses_empirical_residual_variance() {
        let spec = SimSpec::new(SimVariant::Quality, 400, 1, 0, 0.6, 9);
        let ds = gen_quality(&spec).unwrap();
        let g = fit_a_given_y(&ds, 0.0).unwrap();
        let a = ds.a().column(0);
        let y = ds.y().values();
        let (ma, my) = (mean(&a), mean(&y));
        let sxy: f64 = a.iter().zip(&y).map(|(p, q)| (p - ma) * (q - my)).sum::<f64>() / 400.0;
        let gamma = sxy / variance(&y);
        let resid_var = variance(&a) - gamma * sxy;
        assert!((g.slope().get(0, 0) - gamma).abs() < 1e-10);
        assert!((g.cov().get(0, 0) - resid_var).abs() < 1e-8 * resid_var);
    }

    #[test]
    fn full_shrinkage_factorizes() {
        let spec = SimSpec::new(SimVariant::Quality, 300, 2, 2, 0.6, 10);
        let ds = gen_quality(&spec).unwrap();
        let g = fit_a_given_y(&ds, 1.0).unwrap();
        let y = ds.y().values();
        for i in 0..10 {
            let a = ds.a().row(i);
            let joint = g.log_density(a, &[y[i]]).unwrap();
            let mut sum = 0.0;
            for j in 0..4 {
                let m = g.intercept()[j] + g.slope().get(j, 0) * y[i];
                sum += gaussian_log_pdf(a[j], m, g.cov().get(j, j));
            }
            assert!((joint - sum).abs() < 1e-10);
        }
    }

    #[test]
    fn high_dimensional_cp_fit_is_positive_definite() {
        let mut spec = SimSpec::new(SimVariant::Quality, 200, 5, 20, 0.6, 12);
        spec.cov_sqrt = Some(crate::data::equal_spaced_cov_sqrt(25, 3));
        let ds = gen_quality(&spec).unwrap();
        let g = fit_a_given_y(&ds, 0.0).unwrap();
        let (vals, _) = sym_eigen(g.cov()).unwrap();
        assert!(vals[0] >= EIGEN_FLOOR * (1.0 - 1e-6));
        let cat = Dataset::unnamed(
            Matrix::zeros(2, 0),
            Matrix::column_vector(&[0.0, 1.0]),
            vec![AttrKind::Categorical { levels: 2 }],
            Response::Regression(vec![0.0, 1.0]),
        )
        .unwrap();
        assert!(matches!(fit_a_given_y(&cat, 0.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn assignment_scores_agree_with_pointwise_evaluation() {
        let mut spec = SimSpec::new(SimVariant::Quality, 12, 2, 2, 0.6, 2);
        spec.cov_sqrt = Some(crate::data::equal_spaced_cov_sqrt(4, 3));
        let ds = gen_quality(&spec).unwrap();
        let y = ds.y().values();
        let g = fit_a_given_y(&ds, 0.3).unwrap();
        let s = g.assignment_scores(ds.a(), &y).unwrap();
        let l = fit_y_given_a(&ds, Penalty::Ridge(0.1)).unwrap();
        let t = l.assignment_scores(ds.a(), &y).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let want = g.log_density(ds.a().row(j), &[y[i]]).unwrap();
                assert!((s.get(i, j) - want).abs() < 1e-9 * (1.0 + want.abs()));
                let want = l.log_density(&[y[j]], ds.a().row(i)).unwrap();
                assert!((t.get(i, j) - want).abs() < 1e-12 * (1.0 + want.abs()));
            }
        }
    }

    /// Penalized fit on x = +-1 with symmetric class weights `+-v`:
    /// stationarity of `log(1 + e^{-2v}) + 2 lambda v^2` gives
    /// `1 / (1 + e^{2v}) = 2 lambda v`, solved here by bisection.
    fn separable_oracle_probability(lambda: f64) -> f64 {
        let f = |v: f64| 1.0 / (1.0 + (2.0 * v).exp()) - 2.0 * lambda * v;
        let (mut lo, mut hi) = (0.0, 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let v = 0.5 * (lo + hi);
        1.0 / (1.0 + (-2.0 * v).exp())
    }

    #[test]
    fn separable_binary_classifier() {
        let n = 200;
        let codes: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let ds = classification(Matrix::column_vector(&codes), vec![AttrKind::Categorical { levels: 2 }], labels, 2);
        let m = fit_y_given_a_classifier(&ds, 1e-2).unwrap();
        let want = separable_oracle_probability(1e-2);
        let p0 = m.probs(&[0.0]).unwrap()[0];
        let p1 = m.probs(&[1.0]).unwrap()[1];
        assert!(p0 >= 0.9 && p1 >= 0.9);
        assert!((p0 - want).abs() < 1e-4 && (p1 - want).abs() < 1e-4, "{p0} {p1} vs {want}");
    }

    #[test]
    fn null_classifier_matches_frequencies() {
        let n = 10_000;
        let mut rng = rng_from_seed(21);
        let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let labels: Vec<usize> = (0..n).map(|_| if rng.random::<f64>() < 0.3 { 1 } else { 0 }).collect();
        let freq = labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
        let ds = classification(Matrix::column_vector(&a), vec![AttrKind::Continuous], labels, 2);
        let m = fit_y_given_a_classifier(&ds, 1e-3).unwrap();
        for v in [-2.0, 0.0, 2.0] {
            assert!((m.probs(&[v]).unwrap()[1] - freq).abs() < 0.02);
        }
    }

    #[test]
    fn three_class_probabilities_normalize() {
        let mut rng = rng_from_seed(5);
        let n = 300;
        let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let labels: Vec<usize> = a.iter().map(|v| if *v < -0.5 { 0 } else if *v < 0.5 { 1 } else { 2 }).collect();
        let ds = classification(Matrix::column_vector(&a), vec![AttrKind::Continuous], labels, 3);
        let m = fit_y_given_a_classifier(&ds, 1e-2).unwrap();
        for _ in 0..100 {
            let v: f64 = 3.0 * rng.sample::<f64, _>(StandardNormal);
            let s: f64 = m.probs(&[v]).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
        let single = classification(Matrix::column_vector(&[0.0, 1.0]), vec![AttrKind::Continuous], vec![1, 1], 2);
        assert!(fit_y_given_a_classifier(&single, 0.1).is_err());
    }
}
