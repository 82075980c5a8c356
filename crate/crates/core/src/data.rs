//! Datasets, attribute encodings, synthetic generators and train/test splits.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::linalg::{linspace, random_orthogonal, recompose, sym_eigen, Matrix};
use crate::rng::{derive_seed, rng_from_seed};

/// Kind of one sensitive-attribute column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttrKind {
    Continuous,
    /// Integer codes `0..levels`.
    Categorical { levels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    Regression(Vec<f64>),
    Classification { labels: Vec<usize>, classes: usize },
}

impl Response {
    pub fn len(&self) -> usize {
        match self {
            Response::Regression(v) => v.len(),
            Response::Classification { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Response::Regression(_) => Task::Regression,
            Response::Classification { classes, .. } => Task::Classification { classes: *classes },
        }
    }

    /// Real value for regression, class index for classification.
    pub fn values(&self) -> Vec<f64> {
        match self {
            Response::Regression(v) => v.clone(),
            Response::Classification { labels, .. } => labels.iter().map(|&l| l as f64).collect(),
        }
    }

    /// Raw real column (regression) or one-hot rows (classification).
    pub fn encoding(&self) -> Matrix {
        match self {
            Response::Regression(v) => Matrix::column_vector(v),
            Response::Classification { labels, classes } => {
                let mut m = Matrix::zeros(labels.len(), *classes);
                for (i, &l) in labels.iter().enumerate() {
                    m.set(i, l, 1.0);
                }
                m
            }
        }
    }

    pub fn select(&self, idx: &[usize]) -> Response {
        match self {
            Response::Regression(v) => Response::Regression(idx.iter().map(|&i| v[i]).collect()),
            Response::Classification { labels, classes } => Response::Classification {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        }
    }
}

/// How categorical attributes expand into numeric columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coding {
    /// `levels - 1` indicators, first level as reference. Used by regressions
    /// with an intercept.
    Reference,
    /// One indicator per level. Used wherever distances between rows matter.
    Full,
}

pub fn expanded_width(kinds: &[AttrKind], coding: Coding) -> usize {
    kinds
        .iter()
        .map(|k| match (k, coding) {
            (AttrKind::Continuous, _) => 1,
            (AttrKind::Categorical { levels }, Coding::Reference) => levels.saturating_sub(1),
            (AttrKind::Categorical { levels }, Coding::Full) => *levels,
        })
        .sum()
}

/// Appends the expansion of one attribute row to `out`.
pub fn expand_attr_row(row: &[f64], kinds: &[AttrKind], coding: Coding, out: &mut Vec<f64>) {
    for (v, kind) in row.iter().zip(kinds) {
        match kind {
            AttrKind::Continuous => out.push(*v),
            AttrKind::Categorical { levels } => {
                let code = *v as usize;
                let (start, width) = match coding {
                    Coding::Reference => (1, levels.saturating_sub(1)),
                    Coding::Full => (0, *levels),
                };
                for level in start..start + width {
                    out.push(if level == code { 1.0 } else { 0.0 });
                }
            }
        }
    }
}

pub fn expand_attrs(a: &Matrix, kinds: &[AttrKind], coding: Coding) -> Matrix {
    let width = expanded_width(kinds, coding);
    let mut data = Vec::with_capacity(a.rows() * width);
    for i in 0..a.rows() {
        expand_attr_row(a.row(i), kinds, coding, &mut data);
    }
    Matrix::from_vec(a.rows(), width, data).expect("expansion width is consistent")
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ColumnNames {
    pub x: Vec<String>,
    pub a: Vec<String>,
    pub y: String,
}

impl ColumnNames {
    pub fn generated(dx: usize, p: usize) -> Self {
        ColumnNames {
            x: (1..=dx).map(|j| format!("x{j}")).collect(),
            a: (1..=p).map(|j| format!("a{j}")).collect(),
            y: String::from("y"),
        }
    }
}

/// Features `X`, sensitive attributes `A` and response `Y` for `n` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: Matrix,
    a: Matrix,
    a_kinds: Vec<AttrKind>,
    y: Response,
    names: ColumnNames,
}

impl Dataset {
    pub fn new(
        x: Matrix,
        a: Matrix,
        a_kinds: Vec<AttrKind>,
        y: Response,
        names: ColumnNames,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            bail!(InvalidData, "dataset must have at least one row");
        }
        if x.rows() != n || a.rows() != n {
            bail!(
                Dimension,
                "row counts differ: X has {}, A has {}, Y has {}",
                x.rows(),
                a.rows(),
                n
            );
        }
        if a_kinds.len() != a.cols() {
            bail!(Dimension, "{} attribute kinds for {} columns", a_kinds.len(), a.cols());
        }
        if names.x.len() != x.cols() || names.a.len() != a.cols() {
            bail!(Dimension, "column names do not match block widths");
        }
        if !x.is_finite() || !a.is_finite() {
            bail!(InvalidData, "non-finite feature or attribute value");
        }
        for i in 0..n {
            for (j, kind) in a_kinds.iter().enumerate() {
                if let AttrKind::Categorical { levels } = kind {
                    let v = a.get(i, j);
                    if v < 0.0 || v.fract() != 0.0 || v >= *levels as f64 {
                        bail!(
                            InvalidData,
                            "row {i}, attribute {j}: code {v} outside 0..{levels}"
                        );
                    }
                }
            }
        }
        match &y {
            Response::Regression(v) => {
                if v.iter().any(|x| !x.is_finite()) {
                    bail!(InvalidData, "non-finite response value");
                }
            }
            Response::Classification { labels, classes } => {
                if let Some(i) = labels.iter().position(|&l| l >= *classes) {
                    bail!(InvalidData, "row {i}: class label outside 0..{classes}");
                }
            }
        }
        Ok(Dataset {
            x,
            a,
            a_kinds,
            y,
            names,
        })
    }

    /// Dataset with generated column names.
    pub fn unnamed(x: Matrix, a: Matrix, a_kinds: Vec<AttrKind>, y: Response) -> Result<Self> {
        let names = ColumnNames::generated(x.cols(), a.cols());
        Dataset::new(x, a, a_kinds, y, names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn a_kinds(&self) -> &[AttrKind] {
        &self.a_kinds
    }

    pub fn y(&self) -> &Response {
        &self.y
    }

    pub fn names(&self) -> &ColumnNames {
        &self.names
    }

    pub fn task(&self) -> Task {
        self.y.task()
    }

    pub fn all_continuous_attrs(&self) -> bool {
        self.a_kinds.iter().all(|k| *k == AttrKind::Continuous)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            a: self.a.select_rows(idx),
            a_kinds: self.a_kinds.clone(),
            y: self.y.select(idx),
            names: self.names.clone(),
        }
    }

    /// Same rows restricted to the attribute columns `cols`.
    pub fn select_attrs(&self, cols: &[usize]) -> Result<Dataset> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.a.cols()) {
            bail!(Dimension, "attribute column {c} out of range");
        }
        Ok(Dataset {
            x: self.x.clone(),
            a: self.a.select_cols(cols),
            a_kinds: cols.iter().map(|&c| self.a_kinds[c]).collect(),
            y: self.y.clone(),
            names: ColumnNames {
                x: self.names.x.clone(),
                a: cols.iter().map(|&c| self.names.a[c].clone()).collect(),
                y: self.names.y.clone(),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimVariant {
    /// Mixed-Gamma attributes with a Gaussian response on the first `k0`
    /// coordinates; used by the sampler-quality study.
    Quality,
    /// `X*` of width `k` driven by all `k` attributes plus `k` pure-noise features.
    Sim1,
    /// Scalar `X*` driven by the first of `k + 1` attributes.
    Sim2,
}

/// Parameters of a synthetic generator. Generation is a pure function of
/// this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub variant: SimVariant,
    pub n: usize,
    pub k0: usize,
    pub k: usize,
    pub w: f64,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov_sqrt: Option<Matrix>,
    pub seed: u64,
}

impl SimSpec {
    pub fn new(variant: SimVariant, n: usize, k0: usize, k: usize, w: f64, seed: u64) -> Self {
        SimSpec {
            variant,
            n,
            k0,
            k,
            w,
            sigma: 1.0,
            cov_sqrt: None,
            seed,
        }
    }

    /// Number of attribute columns the variant produces.
    pub fn attr_dim(&self) -> usize {
        match self.variant {
            SimVariant::Quality => self.k0 + self.k,
            SimVariant::Sim1 => self.k,
            SimVariant::Sim2 => self.k + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            bail!(InvalidArgument, "w = {} outside [0, 1]", self.w);
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            bail!(InvalidArgument, "sigma must be positive, got {}", self.sigma);
        }
        if self.n == 0 {
            bail!(InvalidArgument, "n must be positive");
        }
        if self.variant == SimVariant::Sim1 && self.k == 0 {
            bail!(InvalidArgument, "sim1 needs k >= 1");
        }
        if self.variant == SimVariant::Quality && self.k0 + self.k == 0 {
            bail!(InvalidArgument, "quality spec needs at least one attribute");
        }
        if let Some(c) = &self.cov_sqrt {
            let p = self.attr_dim();
            if c.rows() != p || c.cols() != p {
                bail!(Dimension, "cov_sqrt is {}x{}, expected {p}x{p}", c.rows(), c.cols());
            }
            if !c.is_symmetric(1e-9) {
                bail!(InvalidArgument, "cov_sqrt must be symmetric");
            }
            let (vals, _) = sym_eigen(c)?;
            if vals[0] <= 0.0 {
                bail!(InvalidArgument, "cov_sqrt must have positive eigenvalues");
            }
        }
        Ok(())
    }
}

/// `Q diag(linspace(1, 5, p)) Q^T` with `Q` a seeded random orthogonal basis.
pub fn equal_spaced_cov_sqrt(p: usize, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    let q = random_orthogonal(p, &mut rng);
    recompose(&linspace(1.0, 5.0, p), &q)
}

fn mixed_gamma_draw<R: Rng + ?Sized>(rng: &mut R, unit: &Gamma<f64>, wide: &Gamma<f64>) -> f64 {
    if rng.random::<bool>() {
        unit.sample(rng)
    } else {
        wide.sample(rng)
    }
}

/// `n x (k0 + k)` attributes: i.i.d. draws from the equal mixture of
/// Gamma(shape 1, scale 1) and Gamma(shape 1, scale 10), right-multiplied by
/// `cov_sqrt` when given.
pub fn gen_mixed_gamma_attrs(
    n: usize,
    k0: usize,
    k: usize,
    cov_sqrt: Option<&Matrix>,
    seed: u64,
) -> Result<Matrix> {
    if n == 0 {
        bail!(InvalidArgument, "n must be positive");
    }
    let p = k0 + k;
    if let Some(c) = cov_sqrt {
        if c.rows() != p || c.cols() != p {
            bail!(Dimension, "cov_sqrt is {}x{}, expected {p}x{p}", c.rows(), c.cols());
        }
    }
    let unit = Gamma::new(1.0, 1.0).expect("valid gamma");
    let wide = Gamma::new(1.0, 10.0).expect("valid gamma");
    let mut rng = rng_from_seed(seed);
    let mut u = Matrix::zeros(n, p);
    for v in u.data_mut() {
        *v = mixed_gamma_draw(&mut rng, &unit, &wide);
    }
    match cov_sqrt {
        Some(c) => u.matmul(c),
        None => Ok(u),
    }
}

/// Response of the sampler-quality spec:
/// `Y ~ N(sqrt(w) * sum_{j < k0} A_j, sigma^2 + (1 - w) k0)`.
pub fn gen_quality_response(a: &Matrix, spec: &SimSpec) -> Result<Vec<f64>> {
    if spec.k0 > a.cols() {
        bail!(Dimension, "k0 = {} exceeds {} attribute columns", spec.k0, a.cols());
    }
    if spec.sigma.is_nan() || spec.sigma <= 0.0 || !(0.0..=1.0).contains(&spec.w) {
        bail!(InvalidArgument, "invalid sigma or w");
    }
    let sd = (spec.sigma * spec.sigma + (1.0 - spec.w) * spec.k0 as f64).sqrt();
    let scale = spec.w.sqrt();
    let mut rng = rng_from_seed(derive_seed(spec.seed, 2));
    Ok((0..a.rows())
        .map(|i| {
            let m: f64 = a.row(i)[..spec.k0].iter().sum::<f64>() * scale;
            let z: f64 = rng.sample(StandardNormal);
            m + sd * z
        })
        .collect())
}

/// Quality-study dataset: attributes and response, no features.
pub fn gen_quality(spec: &SimSpec) -> Result<Dataset> {
    if spec.variant != SimVariant::Quality {
        bail!(InvalidArgument, "gen_quality needs the quality variant");
    }
    spec.validate()?;
    let a = gen_mixed_gamma_attrs(
        spec.n,
        spec.k0,
        spec.k,
        spec.cov_sqrt.as_ref(),
        derive_seed(spec.seed, 1),
    )?;
    let y = gen_quality_response(&a, spec)?;
    let p = a.cols();
    Dataset::unnamed(
        Matrix::zeros(spec.n, 0),
        a,
        vec![AttrKind::Continuous; p],
        Response::Regression(y),
    )
}

/// Simulation 1 or 2 of the fairness trade-off study. `X` is `[X* | X']`.
pub fn gen_simulation(spec: &SimSpec) -> Result<Dataset> {
    spec.validate()?;
    let (p, width) = match spec.variant {
        SimVariant::Sim1 => (spec.k, spec.k),
        SimVariant::Sim2 => (spec.k + 1, 1),
        SimVariant::Quality => bail!(InvalidArgument, "gen_simulation needs sim1 or sim2"),
    };
    let a = gen_mixed_gamma_attrs(spec.n, p, 0, spec.cov_sqrt.as_ref(), derive_seed(spec.seed, 1))?;
    let mut rng = rng_from_seed(derive_seed(spec.seed, 2));
    let signal = spec.w.sqrt();
    let noise = (1.0 - spec.w).sqrt();
    let mut x = Matrix::zeros(spec.n, 2 * width);
    let mut y = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut total = 0.0;
        for j in 0..width {
            let z: f64 = rng.sample(StandardNormal);
            let star = signal * a.get(i, j) + noise * z;
            let prime: f64 = rng.sample(StandardNormal);
            x.set(i, j, star);
            x.set(i, width + j, prime);
            total += star + prime;
        }
        let e: f64 = rng.sample(StandardNormal);
        y.push(total + spec.sigma * e);
    }
    let mut names = ColumnNames::generated(0, p);
    names.x = (1..=width)
        .map(|j| format!("x_star{j}"))
        .chain((1..=width).map(|j| format!("x_prime{j}")))
        .collect();
    Dataset::new(x, a, vec![AttrKind::Continuous; p], Response::Regression(y), names)
}

/// Random disjoint split with `n_train` rows on the training side. Rows keep
/// their original relative order within each side.
pub fn split_counts(ds: &Dataset, n_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = ds.n();
    if n_train == 0 || n_train >= n {
        bail!(InvalidArgument, "split of {n} rows into {n_train} + {} leaves a side empty", n.saturating_sub(n_train));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let (train, test) = idx.split_at_mut(n_train);
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.select_rows(train), ds.select_rows(test)))
}

/// Random split with `floor(train_frac * n)` training rows.
pub fn split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        bail!(InvalidArgument, "train_frac must be in (0, 1), got {train_frac}");
    }
    if ds.n() < 2 {
        bail!(InvalidArgument, "cannot split fewer than two rows");
    }
    let n_train = (train_frac * ds.n() as f64).floor() as usize;
    split_counts(ds, n_train, seed)
}
