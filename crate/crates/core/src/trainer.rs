//! Adversarial equalized-odds training with permuted attribute copies.
//!
//! Each outer iteration draws one copy `A~` of the training attributes,
//! takes `N_g` discriminator steps on
//! `L_d = E[-log D(Y_hat, A, Y)] + E[-log(1 - D(Y_hat, A~, Y))]`
//! and then `N_g` predictor steps on `(1 - mu) L_f - mu L_d`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{expand_attrs, expanded_width, AttrKind, Coding, Dataset, Response, Task};
use crate::density::ConditionalDensity;
use crate::eotest::{eo_test, EoTestConfig, EoStatistic};
use crate::error::{bail, Error, Result};
use crate::linalg::{Matrix, Standardizer};
use crate::nn::{sigmoid, softmax, softplus, Mlp, Optimizer, OptimizerKind};
use crate::perm::{PermMethod, PermutationSampler, DEFAULT_SWEEPS};
use crate::rng::{derive_seed, rng_from_seed};

const SD_FLOOR: f64 = 1e-8;
/// Bound on the discriminator logit.
pub const LOGIT_CLAMP: f64 = 30.0;
pub const DISC_HIDDEN: usize = 64;

fn half_log_two_pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Linear,
    /// One hidden ReLU layer.
    Mlp { hidden: usize },
}

/// Prediction function `f`. Inputs are standardized with training
/// statistics; regression outputs are fitted on the standardized response
/// and mapped back on prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub arch: Arch,
    pub task: Task,
    pub x_scaler: Standardizer,
    pub y_mean: f64,
    pub y_sd: f64,
    pub net: Mlp,
}

impl PredictorModel {
    pub fn init(arch: Arch, train: &Dataset, seed: u64) -> Result<Self> {
        let p = train.x().cols();
        if p == 0 {
            bail!(InvalidData, "predictor needs at least one feature");
        }
        let out = match train.task() {
            Task::Regression => 1,
            Task::Classification { classes } => classes,
        };
        let sizes = match arch {
            Arch::Linear => vec![p, out],
            Arch::Mlp { hidden } => vec![p, hidden, out],
        };
        let (y_mean, y_sd) = match train.y() {
            Response::Regression(v) => {
                let m = crate::linalg::mean(v);
                (m, crate::linalg::variance(v).sqrt().max(SD_FLOOR))
            }
            Response::Classification { .. } => (0.0, 1.0),
        };
        Ok(PredictorModel {
            arch,
            task: train.task(),
            x_scaler: Standardizer::fit(train.x(), SD_FLOOR),
            y_mean,
            y_sd,
            net: Mlp::new(&sizes, &mut rng_from_seed(seed))?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.net.is_finite()
    }

    /// Network-scale outputs for standardized inputs: the standardized
    /// regression prediction, or class probabilities.
    fn internal(&self, x_std: &Matrix) -> Result<Matrix> {
        let mut z = self.net.forward(x_std)?;
        if let Task::Classification { .. } = self.task {
            for i in 0..z.rows() {
                let p = softmax(z.row(i));
                z.row_mut(i).copy_from_slice(&p);
            }
        }
        Ok(z)
    }

    /// Raw-scale prediction column (regression) or probability rows.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = self.internal(&self.x_scaler.apply(x))?;
        if self.task == Task::Regression {
            z.data_mut().iter_mut().for_each(|v| *v = self.y_mean + self.y_sd * *v);
        }
        Ok(z)
    }

    fn target(&self, y: &Response) -> Result<Matrix> {
        match (y, self.task) {
            (Response::Regression(v), Task::Regression) => {
                Ok(Matrix::column_vector(&v.iter().map(|t| (t - self.y_mean) / self.y_sd).collect::<Vec<_>>()))
            }
            (Response::Classification { classes, .. }, Task::Classification { classes: c }) if *classes == c => Ok(y.encoding()),
            _ => bail!(InvalidData, "response does not match the model task"),
        }
    }
}

/// Mean loss on network-scale targets and its gradient with respect to the
/// network outputs (logits for classification).
fn loss_and_output_grad(task: Task, out: &Matrix, target: &Matrix) -> (f64, Matrix) {
    let b = out.rows() as f64;
    let mut g = Matrix::zeros(out.rows(), out.cols());
    let mut total = 0.0;
    match task {
        Task::Regression => {
            for i in 0..out.rows() {
                let r = out.get(i, 0) - target.get(i, 0);
                total += 0.5 * r * r + half_log_two_pi();
                g.set(i, 0, r / b);
            }
        }
        Task::Classification { .. } => {
            for i in 0..out.rows() {
                let p = softmax(out.row(i));
                let t = target.row(i);
                for (c, (pc, tc)) in p.iter().zip(t).enumerate() {
                    if *tc > 0.0 {
                        total -= tc * pc.max(f64::MIN_POSITIVE).ln();
                    }
                    g.set(i, c, (pc - tc) / b);
                }
            }
        }
    }
    (total / b, g)
}

/// Predictive loss `L_f` on a batch with its parameter gradient.
///
/// Regression uses the unit-variance Gaussian negative log-likelihood on the
/// model's standardized response scale; classification uses cross-entropy.
pub fn pred_loss(f: &PredictorModel, x: &Matrix, y: &Response) -> Result<(f64, Vec<f64>)> {
    if x.rows() == 0 || x.rows() != y.len() {
        bail!(Dimension, "batch has {} feature rows and {} responses", x.rows(), y.len());
    }
    let target = f.target(y)?;
    let (out, tape) = f.net.forward_tape(&f.x_scaler.apply(x))?;
    let (loss, g) = loss_and_output_grad(f.task, &out, &target);
    if !loss.is_finite() {
        bail!(NonFinite, "predictive loss is not finite");
    }
    Ok((loss, f.net.backward(&tape, &g)?.0))
}

/// Held-out loss on the raw response scale: Gaussian unit-variance NLL for
/// regression, cross-entropy for classification.
pub fn test_loss(f: &PredictorModel, test: &Dataset) -> Result<f64> {
    let pred = f.predict(test.x())?;
    let n = test.n() as f64;
    let total: f64 = match test.y() {
        Response::Regression(v) => v
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let r = y - pred.get(i, 0);
                0.5 * r * r + half_log_two_pi()
            })
            .sum(),
        Response::Classification { labels, .. } => labels.iter().enumerate().map(|(i, &l)| -pred.get(i, l).max(f64::MIN_POSITIVE).ln()).sum(),
    };
    Ok(total / n)
}

/// Discriminator `D(y_hat, a, y)`: four dense layers of width 64 with ReLU
/// and a sigmoid output. Continuous attributes are standardized; categorical
/// ones enter one-hot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub a_kinds: Vec<AttrKind>,
    pub a_scaler: Standardizer,
    pub yhat_dim: usize,
    pub net: Mlp,
}

impl Discriminator {
    pub fn init(train: &Dataset, seed: u64) -> Result<Self> {
        let a_kinds = train.a_kinds().to_vec();
        let expanded = expand_attrs(train.a(), &a_kinds, Coding::Full);
        let mut a_scaler = Standardizer::fit(&expanded, SD_FLOOR);
        let mut col = 0;
        for kind in &a_kinds {
            if let AttrKind::Categorical { levels } = kind {
                for j in col..col + levels {
                    a_scaler.mean[j] = 0.0;
                    a_scaler.sd[j] = 1.0;
                }
                col += levels;
            } else {
                col += 1;
            }
        }
        let yhat_dim = match train.task() {
            Task::Regression => 1,
            Task::Classification { classes } => classes,
        };
        let input = 2 * yhat_dim + expanded_width(&a_kinds, Coding::Full);
        let h = DISC_HIDDEN;
        Ok(Discriminator {
            a_kinds,
            a_scaler,
            yhat_dim,
            net: Mlp::new(&[input, h, h, h, 1], &mut rng_from_seed(seed))?,
        })
    }

    /// Encoded attribute block for raw attribute rows.
    pub fn encode_attrs(&self, a: &Matrix) -> Matrix {
        self.a_scaler.apply(&expand_attrs(a, &self.a_kinds, Coding::Full))
    }

    /// Rows `[y_hat | a_enc | y_enc]`.
    pub fn assemble(&self, yhat: &Matrix, a_enc: &Matrix, y_enc: &Matrix) -> Result<Matrix> {
        yhat.hcat(a_enc)?.hcat(y_enc)
    }

    fn clamped_logits(&self, input: &Matrix) -> Result<(Vec<f64>, crate::nn::Tape)> {
        let (z, tape) = self.net.forward_tape(input)?;
        Ok((z.data().to_vec(), tape))
    }

    /// `D` on assembled input rows.
    pub fn prob(&self, input: &Matrix) -> Result<Vec<f64>> {
        let z = self.net.forward(input)?;
        Ok(z.data().iter().map(|v| sigmoid(v.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))).collect())
    }
}

/// Discriminator loss with its gradients.
#[derive(Debug, Clone)]
pub struct DiscLoss {
    pub loss: f64,
    /// Fraction of real rows with `D > 1/2` and fake rows with `D < 1/2`.
    pub accuracy: f64,
    pub grad_params: Vec<f64>,
    pub grad_real: Matrix,
    pub grad_fake: Matrix,
}

/// `mean(-log D(real)) + mean(-log(1 - D(fake)))` with gradients for the
/// parameters and both input blocks.
pub fn disc_loss(d: &Discriminator, real: &Matrix, fake: &Matrix) -> Result<DiscLoss> {
    if real.rows() != fake.rows() || real.rows() == 0 {
        bail!(Dimension, "real and fake batches need equal nonzero size, got {} and {}", real.rows(), fake.rows());
    }
    let b = real.rows() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut grad_params = vec![0.0; d.net.params().len()];
    let mut input_grads = Vec::with_capacity(2);
    for (block, label) in [(real, 1.0), (fake, 0.0)] {
        let (z, tape) = d.clamped_logits(block)?;
        let mut g = Matrix::zeros(block.rows(), 1);
        for (i, zi) in z.iter().enumerate() {
            let inside = zi.abs() <= LOGIT_CLAMP;
            let zc = zi.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
            let p = sigmoid(zc);
            if label == 1.0 {
                loss += softplus(-zc);
                correct += usize::from(p > 0.5);
            } else {
                loss += softplus(zc);
                correct += usize::from(p < 0.5);
            }
            if inside {
                g.set(i, 0, (p - label) / b);
            }
        }
        let (gp, gi) = d.net.backward(&tape, &g)?;
        grad_params.iter_mut().zip(gp).for_each(|(a, v)| *a += v);
        input_grads.push(gi);
    }
    let loss = loss / b;
    if !loss.is_finite() {
        bail!(NonFinite, "discriminator loss is not finite");
    }
    let grad_fake = input_grads.pop().unwrap();
    let grad_real = input_grads.pop().unwrap();
    Ok(DiscLoss {
        loss,
        accuracy: correct as f64 / (2.0 * b),
        grad_params,
        grad_real,
        grad_fake,
    })
}

/// `V_mu = (1 - mu) L_f - mu L_d`.
pub fn value_function(mu: f64, lf: f64, ld: f64) -> f64 {
    (1.0 - mu) * lf - mu * ld
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mu: f64,
    /// Predictor step size.
    pub alpha: f64,
    /// Discriminator step size; `alpha` when absent.
    pub disc_alpha: Option<f64>,
    pub n_g: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Sampler sweeps per copy.
    pub sweeps: usize,
    pub optimizer: OptimizerKind,
    pub arch: Arch,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mu: 0.0,
            alpha: 1e-2,
            disc_alpha: Some(3e-4),
            n_g: 1,
            epochs: 40,
            batch: 64,
            sweeps: DEFAULT_SWEEPS,
            optimizer: OptimizerKind::Adam,
            arch: Arch::Linear,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            bail!(InvalidArgument, "mu must lie in [0, 1], got {}", self.mu);
        }
        for (name, v) in [("alpha", Some(self.alpha)), ("disc_alpha", self.disc_alpha)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    bail!(InvalidArgument, "{name} must be positive, got {v}");
                }
            }
        }
        if self.n_g == 0 || self.epochs == 0 || self.batch == 0 || self.sweeps == 0 {
            bail!(InvalidArgument, "n_g, epochs, batch and sweeps must all be >= 1");
        }
        if let Arch::Mlp { hidden: 0 } = self.arch {
            bail!(InvalidArgument, "hidden width must be >= 1");
        }
        Ok(())
    }

    /// Outer iterations `T = epochs * ceil(n / batch)`.
    pub fn iterations(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub lf: f64,
    pub ld: Option<f64>,
    pub disc_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub predictor: PredictorModel,
    pub discriminator: Discriminator,
    pub history: Vec<HistoryRow>,
}

/// Shuffled mini-batches, reshuffled at each epoch boundary.
struct BatchSchedule {
    order: Vec<usize>,
    batch: usize,
    per_epoch: usize,
    rng: crate::rng::SimRng,
}

impl BatchSchedule {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchSchedule {
            order: (0..n).collect(),
            batch,
            per_epoch: n.div_ceil(batch),
            rng: rng_from_seed(seed),
        }
    }

    fn batch(&mut self, t: usize) -> Vec<usize> {
        let b = t % self.per_epoch;
        if b == 0 {
            self.order.shuffle(&mut self.rng);
        }
        let end = ((b + 1) * self.batch).min(self.order.len());
        self.order[b * self.batch..end].to_vec()
    }
}

/// Training data held in network-ready form.
struct Prepared {
    x: Matrix,
    y: Response,
    y_net: Matrix,
    a_enc: Matrix,
}

impl Prepared {
    fn new(train: &Dataset, f: &PredictorModel, d: &Discriminator) -> Result<Self> {
        Ok(Prepared {
            x: train.x().clone(),
            y: train.y().clone(),
            y_net: f.target(train.y())?,
            a_enc: d.encode_attrs(train.a()),
        })
    }
}

fn check_train(train: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if train.n() < 2 {
        bail!(InvalidData, "training needs at least two rows");
    }
    Ok(())
}

fn erm_step(f: &mut PredictorModel, opt: &mut Optimizer, data: &Prepared, idx: &[usize]) -> Result<f64> {
    let (lf, g) = pred_loss(f, &data.x.select_rows(idx), &data.y.select(idx))?;
    opt.step(f.net.params_mut(), &g);
    Ok(lf)
}

/// Trains with copies drawn by `sampler`; `train_fairicp` is the ICP case.
pub fn train_with_sampler(train: &Dataset, sampler: &PermutationSampler, cfg: &TrainConfig) -> Result<TrainOutput> {
    check_train(train, cfg)?;
    if sampler.n() != train.n() {
        bail!(Dimension, "sampler built for {} rows, training set has {}", sampler.n(), train.n());
    }
    let mut f = PredictorModel::init(cfg.arch, train, derive_seed(cfg.seed, 1))?;
    let mut d = Discriminator::init(train, derive_seed(cfg.seed, 2))?;
    let data = Prepared::new(train, &f, &d)?;
    let mut opt_f = Optimizer::new(cfg.optimizer, cfg.alpha, f.net.params().len());
    let mut opt_d = Optimizer::new(cfg.optimizer, cfg.disc_alpha.unwrap_or(cfg.alpha), d.net.params().len());
    let mut schedule = BatchSchedule::new(train.n(), cfg.batch, derive_seed(cfg.seed, 0));
    let sampler_root = derive_seed(cfg.seed, 3);
    let iterations = cfg.iterations(train.n());
    let mut history = Vec::with_capacity(iterations);
    let ydim = d.yhat_dim;

    for t in 0..iterations {
        let idx = schedule.batch(t);
        let diverged = |_: Error| Error::Diverged { iteration: t };
        if cfg.mu == 0.0 {
            let mut lf = 0.0;
            for _ in 0..cfg.n_g {
                lf = erm_step(&mut f, &mut opt_f, &data, &idx).map_err(diverged)?;
            }
            history.push(HistoryRow { iteration: t, lf, ld: None, disc_acc: None });
            continue;
        }

        let pi = sampler.draw_pi(cfg.sweeps, derive_seed(sampler_root, t as u64))?;
        let fake_idx: Vec<usize> = idx.iter().map(|&k| pi[k]).collect();
        let x_std = f.x_scaler.apply(&data.x.select_rows(&idx));
        let y_net = data.y_net.select_rows(&idx);
        let a_real = data.a_enc.select_rows(&idx);
        let a_fake = data.a_enc.select_rows(&fake_idx);
        let y_batch = data.y.select(&idx);
        let target = f.target(&y_batch)?;

        let mut ld = 0.0;
        let mut acc = 0.0;
        for _ in 0..cfg.n_g {
            let yhat = f.internal(&x_std)?;
            let real = d.assemble(&yhat, &a_real, &y_net)?;
            let fake = d.assemble(&yhat, &a_fake, &y_net)?;
            let out = disc_loss(&d, &real, &fake).map_err(diverged)?;
            ld = out.loss;
            acc = out.accuracy;
            opt_d.step(d.net.params_mut(), &out.grad_params);
        }

        let mut lf = 0.0;
        for _ in 0..cfg.n_g {
            let (z, tape) = f.net.forward_tape(&x_std)?;
            let (loss_f, g_f) = loss_and_output_grad(f.task, &z, &target);
            let yhat = match f.task {
                Task::Regression => z.clone(),
                Task::Classification { .. } => {
                    let mut p = z.clone();
                    for i in 0..p.rows() {
                        let s = softmax(z.row(i));
                        p.row_mut(i).copy_from_slice(&s);
                    }
                    p
                }
            };
            let real = d.assemble(&yhat, &a_real, &y_net)?;
            let fake = d.assemble(&yhat, &a_fake, &y_net)?;
            let out = disc_loss(&d, &real, &fake).map_err(diverged)?;
            // d L_d / d y_hat through both blocks
            let mut g_yhat = Matrix::zeros(yhat.rows(), ydim);
            for i in 0..yhat.rows() {
                for c in 0..ydim {
                    g_yhat.set(i, c, out.grad_real.get(i, c) + out.grad_fake.get(i, c));
                }
            }
            let g_ld = match f.task {
                Task::Regression => g_yhat,
                Task::Classification { .. } => {
                    let mut gz = Matrix::zeros(yhat.rows(), ydim);
                    for i in 0..yhat.rows() {
                        let p = yhat.row(i);
                        let gp = g_yhat.row(i);
                        let inner: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
                        for c in 0..ydim {
                            gz.set(i, c, p[c] * (gp[c] - inner));
                        }
                    }
                    gz
                }
            };
            let mut g = g_f.clone();
            for (gv, lv) in g.data_mut().iter_mut().zip(g_ld.data()) {
                *gv = (1.0 - cfg.mu) * *gv - cfg.mu * lv;
            }
            let (gp, _) = f.net.backward(&tape, &g)?;
            if !loss_f.is_finite() {
                return Err(Error::Diverged { iteration: t });
            }
            lf = loss_f;
            opt_f.step(f.net.params_mut(), &gp);
        }
        if !f.is_finite() || !d.net.is_finite() {
            return Err(Error::Diverged { iteration: t });
        }
        history.push(HistoryRow { iteration: t, lf, ld: Some(ld), disc_acc: Some(acc) });
    }
    if !f.is_finite() {
        return Err(Error::Diverged { iteration: iterations.saturating_sub(1) });
    }
    Ok(TrainOutput {
        predictor: f,
        discriminator: d,
        history,
    })
}

/// Adversarial training with inverse conditional permutation copies from
/// `q(y | a)`. With `mu = 0` the discriminator and sampler are never used.
pub fn train_fairicp<Q: ConditionalDensity + ?Sized>(train: &Dataset, q: &Q, cfg: &TrainConfig) -> Result<TrainOutput> {
    check_train(train, cfg)?;
    let sampler = if cfg.mu == 0.0 {
        PermutationSampler::uniform(train.n())
    } else {
        PermutationSampler::with_method(q, train.a(), &train.y().values(), PermMethod::Icp)?
    };
    train_with_sampler(train, &sampler, cfg)
}

/// Plain empirical-risk minimisation sharing the seed streams and batch
/// schedule of the adversarial loop.
pub fn train_erm(train: &Dataset, cfg: &TrainConfig) -> Result<PredictorModel> {
    check_train(train, cfg)?;
    let mut f = PredictorModel::init(cfg.arch, train, derive_seed(cfg.seed, 1))?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.alpha, f.net.params().len());
    let mut schedule = BatchSchedule::new(train.n(), cfg.batch, derive_seed(cfg.seed, 0));
    for t in 0..cfg.iterations(train.n()) {
        let idx = schedule.batch(t);
        for _ in 0..cfg.n_g {
            let x = train.x().select_rows(&idx);
            let y = train.y().select(&idx);
            let (lf, g) = pred_loss(&f, &x, &y).map_err(|_| Error::Diverged { iteration: t })?;
            if !lf.is_finite() {
                return Err(Error::Diverged { iteration: t });
            }
            opt.step(f.net.params_mut(), &g);
        }
    }
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub mu: f64,
    pub test_loss: f64,
    pub kpc: f64,
    pub p_value: f64,
}

/// Seed for the grid point at `mu`, independent of its grid position.
pub fn mu_seed(seed: u64, mu: f64) -> u64 {
    derive_seed(seed, mu.to_bits())
}

/// Trains and evaluates one model per `mu` on the grid. The test uses `q`
/// on the test rows and the statistic in `eval`.
pub fn sweep_mu<Q: ConditionalDensity + ?Sized>(
    train: &Dataset,
    test: &Dataset,
    q: &Q,
    grid: &[f64],
    cfg: &TrainConfig,
    eval: &EoTestConfig,
) -> Result<Vec<TradeoffPoint>> {
    eval.validate()?;
    let mut out = Vec::with_capacity(grid.len());
    for &mu in grid {
        let seed = mu_seed(cfg.seed, mu);
        let run = TrainConfig { mu, seed, ..cfg.clone() };
        out.push(evaluate_point(train, test, q, &run, eval, derive_seed(seed, 7))?);
    }
    Ok(out)
}

/// Trains at `cfg.mu` and scores the model on `test`.
pub fn evaluate_point<Q: ConditionalDensity + ?Sized>(
    train: &Dataset,
    test: &Dataset,
    q: &Q,
    cfg: &TrainConfig,
    eval: &EoTestConfig,
    test_seed: u64,
) -> Result<TradeoffPoint> {
    let model = train_fairicp(train, q, cfg)?.predictor;
    let yhat = model.predict(test.x())?;
    let stat = &eval.statistic;
    // reported violation is the clamped estimate whatever the test uses
    let mut measure = stat.clone();
    measure.kpc.clamp = true;
    let kpc = measure.bind(&yhat, test.a_kinds(), test.y())?(test.a())?;
    let result = eo_test(&yhat, test.a(), test.a_kinds(), test.y(), q, eval.k, eval.sweeps, stat, test_seed)?;
    Ok(TradeoffPoint {
        mu: cfg.mu,
        test_loss: test_loss(&model, test)?,
        kpc,
        p_value: result.p_value,
    })
}

/// Architecture tag used in serialized models.
pub fn arch_tag(arch: Arch) -> String {
    match arch {
        Arch::Linear => String::from("linear"),
        Arch::Mlp { hidden } => alloc::format!("mlp{hidden}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_simulation, split_counts, SimSpec, SimVariant};
    use crate::nn::tests::rel_err;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn regression_set(n: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let mut x = Matrix::zeros(n, 3);
        let mut a = Matrix::zeros(n, 2);
        let mut y = Vec::new();
        for i in 0..n {
            for j in 0..3 {
                x.set(i, j, rng.sample(StandardNormal));
            }
            a.set(i, 0, rng.sample(StandardNormal));
            a.set(i, 1, rng.random_range(0..3) as f64);
            y.push(x.get(i, 0) - 0.5 * x.get(i, 2) + 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
        Dataset::unnamed(x, a, vec![AttrKind::Continuous, AttrKind::Categorical { levels: 3 }], Response::Regression(y)).unwrap()
    }

    fn classification_set(n: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let mut x = Matrix::zeros(n, 2);
        let mut a = Matrix::zeros(n, 1);
        let mut labels = Vec::new();
        for i in 0..n {
            x.set(i, 0, rng.sample(StandardNormal));
            x.set(i, 1, rng.sample(StandardNormal));
            a.set(i, 0, rng.sample(StandardNormal));
            labels.push(if x.get(i, 0) > 0.5 { 2 } else if x.get(i, 1) > 0.0 { 1 } else { 0 });
        }
        Dataset::unnamed(x, a, vec![AttrKind::Continuous], Response::Classification { labels, classes: 3 }).unwrap()
    }

    /// Central differences against `grad`. A mismatch is tolerated only where
    /// the one-sided slopes disagree, i.e. the step straddles a ReLU kink;
    /// the number of such coordinates is returned.
    fn fd_check(params: &mut [f64], grad: &[f64], coords: impl IntoIterator<Item = usize>, mut loss: impl FnMut(&[f64]) -> f64) -> usize {
        let eps = 1e-5;
        let mut skipped = 0;
        for k in coords {
            let orig = params[k];
            let mid = loss(params);
            params[k] = orig + eps;
            let up = loss(params);
            params[k] = orig - eps;
            let down = loss(params);
            params[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            if rel_err(fd, grad[k]) <= 1e-4 {
                continue;
            }
            let (right, left) = ((up - mid) / eps, (mid - down) / eps);
            assert!(rel_err(right, left) > 1e-2, "param {k}: fd {fd} vs analytic {}", grad[k]);
            skipped += 1;
        }
        skipped
    }

    #[test]
    fn pred_loss_gradients_match_finite_differences() {
        let mut kinks = 0;
        for point in 0..20u64 {
            for (ds, arch) in [
                (regression_set(12, point), Arch::Linear),
                (regression_set(12, point), Arch::Mlp { hidden: 5 }),
                (classification_set(12, point), Arch::Linear),
                (classification_set(12, point), Arch::Mlp { hidden: 4 }),
            ] {
                let f = PredictorModel::init(arch, &ds, 50 + point).unwrap();
                let (_, g) = pred_loss(&f, ds.x(), ds.y()).unwrap();
                let mut params = f.net.params().to_vec();
                let mut probe = f.clone();
                kinks += fd_check(&mut params, &g, 0..g.len(), |p| {
                    probe.net.params_mut().copy_from_slice(p);
                    pred_loss(&probe, ds.x(), ds.y()).unwrap().0
                });
            }
        }
        assert!(kinks <= 5, "{kinks} coordinates at kinks");
    }

    #[test]
    fn linear_model_has_five_parameters_and_exact_gradient() {
        let ds = Dataset::unnamed(
            Matrix::from_rows(&[vec![1.0, 0.0, 2.0, 1.0], vec![0.0, 1.0, -1.0, 3.0], vec![2.0, 2.0, 0.0, 0.0]]).unwrap(),
            Matrix::column_vector(&[0.0, 1.0, 2.0]),
            vec![AttrKind::Continuous],
            Response::Regression(vec![1.0, -1.0, 0.5]),
        )
        .unwrap();
        let f = PredictorModel::init(Arch::Linear, &ds, 3).unwrap();
        assert_eq!(f.net.params().len(), 5);
    }

    #[test]
    fn perfect_prediction_and_uniform_classifier_losses() {
        let ds = regression_set(10, 1);
        let mut f = PredictorModel::init(Arch::Linear, &ds, 0).unwrap();
        f.net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        // zero output predicts the mean, so a constant response is fitted exactly
        let y = Response::Regression(vec![f.y_mean; 10]);
        let (loss, g) = pred_loss(&f, ds.x(), &y).unwrap();
        assert!((loss - half_log_two_pi()).abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));

        let ds = classification_set(10, 2);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let binary = Dataset::unnamed(ds.x().clone(), ds.a().clone(), ds.a_kinds().to_vec(), Response::Classification { labels, classes: 2 }).unwrap();
        let mut f = PredictorModel::init(Arch::Linear, &binary, 0).unwrap();
        f.net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let (loss, _) = pred_loss(&f, binary.x(), binary.y()).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        let p = f.predict(binary.x()).unwrap();
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let ds = classification_set(200, 5);
        let mut f = PredictorModel::init(Arch::Mlp { hidden: 8 }, &ds, 1).unwrap();
        f.net.params_mut().iter_mut().for_each(|p| *p *= 40.0);
        let p = f.predict(ds.x()).unwrap();
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    fn disc_inputs(ds: &Dataset, seed: u64) -> (Discriminator, Matrix, Matrix) {
        let d = Discriminator::init(ds, seed).unwrap();
        let mut rng = rng_from_seed(seed + 1000);
        let yhat = Matrix::from_vec(ds.n(), d.yhat_dim, (0..ds.n() * d.yhat_dim).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let a = d.encode_attrs(ds.a());
        let mut perm: Vec<usize> = (0..ds.n()).collect();
        perm.shuffle(&mut rng);
        let y = ds.y().encoding();
        let real = d.assemble(&yhat, &a, &y).unwrap();
        let fake = d.assemble(&yhat, &a.select_rows(&perm), &y).unwrap();
        (d, real, fake)
    }

    #[test]
    fn disc_loss_gradients_match_finite_differences() {
        let mut kinks = 0;
        for point in 0..20u64 {
            let ds = if point % 2 == 0 { regression_set(6, point) } else { classification_set(6, point) };
            let (d, real, fake) = disc_inputs(&ds, point);
            let out = disc_loss(&d, &real, &fake).unwrap();
            let mut params = d.net.params().to_vec();
            let mut probe = d.clone();
            // every parameter of the first and last layers, a random sample of the middle ones
            let n_first = real.cols() * DISC_HIDDEN + DISC_HIDDEN;
            let total = params.len();
            let mut rng = rng_from_seed(point);
            let coords: Vec<usize> = (0..n_first)
                .chain((0..400).map(|_| rng.random_range(n_first..total - DISC_HIDDEN - 1)))
                .chain(total - DISC_HIDDEN - 1..total)
                .collect();
            kinks += fd_check(&mut params, &out.grad_params, coords, |p| {
                probe.net.params_mut().copy_from_slice(p);
                disc_loss(&probe, &real, &fake).unwrap().loss
            });
            let mut flat = real.data().to_vec();
            kinks += fd_check(&mut flat, out.grad_real.data(), 0..real.data().len(), |v| {
                let m = Matrix::from_vec(real.rows(), real.cols(), v.to_vec()).unwrap();
                disc_loss(&d, &m, &fake).unwrap().loss
            });
            let mut flat = fake.data().to_vec();
            kinks += fd_check(&mut flat, out.grad_fake.data(), 0..fake.data().len(), |v| {
                let m = Matrix::from_vec(fake.rows(), fake.cols(), v.to_vec()).unwrap();
                disc_loss(&d, &real, &m).unwrap().loss
            });
        }
        assert!(kinks <= 20, "{kinks} coordinates at kinks");
    }

    #[test]
    fn disc_loss_reference_values() {
        let ds = regression_set(8, 3);
        let (mut d, real, fake) = disc_inputs(&ds, 3);
        d.net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let out = disc_loss(&d, &real, &fake).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        // bias on the output unit only: logit ln((1 - 1e-9) / 1e-9) on every row
        let last = d.net.params().len() - 1;
        let logit = ((1.0 - 1e-9) / 1e-9f64).ln();
        d.net.params_mut()[last] = logit;
        let real_only = disc_loss(&d, &real, &fake).unwrap();
        assert!(real_only.loss > 20.0);
        assert!(disc_loss(&d, &real, &fake.select_rows(&[0])).is_err());
        let probs = d.prob(&real).unwrap();
        assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn separated_discriminator_loss_is_near_zero() {
        // one input column carries the label
        let real = Matrix::column_vector(&[1.0, 1.0, 1.0]);
        let fake = Matrix::column_vector(&[-1.0, -1.0, -1.0]);
        let logit = ((1.0 - 1e-9) / 1e-9f64).ln();
        let mut net = Mlp::from_params(&[1, 1, 1, 1, 1], vec![0.0; 8]).unwrap();
        // first layer maps real to 2 and fake to 0; the output maps 2 to +logit and 0 to -logit
        net.params_mut().copy_from_slice(&[1.0, 1.0, 1.0, 0.0, 1.0, 0.0, logit, -logit]);
        let d = Discriminator { a_kinds: vec![], a_scaler: Standardizer::identity(0), yhat_dim: 0, net };
        let out = disc_loss(&d, &real, &fake).unwrap();
        assert!(out.loss < 1e-8, "{}", out.loss);
        assert_eq!(out.accuracy, 1.0);
    }

    #[test]
    fn value_function_corners() {
        assert_eq!(value_function(0.0, 1.3, 0.7), 1.3);
        assert_eq!(value_function(1.0, 1.3, 0.7), -0.7);
        let h = 1.1;
        let mu = 0.4;
        assert!((value_function(mu, h, 4f64.ln()) - ((1.0 - mu) * h - mu * 4f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn zero_mu_matches_erm_bitwise() {
        let ds = regression_set(90, 7);
        for (optimizer, arch) in [(OptimizerKind::Sgd, Arch::Linear), (OptimizerKind::Adam, Arch::Mlp { hidden: 6 })] {
            let cfg = TrainConfig { epochs: 5, batch: 16, optimizer, arch, seed: 11, ..Default::default() };
            struct Never;
            impl ConditionalDensity for Never {
                fn direction(&self) -> crate::density::Direction {
                    crate::density::Direction::YGivenA
                }
                fn log_density(&self, _: &[f64], _: &[f64]) -> Result<f64> {
                    panic!("density must not be evaluated at mu = 0")
                }
            }
            let fair = train_fairicp(&ds, &Never, &cfg).unwrap();
            let erm = train_erm(&ds, &cfg).unwrap();
            let a: Vec<u64> = fair.predictor.net.params().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = erm.net.params().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert!(fair.history.iter().all(|h| h.ld.is_none()));
            assert_eq!(fair.history.len(), cfg.iterations(90));
        }
    }

    #[test]
    fn full_batch_small_step_loss_is_nonincreasing() {
        let ds = regression_set(100, 8);
        let cfg = TrainConfig { alpha: 1e-3, epochs: 300, batch: 100, seed: 2, optimizer: OptimizerKind::Sgd, ..Default::default() };
        let out = train_fairicp(&ds, &Never2, &cfg).unwrap();
        assert!(out.history.windows(2).all(|w| w[1].lf <= w[0].lf));
    }

    struct Never2;
    impl ConditionalDensity for Never2 {
        fn direction(&self) -> crate::density::Direction {
            crate::density::Direction::YGivenA
        }
        fn log_density(&self, _: &[f64], _: &[f64]) -> Result<f64> {
            unreachable!()
        }
    }

    #[test]
    fn matched_distributions_leave_discriminator_at_chance() {
        // fake attributes are an independent copy of real ones
        let mut rng = rng_from_seed(21);
        let n = 4000;
        let draw = |rng: &mut crate::rng::SimRng| -> Matrix {
            Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
        };
        let ds = regression_set(50, 1);
        let mut d = Discriminator::init(&ds, 4).unwrap();
        d.net = Mlp::new(&[3, 64, 64, 64, 1], &mut rng_from_seed(5)).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, d.net.params().len());
        let (real, fake) = (draw(&mut rng), draw(&mut rng));
        for step in 0..200 {
            let idx: Vec<usize> = (0..64).map(|k| (step * 64 + k) % n).collect();
            let out = disc_loss(&d, &real.select_rows(&idx), &fake.select_rows(&idx)).unwrap();
            opt.step(d.net.params_mut(), &out.grad_params);
        }
        let (hr, hf) = (draw(&mut rng), draw(&mut rng));
        let acc = disc_loss(&d, &hr, &hf).unwrap().accuracy;
        assert!((0.45..=0.55).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn adversarial_training_runs_and_logs() {
        let spec = SimSpec::new(SimVariant::Sim1, 200, 0, 1, 0.9, 3);
        let ds = gen_simulation(&spec).unwrap();
        let (train, test) = split_counts(&ds, 120, 1).unwrap();
        let q = crate::density::fit_y_given_a(&train, crate::density::Penalty::Ridge(0.0)).unwrap();
        let cfg = TrainConfig { mu: 0.5, epochs: 3, batch: 32, sweeps: 5, seed: 1, ..Default::default() };
        let out = train_fairicp(&train, &q, &cfg).unwrap();
        assert_eq!(out.history.len(), cfg.iterations(120));
        assert!(out.history.iter().all(|h| h.ld.is_some() && h.disc_acc.is_some()));
        assert!(test_loss(&out.predictor, &test).unwrap().is_finite());
        let again = train_fairicp(&train, &q, &cfg).unwrap();
        assert_eq!(out.predictor, again.predictor);
    }

    #[test]
    fn classification_training_runs() {
        let ds = classification_set(150, 9);
        let q = crate::density::fit_y_given_a_classifier(&ds, 1e-3).unwrap();
        let cfg = TrainConfig { mu: 0.5, epochs: 2, batch: 50, sweeps: 3, arch: Arch::Mlp { hidden: 8 }, ..Default::default() };
        let out = train_fairicp(&ds, &q, &cfg).unwrap();
        assert!(test_loss(&out.predictor, &ds).unwrap().is_finite());
    }

    #[test]
    fn sweep_grid_sizes_and_determinism() {
        let spec = SimSpec::new(SimVariant::Sim1, 160, 0, 1, 0.9, 4);
        let ds = gen_simulation(&spec).unwrap();
        let (train, test) = split_counts(&ds, 100, 2).unwrap();
        let q = crate::density::fit_y_given_a(&train, crate::density::Penalty::Ridge(0.0)).unwrap();
        let cfg = TrainConfig { epochs: 2, batch: 25, sweeps: 5, seed: 3, ..Default::default() };
        let eval = EoTestConfig { k: 9, sweeps: 5, ..Default::default() };
        assert!(sweep_mu(&train, &test, &q, &[], &cfg, &eval).unwrap().is_empty());
        let a = sweep_mu(&train, &test, &q, &[0.0], &cfg, &eval).unwrap();
        let b = sweep_mu(&train, &test, &q, &[0.0], &cfg, &eval).unwrap();
        assert_eq!(a, b);
        let grid = [0.0, 0.3, 0.5, 0.7, 0.8, 0.9];
        let pts = sweep_mu(&train, &test, &q, &grid, &TrainConfig { epochs: 1, ..cfg.clone() }, &eval).unwrap();
        assert_eq!(pts.len(), 6);
        // grid position does not change the point for a given mu
        let erm = train_erm(&train, &TrainConfig { seed: mu_seed(3, 0.0), ..cfg.clone() }).unwrap();
        assert_eq!(a[0].test_loss, test_loss(&erm, &test).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { mu: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { n_g: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig { epochs: 2, batch: 64, ..Default::default() }.iterations(500), 16);
    }
}
