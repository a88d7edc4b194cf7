use gormpo_nn::{Activation, Bound, Mlp, ParamStore, Tape, Var};
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_input, floor, header, read_header, DensityEstimator, EstimatorKind, EVAL_CHUNK};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::SeedStream;
use crate::train::{fit_params, FitReport, TrainConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpmConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub n_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Size of the evenly spaced inference schedule.
    pub n_strides: usize,
    /// Noise draws per term; odd counts leave the last antithetic pair half used.
    pub mc_samples: usize,
    pub eval_seed: u64,
    pub train: TrainConfig,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 512, 512],
            time_embed_dim: 128,
            n_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            n_strides: 50,
            mc_samples: 2,
            eval_seed: 0,
            train: TrainConfig {
                epochs: 50,
                batch_size: 512,
                lr: 2e-4,
                weight_decay: 0.01,
                patience: Some(15),
                ..TrainConfig::default()
            },
        }
    }
}

/// Linear variance schedule with cumulative products; index `k` runs 1..=K.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    pub fn linear(k: usize, start: f64, end: f64) -> Self {
        let beta: Vec<f64> = (0..k)
            .map(|i| if k == 1 { start } else { start + (end - start) * i as f64 / (k - 1) as f64 })
            .collect();
        let alpha_bar = beta
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Self { beta, alpha_bar }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta[k - 1]
    }

    /// `ᾱ_k`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }
}

/// Denoising diffusion model with an MLP noise predictor on `[x_k, emb(k)]`.
#[derive(Debug, Clone)]
pub struct Ddpm {
    config: DdpmConfig,
    input_dim: usize,
    schedule: Schedule,
    store: ParamStore,
    net: Mlp,
    fitted: bool,
    tau: Option<f64>,
}

impl Ddpm {
    pub fn new(input_dim: usize, config: DdpmConfig) -> Self {
        Self::with_seed(input_dim, config, 0)
    }

    fn with_seed(input_dim: usize, config: DdpmConfig, seed: u64) -> Self {
        let mut rng = SeedStream::new(seed).rng();
        let mut store = ParamStore::new();
        let mut sizes = vec![input_dim + config.time_embed_dim];
        sizes.extend(&config.hidden);
        sizes.push(input_dim);
        let net = Mlp::new(&mut store, "eps", &sizes, Activation::Silu, false, &mut rng);
        Self {
            schedule: Schedule::linear(config.n_steps, config.beta_start, config.beta_end),
            config,
            input_dim,
            store,
            net,
            fitted: false,
            tau: None,
        }
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn config(&self) -> &DdpmConfig {
        &self.config
    }

    /// Evenly spaced `{K/n, 2K/n, …, K}` (rounded, deduplicated).
    pub fn default_strides(&self) -> Vec<usize> {
        let k = self.schedule.len();
        let n = self.config.n_strides.clamp(1, k);
        let mut s: Vec<usize> = (1..=n).map(|i| ((i * k) as f64 / n as f64).round() as usize).collect();
        s.dedup();
        s
    }

    fn embedding(&self, steps: &[usize]) -> Array2<f64> {
        let half = self.config.time_embed_dim / 2;
        Array2::from_shape_fn((steps.len(), self.config.time_embed_dim), |(i, j)| {
            let f = |jj: usize| (-(10_000f64.ln()) * jj as f64 / half.max(1) as f64).exp();
            let t = steps[i] as f64;
            if j < half {
                (t * f(j)).sin()
            } else {
                (t * f(j - half)).cos()
            }
        })
    }

    fn predict_eps(&self, store: &ParamStore, xk: &Array2<f64>, k: usize) -> Array2<f64> {
        let emb = self.embedding(&vec![k; xk.nrows()]);
        let input = ndarray::concatenate(Axis(1), &[xk.view(), emb.view()]).expect("same rows");
        self.net.predict(store, &input)
    }

    fn loss_tape<'t>(&self, p: &Bound<'t>, xk: Var<'t>, emb: Var<'t>, eps: Var<'t>) -> Var<'t> {
        let pred = self.net.forward(p, Var::concat_cols(&[xk, emb]));
        (pred - eps).square().mean()
    }

    /// `(x_k, ε)` draws: `mc` stacked copies of `x0`, antithetic in pairs,
    /// keyed on `(seed, chunk, k, pair)`.
    fn noised(&self, x0: &Array2<f64>, k: usize, mc: usize, seed: u64, chunk: usize) -> (Array2<f64>, Array2<f64>) {
        let (n, d) = x0.dim();
        let mut eps = Array2::zeros((n * mc, d));
        for pair in 0..mc.div_ceil(2) {
            let mut rng = SeedStream::new(seed).path(&[chunk as u64, k as u64, pair as u64]).rng();
            let draw = Array2::<f64>::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng));
            eps.slice_mut(s![2 * pair * n..(2 * pair + 1) * n, ..]).assign(&draw);
            if 2 * pair + 1 < mc {
                eps.slice_mut(s![(2 * pair + 1) * n..(2 * pair + 2) * n, ..]).assign(&-draw);
            }
        }
        let ab = self.schedule.alpha_bar(k);
        let tiled = ndarray::concatenate(Axis(0), &vec![x0.view(); mc]).expect("same width");
        (tiled * ab.sqrt() + &eps * (1.0 - ab).sqrt(), eps)
    }

    /// Per-row mean over draws of `‖ε − ε_θ(x_k, k)‖²`.
    fn eps_error(&self, x0: &Array2<f64>, k: usize, mc: usize, seed: u64, chunk: usize) -> Array1<f64> {
        let n = x0.nrows();
        let (xk, eps) = self.noised(x0, k, mc, seed, chunk);
        let err = (&eps - &self.predict_eps(&self.store, &xk, k)).mapv(|v| v * v).sum_axis(Axis(1));
        Array1::from_shape_fn(n, |i| (0..mc).map(|m| err[m * n + i]).sum::<f64>() / mc as f64)
    }

    fn prior_kl(&self, x0: &Array2<f64>) -> Array1<f64> {
        let ab = self.schedule.alpha_bar(self.schedule.len());
        x0.map_axis(Axis(1), |r| r.iter().map(|x| 0.5 * ((1.0 - ab) + ab * x * x - 1.0 - (1.0 - ab).ln())).sum())
    }

    fn strided_chunk(&self, x0: &Array2<f64>, strides: &[usize], mc: usize, seed: u64, chunk: usize) -> Array1<f64> {
        let sch = &self.schedule;
        let d = self.input_dim as f64;
        let b1 = sch.beta(1);
        let mut nll = self.prior_kl(x0);
        nll += &(self.eps_error(x0, 1, mc, seed, chunk) / (2.0 * sch.alpha(1)));
        nll += 0.5 * d * (LN_2PI + b1.ln());
        let mut prev = 1;
        for &k in strides.iter().filter(|&&k| k >= 2) {
            let gap = (k - prev) as f64;
            let coef = sch.beta(k) / (2.0 * sch.alpha(k) * (1.0 - sch.alpha_bar(k - 1)));
            nll += &(self.eps_error(x0, k, mc, seed, chunk) * (gap * coef));
            prev = k;
        }
        -nll
    }

    /// Variational-bound estimate restricted to the timesteps in `strides`,
    /// each term weighted by its gap to the previous included step. The prior
    /// and decoder terms are always included.
    pub fn log_prob_strided(&self, x: &Array2<f64>, strides: &[usize], mc: usize, seed: u64, exec: Exec) -> Result<Array1<f64>> {
        check_input(self, x)?;
        if strides.is_empty() {
            return Err(Error::Param("stride set is empty".into()));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) || strides[0] < 1 || strides[strides.len() - 1] > self.schedule.len() {
            return Err(Error::Param(format!("stride set must be strictly increasing within 1..={}", self.schedule.len())));
        }
        if mc == 0 {
            return Err(Error::Param("mc_samples must be at least 1".into()));
        }
        let parts = exec.map_chunks(x.nrows(), EVAL_CHUNK, |c, s0, s1| {
            self.strided_chunk(&x.slice(s![s0..s1, ..]).to_owned(), strides, mc, seed, c).to_vec()
        });
        Ok(Array1::from(parts.concat()))
    }

    /// Full variational bound over every timestep, written with explicit
    /// Gaussian KLs between the forward posterior and the model transition.
    pub fn log_prob_full_vlb(&self, x: &Array2<f64>, mc: usize, seed: u64) -> Result<Array1<f64>> {
        check_input(self, x)?;
        let sch = &self.schedule;
        let (n, d) = x.dim();
        let mut out = Vec::with_capacity(n);
        for (c, s0) in (0..n).step_by(EVAL_CHUNK).enumerate() {
            let x0 = x.slice(s![s0..(s0 + EVAL_CHUNK).min(n), ..]).to_owned();
            let rows = x0.nrows();
            let tiled = ndarray::concatenate(Axis(0), &vec![x0.view(); mc]).expect("same width");
            let mut total = Array1::<f64>::zeros(rows * mc);
            let k_last = sch.len();
            let (m_k, v_k) = (sch.alpha_bar(k_last).sqrt(), 1.0 - sch.alpha_bar(k_last));
            for r in 0..rows * mc {
                total[r] += (0..d)
                    .map(|j| {
                        let m = m_k * tiled[[r, j]];
                        0.5 * (v_k + m * m - 1.0 - v_k.ln())
                    })
                    .sum::<f64>();
            }
            for k in 1..=k_last {
                let (xk, _) = self.noised(&x0, k, mc, seed, c);
                let eh = self.predict_eps(&self.store, &xk, k);
                let (b, a, ab) = (sch.beta(k), sch.alpha(k), sch.alpha_bar(k));
                let model_mean = (&xk - &(&eh * (b / (1.0 - ab).sqrt()))) / a.sqrt();
                if k == 1 {
                    for r in 0..rows * mc {
                        total[r] += (0..d)
                            .map(|j| 0.5 * (LN_2PI + b.ln()) + (tiled[[r, j]] - model_mean[[r, j]]).powi(2) / (2.0 * b))
                            .sum::<f64>();
                    }
                } else {
                    let ab_prev = sch.alpha_bar(k - 1);
                    let post_var = (1.0 - ab_prev) / (1.0 - ab) * b;
                    let c0 = ab_prev.sqrt() * b / (1.0 - ab);
                    let ck = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                    for r in 0..rows * mc {
                        total[r] += (0..d)
                            .map(|j| (c0 * tiled[[r, j]] + ck * xk[[r, j]] - model_mean[[r, j]]).powi(2) / (2.0 * post_var))
                            .sum::<f64>();
                    }
                }
            }
            out.extend((0..rows).map(|i| -(0..mc).map(|m| total[m * rows + i]).sum::<f64>() / mc as f64));
        }
        Ok(Array1::from(out))
    }

    /// Predicted noise `ε_θ(x_k, k)` at timestep `k` for one forward draw per row.
    pub fn predict_noise(&self, x: &Array2<f64>, k: usize, seed: u64) -> Result<Array2<f64>> {
        check_input(self, x)?;
        if k == 0 || k > self.schedule.len() {
            return Err(Error::Param(format!("timestep {k} outside 1..={}", self.schedule.len())));
        }
        let (xk, _) = self.noised(x, k, 1, seed, 0);
        Ok(self.predict_eps(&self.store, &xk, k))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (input_dim, tau, fitted) = read_header(c, EstimatorKind::Ddpm)?;
        let config: DdpmConfig = super::config_from_container(c)?;
        let mut m = Self::new(input_dim, config);
        super::store_from_container(c, "params", &mut m.store)?;
        m.fitted = fitted;
        m.tau = tau;
        Ok(m)
    }

    fn validation_loss(&self, store: &ParamStore, val: &Array2<f64>) -> f64 {
        let mut rng = SeedStream::new(self.config.eval_seed).child(u64::MAX).rng();
        let k_max = self.schedule.len();
        let ks: Vec<usize> = (0..val.nrows()).map(|_| rng.random_range(1..=k_max)).collect();
        let eps = Array2::from_shape_fn(val.dim(), |_| StandardNormal.sample(&mut rng));
        let xk = self.forward_noise(val, &ks, &eps);
        let input = ndarray::concatenate(Axis(1), &[xk.view(), self.embedding(&ks).view()]).expect("same rows");
        (&self.net.predict(store, &input) - &eps).mapv(|v| v * v).mean().unwrap_or(f64::NAN)
    }

    fn forward_noise(&self, x0: &Array2<f64>, ks: &[usize], eps: &Array2<f64>) -> Array2<f64> {
        let mut xk = x0.clone();
        for (i, mut row) in xk.rows_mut().into_iter().enumerate() {
            let ab = self.schedule.alpha_bar(ks[i]);
            row.zip_mut_with(&eps.row(i), |x, e| *x = ab.sqrt() * *x + (1.0 - ab).sqrt() * e);
        }
        xk
    }
}

impl DensityEstimator for Ddpm {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Ddpm
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn is_fitted(&self) -> bool {
        self.fitted
    }

    fn fit(&mut self, train: &Array2<f64>, val: &Array2<f64>, seed: u64) -> Result<FitReport> {
        if train.ncols() != self.input_dim || val.ncols() != self.input_dim {
            return Err(Error::Param(format!("ddpm expects {} columns", self.input_dim)));
        }
        let root = SeedStream::new(seed);
        *self = Self::with_seed(self.input_dim, self.config.clone(), root.child(0).raw());
        let mut store = std::mem::take(&mut self.store);
        let this = &*self;
        let k_max = this.schedule.len();
        let report = fit_params(
            &mut store,
            train.nrows(),
            &this.config.train,
            &mut root.child(1).rng(),
            |s, idx, rng| {
                let x0 = train.select(Axis(0), idx);
                let ks: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=k_max)).collect();
                let eps = Array2::from_shape_fn(x0.dim(), |_| StandardNormal.sample(rng));
                let xk = this.forward_noise(&x0, &ks, &eps);
                let tape = Tape::new();
                let p = s.bind(&tape);
                let loss = this.loss_tape(&p, tape.leaf(xk), tape.leaf(this.embedding(&ks)), tape.leaf(eps));
                let g = tape.backward(loss);
                (loss.item(), s.grads(&p, &g))
            },
            |s| this.validation_loss(s, val),
        );
        self.store = store;
        self.fitted = true;
        report
    }

    fn log_prob_with(&self, x: &Array2<f64>, exec: Exec) -> Result<Array1<f64>> {
        let strides = self.default_strides();
        Ok(self
            .log_prob_strided(x, &strides, self.config.mc_samples, self.config.eval_seed, exec)?
            .mapv(floor))
    }

    fn threshold(&self) -> Option<f64> {
        self.tau
    }

    fn set_threshold(&mut self, tau: f64) {
        self.tau = Some(tau);
    }

    fn to_container(&self) -> Container {
        let mut c = header(EstimatorKind::Ddpm, self.input_dim, self.tau, self.fitted);
        super::config_to_container(&mut c, &self.config);
        super::store_to_container(&mut c, "params", &self.store);
        c
    }
}
