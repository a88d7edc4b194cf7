use gormpo_nn::{Activation, Bound, Mlp, ParamStore, Tape, Var};
use ndarray::{s, Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_input, floor, header, read_header, DensityEstimator, EstimatorKind, EVAL_CHUNK};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::SeedStream;
use crate::train::{fit_params, FitReport, TrainConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LOGVAR_MID: f64 = -3.0;
const LOGVAR_HALF: f64 = 7.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub iwae_samples: usize,
    /// Seed of the noise used by `log_prob`.
    pub eval_seed: u64,
    pub train: TrainConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            hidden: vec![256, 256],
            beta: 1.0,
            iwae_samples: 32,
            eval_seed: 0,
            train: TrainConfig {
                epochs: 100,
                batch_size: 256,
                lr: 1e-3,
                patience: Some(15),
                plateau_factor: Some(0.5),
                plateau_patience: 7,
                ..TrainConfig::default()
            },
        }
    }
}

/// Log-variances live in `[−10, 4]` through a smooth clamp.
fn soft_clamp(raw: f64) -> f64 {
    LOGVAR_MID + LOGVAR_HALF * (raw / LOGVAR_HALF).tanh()
}

fn soft_clamp_var(raw: Var<'_>) -> Var<'_> {
    raw.scale(1.0 / LOGVAR_HALF).tanh().scale(LOGVAR_HALF).add_scalar(LOGVAR_MID)
}

/// Gaussian VAE with diagonal posterior and diagonal Gaussian decoder.
/// Trained on the ELBO; scored with the importance-weighted estimate.
#[derive(Debug, Clone)]
pub struct Vae {
    config: VaeConfig,
    input_dim: usize,
    store: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
    fitted: bool,
    tau: Option<f64>,
}

struct Gaussian {
    mean: Array2<f64>,
    logvar: Array2<f64>,
}

impl Vae {
    pub fn new(input_dim: usize, config: VaeConfig) -> Self {
        Self::with_seed(input_dim, config, 0)
    }

    fn with_seed(input_dim: usize, config: VaeConfig, seed: u64) -> Self {
        let mut rng = SeedStream::new(seed).rng();
        let mut store = ParamStore::new();
        let l = config.latent_dim;
        let sizes = |inp: usize, out: usize| {
            let mut v = vec![inp];
            v.extend(&config.hidden);
            v.push(out);
            v
        };
        let encoder = Mlp::new(&mut store, "encoder", &sizes(input_dim, 2 * l), Activation::Relu, false, &mut rng);
        let decoder = Mlp::new(&mut store, "decoder", &sizes(l, 2 * input_dim), Activation::Relu, false, &mut rng);
        Self {
            config,
            input_dim,
            store,
            encoder,
            decoder,
            fitted: false,
            tau: None,
        }
    }

    fn split(out: Array2<f64>, d: usize) -> Gaussian {
        Gaussian {
            mean: out.slice(s![.., ..d]).to_owned(),
            logvar: out.slice(s![.., d..]).mapv(soft_clamp),
        }
    }

    fn encode(&self, x: &Array2<f64>) -> Gaussian {
        Self::split(self.encoder.predict(&self.store, x), self.config.latent_dim)
    }

    fn decode(&self, z: &Array2<f64>) -> Gaussian {
        Self::split(self.decoder.predict(&self.store, z), self.input_dim)
    }

    /// Noise for rows of one evaluation chunk: `rows × samples × latent` standard normals.
    fn noise(&self, seed: u64, chunk: usize, rows: usize, samples: usize) -> Array2<f64> {
        let mut rng = SeedStream::new(seed).child(chunk as u64).rng();
        Array2::from_shape_fn((rows * samples, self.config.latent_dim), |_| StandardNormal.sample(&mut rng))
    }

    /// Log importance weights `log p(x|z) + log p(z) − log q(z|x)` for `samples`
    /// latents per row; returns a `rows × samples` matrix.
    fn log_weights(&self, x: &Array2<f64>, eps: &Array2<f64>, samples: usize) -> Array2<f64> {
        let (n, l, d) = (x.nrows(), self.config.latent_dim, self.input_dim);
        let q = self.encode(x);
        let mut z = Array2::zeros((n * samples, l));
        let mut log_q = Array1::zeros(n * samples);
        for i in 0..n {
            for k in 0..samples {
                let r = i * samples + k;
                let mut acc = 0.0;
                for j in 0..l {
                    let lv = q.logvar[[i, j]];
                    let e = eps[[r, j]];
                    z[[r, j]] = q.mean[[i, j]] + (0.5 * lv).exp() * e;
                    acc += -0.5 * (e * e + lv + LN_2PI);
                }
                log_q[r] = acc;
            }
        }
        let px = self.decode(&z);
        Array2::from_shape_fn((n, samples), |(i, k)| {
            let r = i * samples + k;
            let log_px: f64 = (0..d)
                .map(|j| {
                    let lv = px.logvar[[r, j]];
                    let diff = x[[i, j]] - px.mean[[r, j]];
                    -0.5 * (diff * diff * (-lv).exp() + lv + LN_2PI)
                })
                .sum();
            let log_pz: f64 = z.row(r).iter().map(|v| -0.5 * (v * v + LN_2PI)).sum();
            log_px + log_pz - log_q[r]
        })
    }

    /// `log (1/K) Σ_k w_k` per row, with noise keyed on `(seed, chunk)`.
    pub fn iwae_log_prob(&self, x: &Array2<f64>, samples: usize, seed: u64, exec: Exec) -> Result<Array1<f64>> {
        check_input(self, x)?;
        if samples == 0 {
            return Err(Error::Param("importance samples K must be at least 1".into()));
        }
        let parts = exec.map_chunks(x.nrows(), EVAL_CHUNK, |c, s0, s1| {
            let xs = x.slice(s![s0..s1, ..]).to_owned();
            let eps = self.noise(seed, c, s1 - s0, samples);
            let lw = self.log_weights(&xs, &eps, samples);
            lw.rows()
                .into_iter()
                .map(|row| {
                    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - (samples as f64).ln()
                })
                .collect::<Vec<_>>()
        });
        Ok(Array1::from(parts.concat()))
    }

    /// Single-sample ELBO `log p(x|z) + log p(z) − log q(z|x)` using the same
    /// noise stream as `iwae_log_prob` with one sample.
    pub fn elbo_estimate(&self, x: &Array2<f64>, seed: u64) -> Result<Array1<f64>> {
        check_input(self, x)?;
        let (l, d) = (self.config.latent_dim, self.input_dim);
        let mut out = Vec::with_capacity(x.nrows());
        for (c, s0) in (0..x.nrows()).step_by(EVAL_CHUNK).enumerate() {
            let s1 = (s0 + EVAL_CHUNK).min(x.nrows());
            let xs = x.slice(s![s0..s1, ..]).to_owned();
            let eps = self.noise(seed, c, s1 - s0, 1);
            let q = self.encode(&xs);
            let std = q.logvar.mapv(|v| (0.5 * v).exp());
            let z = &q.mean + &(&std * &eps);
            let px = self.decode(&z);
            for i in 0..xs.nrows() {
                let mut e = 0.0;
                for j in 0..d {
                    e += -0.5 * ((xs[[i, j]] - px.mean[[i, j]]).powi(2) / px.logvar[[i, j]].exp() + px.logvar[[i, j]] + LN_2PI);
                }
                for j in 0..l {
                    let zj = z[[i, j]];
                    let log_q = -0.5 * (((zj - q.mean[[i, j]]) / std[[i, j]]).powi(2) + q.logvar[[i, j]] + LN_2PI);
                    e += -0.5 * (zj * zj + LN_2PI) - log_q;
                }
                out.push(e);
            }
        }
        Ok(Array1::from(out))
    }

    /// Negative ELBO with analytic KL, averaged over the batch.
    fn loss_tape<'t>(&self, p: &Bound<'t>, x: Var<'t>, eps: Var<'t>) -> Var<'t> {
        let (l, d) = (self.config.latent_dim, self.input_dim);
        let enc = self.encoder.forward(p, x);
        let mu = enc.slice_cols(0, l);
        let lv = soft_clamp_var(enc.slice_cols(l, 2 * l));
        let z = mu + lv.scale(0.5).exp().mul(eps);
        let dec = self.decoder.forward(p, z);
        let xm = dec.slice_cols(0, d);
        let xlv = soft_clamp_var(dec.slice_cols(d, 2 * d));
        let recon = ((x - xm).square().mul((-xlv).exp()) + xlv).add_scalar(LN_2PI).sum_rows().scale(-0.5);
        let kl = (mu.square() + lv.exp() - lv).add_scalar(-1.0).sum_rows().scale(0.5);
        -(recon - kl.scale(self.config.beta)).mean()
    }

    fn validation_loss(&self, store: &ParamStore, val: &Array2<f64>) -> f64 {
        let probe = Vae {
            store: store.clone(),
            fitted: true,
            ..self.clone()
        };
        let mut rng = SeedStream::new(self.config.eval_seed).child(u64::MAX).rng();
        let eps = Array2::from_shape_fn((val.nrows(), self.config.latent_dim), |_| StandardNormal.sample(&mut rng));
        let tape = Tape::new();
        let p = probe.store.bind(&tape);
        probe.loss_tape(&p, tape.leaf(val.clone()), tape.leaf(eps)).item()
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (input_dim, tau, fitted) = read_header(c, EstimatorKind::Vae)?;
        let config: VaeConfig = super::config_from_container(c)?;
        let mut m = Self::new(input_dim, config);
        super::store_from_container(c, "params", &mut m.store)?;
        m.fitted = fitted;
        m.tau = tau;
        Ok(m)
    }
}

impl DensityEstimator for Vae {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Vae
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn is_fitted(&self) -> bool {
        self.fitted
    }

    fn fit(&mut self, train: &Array2<f64>, val: &Array2<f64>, seed: u64) -> Result<FitReport> {
        if train.ncols() != self.input_dim || val.ncols() != self.input_dim {
            return Err(Error::Param(format!("vae expects {} columns", self.input_dim)));
        }
        let root = SeedStream::new(seed);
        *self = Self::with_seed(self.input_dim, self.config.clone(), root.child(0).raw());
        let mut store = std::mem::take(&mut self.store);
        let this = &*self;
        let l = this.config.latent_dim;
        let report = fit_params(
            &mut store,
            train.nrows(),
            &this.config.train,
            &mut root.child(1).rng(),
            |s, idx, rng| {
                let tape = Tape::new();
                let p = s.bind(&tape);
                let eps = Array2::from_shape_fn((idx.len(), l), |_| StandardNormal.sample(rng));
                let loss = this.loss_tape(&p, tape.leaf(train.select(Axis(0), idx)), tape.leaf(eps));
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
        Ok(self
            .iwae_log_prob(x, self.config.iwae_samples, self.config.eval_seed, exec)?
            .mapv(floor))
    }

    fn threshold(&self) -> Option<f64> {
        self.tau
    }

    fn set_threshold(&mut self, tau: f64) {
        self.tau = Some(tau);
    }

    fn to_container(&self) -> Container {
        let mut c = header(EstimatorKind::Vae, self.input_dim, self.tau, self.fitted);
        super::config_to_container(&mut c, &self.config);
        super::store_to_container(&mut c, "params", &self.store);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VaeConfig {
        VaeConfig {
            latent_dim: 2,
            hidden: vec![16],
            iwae_samples: 8,
            train: TrainConfig {
                epochs: 2,
                batch_size: 64,
                ..VaeConfig::default().train
            },
            ..VaeConfig::default()
        }
    }

    fn data(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = SeedStream::new(seed).rng();
        Array2::from_shape_fn((n, 3), |_| StandardNormal.sample(&mut rng))
    }

    fn fitted() -> Vae {
        let mut m = Vae::new(3, small());
        m.fit(&data(256, 1), &data(64, 2), 3).unwrap();
        m
    }

    #[test]
    fn single_sample_iwae_is_the_elbo_draw() {
        let m = fitted();
        let x = data(300, 4);
        let iwae = m.iwae_log_prob(&x, 1, 17, Exec::Sequential).unwrap();
        let elbo = m.elbo_estimate(&x, 17).unwrap();
        assert!((&iwae - &elbo).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let m = fitted();
        let x = data(600, 5);
        let a = m.log_prob_with(&x, Exec::Sequential).unwrap();
        assert_eq!(a, m.log_prob_with(&x, Exec::Parallel).unwrap());
        assert_eq!(a, fitted().log_prob_with(&x, Exec::Sequential).unwrap());
    }

    #[test]
    fn zero_samples_is_an_error() {
        let m = fitted();
        assert!(matches!(m.iwae_log_prob(&data(2, 0), 0, 0, Exec::Sequential), Err(Error::Param(_))));
        assert!(matches!(Vae::new(3, small()).log_prob(&data(2, 0)), Err(Error::NotFitted(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = fitted();
        let back = Vae::from_container(&Container::from_bytes(&m.to_container().to_bytes()).unwrap()).unwrap();
        let x = data(10, 6);
        assert_eq!(back.log_prob(&x).unwrap(), m.log_prob(&x).unwrap());
    }
}
