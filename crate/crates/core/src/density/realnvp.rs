use gormpo_nn::{Activation, Bound, Mlp, ParamId, ParamStore, Tape, Var};
use ndarray::{s, Array1, Array2, Axis};
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
pub struct RealNvpConfig {
    pub n_couplings: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for RealNvpConfig {
    fn default() -> Self {
        Self {
            n_couplings: 6,
            hidden: vec![256, 256],
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

#[derive(Debug, Clone)]
struct Coupling {
    /// 1 where the input passes through unchanged.
    mask: Array2<f64>,
    net: Mlp,
    scale: ParamId,
}

/// Affine coupling flow with alternating parity masks. Each layer maps
/// `x ↦ m⊙x + (1−m)⊙(x⊙exp(s) + t)` with `(s, t)` computed from `m⊙x` and
/// `s = scale⊙tanh(·)`. The last layer of every coupling network starts at
/// zero, so a fresh model is the identity map.
#[derive(Debug, Clone)]
pub struct RealNvp {
    config: RealNvpConfig,
    input_dim: usize,
    store: ParamStore,
    layers: Vec<Coupling>,
    fitted: bool,
    tau: Option<f64>,
}

impl RealNvp {
    pub fn new(input_dim: usize, config: RealNvpConfig) -> Self {
        Self::with_seed(input_dim, config, 0)
    }

    fn with_seed(input_dim: usize, config: RealNvpConfig, seed: u64) -> Self {
        let mut rng = SeedStream::new(seed).rng();
        let mut store = ParamStore::new();
        let d = input_dim;
        let layers = (0..config.n_couplings)
            .map(|l| {
                let mask = Array2::from_shape_fn((1, d), |(_, j)| f64::from((j + l) % 2 == 0));
                let mut sizes = vec![d];
                sizes.extend(&config.hidden);
                sizes.push(2 * d);
                let net = Mlp::new(&mut store, &format!("coupling{l}.net"), &sizes, Activation::Relu, true, &mut rng);
                let scale = store.add(format!("coupling{l}.scale"), Array2::ones((1, d)));
                Coupling { mask, net, scale }
            })
            .collect();
        Self {
            config,
            input_dim,
            store,
            layers,
            fitted: false,
            tau: None,
        }
    }

    /// Identity-initialized flow that can be evaluated without fitting.
    pub fn identity(input_dim: usize, config: RealNvpConfig) -> Self {
        let mut m = Self::new(input_dim, config);
        m.fitted = true;
        m
    }

    fn shift_scale(&self, c: &Coupling, h: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.input_dim;
        let inv = c.mask.mapv(|m| 1.0 - m);
        let out = c.net.predict(&self.store, &(h * &c.mask));
        let s = out.slice(s![.., ..d]).mapv(f64::tanh) * self.store.get(c.scale) * &inv;
        let t = &out.slice(s![.., d..]) * &inv;
        (s, t)
    }

    /// `x ↦ (z, log|det ∂z/∂x|)`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let mut h = x.clone();
        let mut logdet = Array1::zeros(x.nrows());
        for (l, c) in self.layers.iter().enumerate() {
            let (s, t) = self.shift_scale(c, &h);
            h = &h * &s.mapv(f64::exp) + &t;
            logdet += &s.sum_axis(Axis(1));
            check_finite(&h, l)?;
        }
        Ok((h, logdet))
    }

    /// `z ↦ (x, log|det ∂x/∂z|)`.
    pub fn inverse(&self, z: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let mut h = z.clone();
        let mut logdet = Array1::zeros(z.nrows());
        for (l, c) in self.layers.iter().enumerate().rev() {
            let (s, t) = self.shift_scale(c, &h);
            h = (&h - &t) * &s.mapv(|v| (-v).exp());
            logdet -= &s.sum_axis(Axis(1));
            check_finite(&h, l)?;
        }
        Ok((h, logdet))
    }

    fn exact_log_prob(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        let (z, logdet) = self.forward(x)?;
        let d = self.input_dim as f64;
        Ok(Array1::from_shape_fn(x.nrows(), |i| {
            -0.5 * z.row(i).dot(&z.row(i)) - 0.5 * d * LN_2PI + logdet[i]
        }))
    }

    fn nll_tape<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let d = self.input_dim;
        let mut h = x;
        let mut logdet: Option<Var<'t>> = None;
        for c in &self.layers {
            let m = tape.leaf(c.mask.clone());
            let inv = tape.leaf(c.mask.mapv(|v| 1.0 - v));
            let out = c.net.forward(p, h.mul_row(m));
            let s = out.slice_cols(0, d).tanh().mul_row(p[c.scale]).mul_row(inv);
            let t = out.slice_cols(d, 2 * d).mul_row(inv);
            h = h.mul(s.exp()).add(t);
            let ld = s.sum_rows();
            logdet = Some(match logdet {
                Some(acc) => acc + ld,
                None => ld,
            });
        }
        let base = h.square().sum_rows().scale(-0.5).add_scalar(-0.5 * d as f64 * LN_2PI);
        match logdet {
            Some(ld) => -(base + ld).mean(),
            None => -base.mean(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (input_dim, tau, fitted) = read_header(c, EstimatorKind::RealNvp)?;
        let config: RealNvpConfig = super::config_from_container(c)?;
        let mut m = Self::new(input_dim, config);
        super::store_from_container(c, "params", &mut m.store)?;
        m.fitted = fitted;
        m.tau = tau;
        Ok(m)
    }
}

fn check_finite(h: &Array2<f64>, layer: usize) -> Result<()> {
    if h.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            location: format!("coupling layer {layer}"),
            detail: "non-finite activation".into(),
        })
    }
}

impl DensityEstimator for RealNvp {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::RealNvp
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn is_fitted(&self) -> bool {
        self.fitted
    }

    fn fit(&mut self, train: &Array2<f64>, val: &Array2<f64>, seed: u64) -> Result<FitReport> {
        if train.ncols() != self.input_dim || val.ncols() != self.input_dim {
            return Err(Error::Param(format!("realnvp expects {} columns", self.input_dim)));
        }
        let root = SeedStream::new(seed);
        *self = Self::with_seed(self.input_dim, self.config.clone(), root.child(0).raw());
        let mut store = std::mem::take(&mut self.store);
        let this = &*self;
        let report = fit_params(
            &mut store,
            train.nrows(),
            &this.config.train,
            &mut root.child(1).rng(),
            |s, idx, _| {
                let tape = Tape::new();
                let p = s.bind(&tape);
                let loss = this.nll_tape(&p, tape.leaf(train.select(Axis(0), idx)));
                let g = tape.backward(loss);
                (loss.item(), s.grads(&p, &g))
            },
            |s| {
                let probe = RealNvp {
                    store: s.clone(),
                    ..this.clone()
                };
                probe.exact_log_prob(val).map_or(f64::NAN, |lp| -lp.mean().unwrap_or(f64::NAN))
            },
        );
        self.store = store;
        self.fitted = true;
        report
    }

    fn log_prob_with(&self, x: &Array2<f64>, exec: Exec) -> Result<Array1<f64>> {
        check_input(self, x)?;
        let parts = exec.try_map(x.nrows().div_ceil(EVAL_CHUNK), |c| {
            let end = ((c + 1) * EVAL_CHUNK).min(x.nrows());
            self.exact_log_prob(&x.slice(s![c * EVAL_CHUNK..end, ..]).to_owned())
        })?;
        Ok(parts.into_iter().flatten().map(floor).collect())
    }

    fn threshold(&self) -> Option<f64> {
        self.tau
    }

    fn set_threshold(&mut self, tau: f64) {
        self.tau = Some(tau);
    }

    fn to_container(&self) -> Container {
        let mut c = header(EstimatorKind::RealNvp, self.input_dim, self.tau, self.fitted);
        super::config_to_container(&mut c, &self.config);
        super::store_to_container(&mut c, "params", &self.store);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn small() -> RealNvpConfig {
        RealNvpConfig {
            n_couplings: 4,
            hidden: vec![16, 16],
            train: TrainConfig {
                epochs: 3,
                batch_size: 64,
                ..RealNvpConfig::default().train
            },
        }
    }

    fn perturbed(seed: u64) -> RealNvp {
        let mut m = RealNvp::identity(3, small());
        let mut rng = SeedStream::new(seed).rng();
        for v in m.store.values_mut() {
            v.mapv_inplace(|x| x + 0.3 * { let e: f64 = StandardNormal.sample(&mut rng); e });
        }
        m
    }

    #[test]
    fn identity_flow_is_standard_normal() {
        let m = RealNvp::identity(2, RealNvpConfig::default());
        let lp = m.log_prob(&array![[0.0, 0.0]]).unwrap()[0];
        assert!((lp + 1.837877).abs() < 1e-6);
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_inverse_round_trip() {
        let m = perturbed(1);
        let mut rng = SeedStream::new(2).rng();
        let x = Array2::from_shape_fn((1000, 3), |_| 2.0 * { let e: f64 = StandardNormal.sample(&mut rng); e });
        let (z, fwd) = m.forward(&x).unwrap();
        let (back, inv) = m.inverse(&z).unwrap();
        let err = (&back - &x).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-6, "{err}");
        assert!((&fwd + &inv).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn tape_and_array_paths_agree() {
        let m = perturbed(3);
        let mut rng = SeedStream::new(4).rng();
        let x = Array2::from_shape_fn((20, 3), |_| StandardNormal.sample(&mut rng));
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let nll = m.nll_tape(&p, tape.leaf(x.clone())).item();
        let direct = -m.exact_log_prob(&x).unwrap().mean().unwrap();
        assert!((nll - direct).abs() < 1e-10);
    }

    #[test]
    fn non_finite_names_the_layer() {
        let mut m = RealNvp::identity(2, small());
        let err = m.forward(&array![[f64::NAN, 0.0]]).unwrap_err();
        assert!(err.to_string().contains("coupling layer 0"), "{err}");
        m.fitted = false;
        assert!(matches!(m.log_prob(&array![[0.0, 0.0]]), Err(Error::NotFitted(_))));
    }

    #[test]
    fn fit_is_deterministic_and_checkpoints() {
        let mut rng = SeedStream::new(5).rng();
        let data = Array2::from_shape_fn((256, 3), |_| StandardNormal.sample(&mut rng));
        let (train, val) = (data.slice(s![..192, ..]).to_owned(), data.slice(s![192.., ..]).to_owned());
        let mut a = RealNvp::new(3, small());
        let mut b = RealNvp::new(3, small());
        a.fit(&train, &val, 9).unwrap();
        b.fit(&train, &val, 9).unwrap();
        let q = val.clone();
        let la = a.log_prob_with(&q, Exec::Sequential).unwrap();
        assert_eq!(la, b.log_prob_with(&q, Exec::Sequential).unwrap());
        assert_eq!(la, a.log_prob_with(&q, Exec::Parallel).unwrap());
        let back = RealNvp::from_container(&Container::from_bytes(&a.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.log_prob(&q).unwrap(), la);
    }
}
