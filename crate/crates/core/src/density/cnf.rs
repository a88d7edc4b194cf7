use gormpo_nn::{Activation, Bound, Mlp, ParamStore, Tape, Var};
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_input, floor, header, read_header, DensityEstimator, EstimatorKind, EVAL_CHUNK};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::SeedStream;
use crate::train::{fit_params, FitReport, TrainConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const DIRECTIONAL_MAX_DIM: usize = 32;

/// How `tr(∂f/∂x)` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    /// Closed form for two hidden layers, otherwise directional derivatives
    /// up to 32 dimensions and Hutchinson above.
    Auto,
    /// `Σ_j e_jᵀ (∂f/∂x) e_j` by forward-mode tangents.
    Directional,
    /// Unbiased Rademacher-probe estimate.
    Hutchinson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnfConfig {
    pub hidden: Vec<usize>,
    /// RK4 steps used by `log_prob`.
    pub steps: usize,
    /// RK4 steps used inside the training objective.
    pub train_steps: usize,
    pub trace: TraceMode,
    pub hutchinson_probes: usize,
    pub eval_seed: u64,
    pub train: TrainConfig,
}

impl Default for CnfConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 512],
            steps: 20,
            train_steps: 10,
            trace: TraceMode::Auto,
            hutchinson_probes: 4,
            eval_seed: 0,
            train: TrainConfig {
                epochs: 20,
                batch_size: 512,
                lr: 1e-3,
                weight_decay: 1e-4,
                patience: Some(15),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trace {
    ClosedForm,
    Directional,
    Hutchinson,
}

/// Continuous normalizing flow with a time-conditioned velocity field
/// `f(x, t) = MLP([x, t])`. Data sit at `t = 1`, the standard-normal base at
/// `t = 0`; `log p(x) = log N(z) − ∫₀¹ tr(∂f/∂x) dt`.
#[derive(Debug, Clone)]
pub struct Cnf {
    config: CnfConfig,
    input_dim: usize,
    store: ParamStore,
    field: Mlp,
    fitted: bool,
    tau: Option<f64>,
}

impl Cnf {
    pub fn new(input_dim: usize, config: CnfConfig) -> Self {
        Self::with_seed(input_dim, config, 0)
    }

    fn with_seed(input_dim: usize, config: CnfConfig, seed: u64) -> Self {
        let mut rng = SeedStream::new(seed).rng();
        let mut store = ParamStore::new();
        let mut sizes = vec![input_dim + 1];
        sizes.extend(&config.hidden);
        sizes.push(input_dim);
        let field = Mlp::new(&mut store, "field", &sizes, Activation::Silu, true, &mut rng);
        Self {
            config,
            input_dim,
            store,
            field,
            fitted: false,
            tau: None,
        }
    }

    /// Zero velocity field: the flow is the identity.
    pub fn zero_field(input_dim: usize, config: CnfConfig) -> Self {
        let mut m = Self::new(input_dim, config);
        m.fitted = true;
        m
    }

    fn trace_kind(&self, requested: TraceMode) -> Trace {
        match requested {
            TraceMode::Auto if self.config.hidden.len() == 2 => Trace::ClosedForm,
            TraceMode::Auto | TraceMode::Directional if self.input_dim <= DIRECTIONAL_MAX_DIM => Trace::Directional,
            TraceMode::Directional => Trace::Directional,
            _ => Trace::Hutchinson,
        }
    }

    /// Velocity and trace of its Jacobian in `x`, both on the tape.
    fn field<'t>(&self, p: &Bound<'t>, x: Var<'t>, t: f64, trace: Trace, probes: &[Array2<f64>]) -> (Var<'t>, Var<'t>) {
        let tape = x.tape();
        let d = self.input_dim;
        let layers = &self.field.layers;
        let input = Var::concat_cols(&[x, tape.leaf(Array2::from_elem((x.rows(), 1), t))]);
        let mut pre = Vec::with_capacity(layers.len() - 1);
        let mut h = input;
        for l in &layers[..layers.len() - 1] {
            let z = l.forward(p, h);
            pre.push(z);
            h = z.silu();
        }
        let out = layers[layers.len() - 1].forward(p, h);
        let w1x = p[layers[0].weight].slice_rows(0, d);
        let tangent = |v: Var<'t>| {
            let mut dz = v.matmul(w1x);
            for (i, z) in pre.iter().enumerate() {
                dz = z.silu_grad().mul(dz).matmul(p[layers[i + 1].weight]);
            }
            dz
        };
        let tr = match trace {
            Trace::ClosedForm => {
                let (w2, w3) = (p[layers[1].weight], p[layers[2].weight]);
                let m = w2.mul(w3.matmul(w1x).t());
                pre[0].silu_grad().mul(pre[1].silu_grad().matmul(m.t())).sum_rows()
            }
            Trace::Directional => {
                let n = x.rows();
                let terms: Vec<Var<'t>> = (0..d)
                    .map(|j| {
                        let e = tape.leaf(Array2::from_shape_fn((n, d), |(_, c)| f64::from(c == j)));
                        tangent(e).slice_cols(j, j + 1)
                    })
                    .collect();
                terms.into_iter().reduce(|a, b| a + b).expect("d ≥ 1")
            }
            Trace::Hutchinson => {
                let k = probes.len() as f64;
                let terms: Vec<Var<'t>> = probes
                    .iter()
                    .map(|v| {
                        let v = tape.leaf(v.clone());
                        tangent(v).mul(v).sum_rows()
                    })
                    .collect();
                terms.into_iter().reduce(|a, b| a + b).expect("probes ≥ 1").scale(1.0 / k)
            }
        };
        (out, tr)
    }

    #[allow(clippy::too_many_arguments)]
    fn rk4<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        l: Var<'t>,
        t: f64,
        h: f64,
        trace: Trace,
        probes: &[Array2<f64>],
    ) -> (Var<'t>, Var<'t>) {
        let (f1, g1) = self.field(p, x, t, trace, probes);
        let (f2, g2) = self.field(p, x + f1.scale(h / 2.0), t + h / 2.0, trace, probes);
        let (f3, g3) = self.field(p, x + f2.scale(h / 2.0), t + h / 2.0, trace, probes);
        let (f4, g4) = self.field(p, x + f3.scale(h), t + h, trace, probes);
        let dx = (f1 + f2.scale(2.0) + f3.scale(2.0) + f4).scale(h / 6.0);
        let dl = (g1 + g2.scale(2.0) + g3.scale(2.0) + g4).scale(h / 6.0);
        (x + dx, l + dl)
    }

    fn probes(&self, trace: Trace, rows: usize, rng: &mut impl Rng) -> Vec<Array2<f64>> {
        if trace != Trace::Hutchinson {
            return Vec::new();
        }
        (0..self.config.hutchinson_probes.max(1))
            .map(|_| Array2::from_shape_fn((rows, self.input_dim), |_| if rng.random::<bool>() { 1.0 } else { -1.0 }))
            .collect()
    }

    /// Integrates `(x, ℓ)` from `t0` to `t1` with `steps` RK4 steps, where
    /// `dℓ/dt = tr(∂f/∂x)` and `ℓ(t0) = 0`.
    pub fn integrate(&self, x: &Array2<f64>, t0: f64, t1: f64, steps: usize, mode: TraceMode, seed: u64) -> Result<(Array2<f64>, Array1<f64>)> {
        if steps == 0 {
            return Err(Error::Param("RK4 needs at least one step".into()));
        }
        let trace = self.trace_kind(mode);
        let probes = self.probes(trace, x.nrows(), &mut SeedStream::new(seed).rng());
        let h = (t1 - t0) / steps as f64;
        let mut xs = x.clone();
        let mut ls = Array2::zeros((x.nrows(), 1));
        for i in 0..steps {
            let tape = Tape::new();
            let p = self.store.bind(&tape);
            let (xn, ln) = self.rk4(&p, tape.leaf(xs), tape.leaf(ls), t0 + i as f64 * h, h, trace, &probes);
            xs = xn.value();
            ls = ln.value();
            if xs.iter().chain(ls.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    location: format!("integration step {i}"),
                    detail: "non-finite state".into(),
                });
            }
        }
        Ok((xs, ls.column(0).to_owned()))
    }

    fn log_prob_chunk(&self, x: &Array2<f64>, steps: usize, mode: TraceMode, seed: u64) -> Result<Array1<f64>> {
        let (z, l) = self.integrate(x, 1.0, 0.0, steps, mode, seed)?;
        let d = self.input_dim as f64;
        Ok(Array1::from_shape_fn(x.nrows(), |i| -0.5 * z.row(i).dot(&z.row(i)) - 0.5 * d * LN_2PI + l[i]))
    }

    /// Unfloored log-density with an explicit step count and trace mode.
    pub fn log_prob_steps(&self, x: &Array2<f64>, steps: usize, mode: TraceMode, exec: Exec) -> Result<Array1<f64>> {
        check_input(self, x)?;
        let parts = exec.try_map(x.nrows().div_ceil(EVAL_CHUNK), |c| {
            let end = ((c + 1) * EVAL_CHUNK).min(x.nrows());
            let seed = SeedStream::new(self.config.eval_seed).child(c as u64).raw();
            self.log_prob_chunk(&x.slice(s![c * EVAL_CHUNK..end, ..]).to_owned(), steps, mode, seed)
        })?;
        Ok(parts.into_iter().flatten().collect())
    }

    fn nll_tape<'t>(&self, p: &Bound<'t>, x: Var<'t>, probes: &[Array2<f64>]) -> Var<'t> {
        let trace = self.trace_kind(self.config.trace);
        let steps = self.config.train_steps.max(1);
        let h = -1.0 / steps as f64;
        let tape = x.tape();
        let mut xs = x;
        let mut ls = tape.leaf(Array2::zeros((x.rows(), 1)));
        for i in 0..steps {
            (xs, ls) = self.rk4(p, xs, ls, 1.0 + i as f64 * h, h, trace, probes);
        }
        let d = self.input_dim as f64;
        let logp = xs.square().sum_rows().scale(-0.5).add_scalar(-0.5 * d * LN_2PI) + ls;
        -logp.mean()
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let (input_dim, tau, fitted) = read_header(c, EstimatorKind::Cnf)?;
        let config: CnfConfig = super::config_from_container(c)?;
        let mut m = Self::new(input_dim, config);
        super::store_from_container(c, "params", &mut m.store)?;
        m.fitted = fitted;
        m.tau = tau;
        Ok(m)
    }
}

impl DensityEstimator for Cnf {
    fn kind(&self) -> EstimatorKind {
        EstimatorKind::Cnf
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn is_fitted(&self) -> bool {
        self.fitted
    }

    fn fit(&mut self, train: &Array2<f64>, val: &Array2<f64>, seed: u64) -> Result<FitReport> {
        if train.ncols() != self.input_dim || val.ncols() != self.input_dim {
            return Err(Error::Param(format!("cnf expects {} columns", self.input_dim)));
        }
        let root = SeedStream::new(seed);
        *self = Self::with_seed(self.input_dim, self.config.clone(), root.child(0).raw());
        let mut store = std::mem::take(&mut self.store);
        let this = &*self;
        let trace = this.trace_kind(this.config.trace);
        let val_probes = this.probes(trace, val.nrows(), &mut root.child(2).rng());
        let report = fit_params(
            &mut store,
            train.nrows(),
            &this.config.train,
            &mut root.child(1).rng(),
            |s, idx, rng| {
                let probes = this.probes(trace, idx.len(), rng);
                let tape = Tape::new();
                let p = s.bind(&tape);
                let loss = this.nll_tape(&p, tape.leaf(train.select(Axis(0), idx)), &probes);
                let g = tape.backward(loss);
                (loss.item(), s.grads(&p, &g))
            },
            |s| {
                let tape = Tape::new();
                let p = s.bind(&tape);
                this.nll_tape(&p, tape.leaf(val.clone()), &val_probes).item()
            },
        );
        self.store = store;
        self.fitted = true;
        report
    }

    fn log_prob_with(&self, x: &Array2<f64>, exec: Exec) -> Result<Array1<f64>> {
        Ok(self.log_prob_steps(x, self.config.steps, self.config.trace, exec)?.mapv(floor))
    }

    fn threshold(&self) -> Option<f64> {
        self.tau
    }

    fn set_threshold(&mut self, tau: f64) {
        self.tau = Some(tau);
    }

    fn to_container(&self) -> Container {
        let mut c = header(EstimatorKind::Cnf, self.input_dim, self.tau, self.fitted);
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

    fn small(hidden: Vec<usize>) -> CnfConfig {
        CnfConfig {
            hidden,
            steps: 20,
            train_steps: 4,
            train: TrainConfig {
                epochs: 2,
                batch_size: 64,
                ..CnfConfig::default().train
            },
            ..CnfConfig::default()
        }
    }

    fn perturbed(hidden: Vec<usize>, d: usize, seed: u64) -> Cnf {
        let mut m = Cnf::zero_field(d, small(hidden));
        let mut rng = SeedStream::new(seed).rng();
        for v in m.store.values_mut() {
            v.mapv_inplace(|x| x + 0.2 * { let e: f64 = StandardNormal.sample(&mut rng); e });
        }
        m
    }

    fn points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = SeedStream::new(seed).rng();
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_field_is_standard_normal() {
        let m = Cnf::zero_field(2, CnfConfig::default());
        let lp = m.log_prob(&array![[0.0, 0.0]]).unwrap()[0];
        assert!((lp + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn closed_form_trace_matches_directional_derivatives() {
        let m = perturbed(vec![8, 6], 3, 1);
        let x = points(10, 3, 2);
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let xv = tape.leaf(x);
        let (_, a) = m.field(&p, xv, 0.3, Trace::ClosedForm, &[]);
        let (_, b) = m.field(&p, xv, 0.3, Trace::Directional, &[]);
        let diff = (&a.value() - &b.value()).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn directional_trace_matches_finite_differences() {
        let m = perturbed(vec![5, 5, 5], 2, 3);
        let x = points(4, 2, 4);
        let f = |x: &Array2<f64>| {
            let tape = Tape::new();
            let p = m.store.bind(&tape);
            m.field(&p, tape.leaf(x.clone()), 0.7, Trace::Directional, &[])
                .0
                .value()
        };
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let tr = m.field(&p, tape.leaf(x.clone()), 0.7, Trace::Directional, &[]).1.value();
        let h = 1e-6;
        for i in 0..4 {
            let mut fd = 0.0;
            for j in 0..2 {
                let (mut up, mut dn) = (x.clone(), x.clone());
                up[[i, j]] += h;
                dn[[i, j]] -= h;
                fd += (f(&up)[[i, j]] - f(&dn)[[i, j]]) / (2.0 * h);
            }
            assert!((fd - tr[[i, 0]]).abs() < 1e-6);
        }
    }

    #[test]
    fn hutchinson_is_unbiased_in_expectation() {
        let m = perturbed(vec![6, 6], 3, 5);
        let x = points(1, 3, 6);
        let tape = Tape::new();
        let p = m.store.bind(&tape);
        let exact = m.field(&p, tape.leaf(x.clone()), 0.5, Trace::ClosedForm, &[]).1.item();
        let mut rng = SeedStream::new(7).rng();
        let probes: Vec<Array2<f64>> = (0..4000)
            .map(|_| Array2::from_shape_fn((1, 3), |_| if rng.random::<bool>() { 1.0 } else { -1.0 }))
            .collect();
        let est = m.field(&p, tape.leaf(x), 0.5, Trace::Hutchinson, &probes).1.item();
        assert!((est - exact).abs() < 0.05 * exact.abs().max(0.1), "{est} vs {exact}");
    }

    #[test]
    fn forward_then_backward_round_trip() {
        let m = perturbed(vec![8, 8], 2, 8);
        let x = points(50, 2, 9);
        let (z, lz) = m.integrate(&x, 1.0, 0.0, 20, TraceMode::Auto, 0).unwrap();
        let (back, lb) = m.integrate(&z, 0.0, 1.0, 20, TraceMode::Auto, 0).unwrap();
        let err = (&back - &x).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-4, "{err}");
        assert!((&lz + &lb).iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn non_finite_reports_the_step() {
        let m = perturbed(vec![4, 4], 2, 1);
        let err = m.integrate(&array![[f64::NAN, 0.0]], 1.0, 0.0, 5, TraceMode::Auto, 0).unwrap_err();
        assert!(err.to_string().contains("integration step 0"), "{err}");
    }

    #[test]
    fn fit_is_deterministic_and_checkpoints() {
        let (train, val) = (points(128, 2, 10), points(32, 2, 11));
        let mut a = Cnf::new(2, small(vec![8, 8]));
        a.fit(&train, &val, 4).unwrap();
        let mut b = Cnf::new(2, small(vec![8, 8]));
        b.fit(&train, &val, 4).unwrap();
        let q = points(300, 2, 12);
        let la = a.log_prob_with(&q, Exec::Sequential).unwrap();
        assert_eq!(la, b.log_prob_with(&q, Exec::Parallel).unwrap());
        let back = Cnf::from_container(&Container::from_bytes(&a.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.log_prob(&q).unwrap(), la);
    }
}
