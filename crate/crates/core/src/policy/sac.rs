//! Soft actor-critic over normalized observations. Integer action spaces use a
//! categorical actor with expected-value backups; box spaces use a
//! tanh-squashed Gaussian actor with reparameterized samples.

use gormpo_nn::{Activation, Adam, AdamConfig, Bound, Mlp, ParamStore, Tape, Var};
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::density::{config_from_container, config_to_container, store_from_container, store_to_container};
use crate::error::{format_err, Error, Result};
use crate::mdp::ActionSpace;
use crate::rng::SeedStream;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    /// Polyak coefficient for the target critics.
    pub tau: f64,
    /// `None` selects −1 for box actions and `0.5·ln n` for `n` discrete actions.
    pub target_entropy: Option<f64>,
    pub init_alpha: f64,
    pub batch_size: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            target_entropy: None,
            init_alpha: 1.0,
            batch_size: 256,
        }
    }
}

/// Action parameterization derived from the environment's action space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    Discrete { low: i64, n: usize },
    Continuous { dim: usize, low: f64, high: f64 },
}

impl Head {
    pub fn from_space(space: ActionSpace) -> Self {
        match space {
            ActionSpace::Discrete { low, high } => Head::Discrete {
                low,
                n: (high - low + 1) as usize,
            },
            ActionSpace::Box { dim, low, high } => Head::Continuous { dim, low, high },
        }
    }

    pub fn act_dim(&self) -> usize {
        match self {
            Head::Discrete { .. } => 1,
            Head::Continuous { dim, .. } => *dim,
        }
    }

    fn default_target_entropy(&self) -> f64 {
        match self {
            Head::Discrete { n, .. } => 0.5 * (*n as f64).ln(),
            Head::Continuous { .. } => -1.0,
        }
    }
}

/// A minibatch in normalized observation and reward units with raw actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub act: Array2<f64>,
    pub reward: Array1<f64>,
    pub next_obs: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn summary(&self) -> String {
        let r = &self.reward;
        let max_abs = |a: &Array2<f64>| a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        format!(
            "batch of {}: reward mean {:.4} min {:.4} max {:.4}; max |obs| {:.4}; max |next_obs| {:.4}",
            self.len(),
            r.mean().unwrap_or(f64::NAN),
            r.iter().copied().fold(f64::INFINITY, f64::min),
            r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            max_abs(&self.obs),
            max_abs(&self.next_obs)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    /// Mean policy entropy on the batch before the update.
    pub entropy: f64,
    pub q_mean: f64,
    pub q_std: f64,
}

#[derive(Debug, Clone)]
pub struct Sac {
    config: SacConfig,
    head: Head,
    obs_dim: usize,
    target_entropy: f64,
    actor_store: ParamStore,
    actor: Mlp,
    critic_store: ParamStore,
    q1: Mlp,
    q2: Mlp,
    target_store: ParamStore,
    log_alpha: ParamStore,
    actor_opt: Adam,
    critic_opt: Adam,
    alpha_opt: Adam,
}

impl Sac {
    pub fn new(obs_dim: usize, space: ActionSpace, config: SacConfig, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.gamma) || !(0.0..=1.0).contains(&config.tau) {
            return Err(Error::Config("gamma and tau must lie in [0, 1]".into()));
        }
        if config.init_alpha.is_nan() || config.init_alpha <= 0.0 {
            return Err(Error::Config("init_alpha must be positive".into()));
        }
        let head = Head::from_space(space);
        let (actor_out, critic_in, critic_out) = match head {
            Head::Discrete { n, .. } => (n, obs_dim, n),
            Head::Continuous { dim, .. } => (2 * dim, obs_dim + dim, 1),
        };
        let sizes = |i: usize, o: usize| {
            let mut v = vec![i];
            v.extend(&config.hidden);
            v.push(o);
            v
        };
        let root = SeedStream::new(seed);
        let mut actor_store = ParamStore::new();
        let actor = Mlp::new(&mut actor_store, "actor", &sizes(obs_dim, actor_out), Activation::Relu, false, &mut root.child(0).rng());
        let mut critic_store = ParamStore::new();
        let mut rng = root.child(1).rng();
        let q1 = Mlp::new(&mut critic_store, "q1", &sizes(critic_in, critic_out), Activation::Relu, false, &mut rng);
        let q2 = Mlp::new(&mut critic_store, "q2", &sizes(critic_in, critic_out), Activation::Relu, false, &mut rng);
        let target_store = critic_store.clone();
        let mut log_alpha = ParamStore::new();
        log_alpha.add("log_alpha", Array2::from_elem((1, 1), config.init_alpha.ln()));
        Ok(Self {
            target_entropy: config.target_entropy.unwrap_or_else(|| head.default_target_entropy()),
            actor_opt: Adam::new(&actor_store, AdamConfig::adam(config.actor_lr)),
            critic_opt: Adam::new(&critic_store, AdamConfig::adam(config.critic_lr)),
            alpha_opt: Adam::new(&log_alpha, AdamConfig::adam(config.alpha_lr)),
            config,
            head,
            obs_dim,
            actor_store,
            actor,
            critic_store,
            q1,
            q2,
            target_store,
            log_alpha,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.values()[0][[0, 0]].exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.target_entropy
    }

    /// Actor parameters in store order.
    pub fn actor_params(&self) -> &[Array2<f64>] {
        self.actor_store.values()
    }

    pub fn critic_params(&self) -> &[Array2<f64>] {
        self.critic_store.values()
    }

    pub fn target_params(&self) -> &[Array2<f64>] {
        self.target_store.values()
    }

    /// Raw actions to the `[−1, 1]` tanh range (box) or level indices (discrete).
    fn internal_actions(&self, raw: &Array2<f64>) -> Array2<f64> {
        match self.head {
            Head::Discrete { low, n } => raw.mapv(|a| (a.round() - low as f64).clamp(0.0, (n - 1) as f64)),
            Head::Continuous { low, high, .. } => raw.mapv(|a| (2.0 * (a - low) / (high - low) - 1.0).clamp(-1.0, 1.0)),
        }
    }

    fn raw_actions(&self, internal: &Array2<f64>) -> Array2<f64> {
        match self.head {
            Head::Discrete { low, .. } => internal.mapv(|i| i + low as f64),
            Head::Continuous { low, high, .. } => internal.mapv(|a| low + (a + 1.0) * 0.5 * (high - low)),
        }
    }

    fn log_std(raw: f64) -> f64 {
        LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
    }

    fn log_std_var(raw: Var<'_>) -> Var<'_> {
        raw.tanh().add_scalar(1.0).scale(0.5 * (LOG_STD_MAX - LOG_STD_MIN)).add_scalar(LOG_STD_MIN)
    }

    /// Tanh-Gaussian sample `(a, log π(a))` on the tape; `noise` is standard normal.
    fn gaussian_sample<'t>(&self, p: &Bound<'t>, obs: Var<'t>, noise: &Array2<f64>) -> (Var<'t>, Var<'t>) {
        let tape = obs.tape();
        let d = self.head.act_dim();
        let out = self.actor.forward(p, obs);
        let mean = out.slice_cols(0, d);
        let log_std = Self::log_std_var(out.slice_cols(d, 2 * d));
        let eps = tape.leaf(noise.clone());
        let u = mean + log_std.exp().mul(eps);
        let a = u.tanh();
        // log(1 − tanh²u) = 2(ln 2 − u − softplus(−2u))
        let log_jac = (u.scale(-2.0).softplus() + u).scale(-2.0).add_scalar(2.0 * std::f64::consts::LN_2);
        let base = eps.square().scale(-0.5) - log_std;
        let log_pi = (base - log_jac).add_scalar(-0.5 * LN_2PI).sum_rows();
        (a, log_pi)
    }

    /// Tape-free version of [`Self::gaussian_sample`].
    fn gaussian_sample_array(&self, obs: &Array2<f64>, noise: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let d = self.head.act_dim();
        let out = self.actor.predict(&self.actor_store, obs);
        let n = obs.nrows();
        let mut a = Array2::zeros((n, d));
        let mut log_pi = Array1::zeros(n);
        for i in 0..n {
            for j in 0..d {
                let ls = Self::log_std(out[[i, d + j]]);
                let u = out[[i, j]] + ls.exp() * noise[[i, j]];
                a[[i, j]] = u.tanh();
                let log_jac = 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u));
                log_pi[i] += -0.5 * noise[[i, j]] * noise[[i, j]] - ls - 0.5 * LN_2PI - log_jac;
            }
        }
        (a, log_pi)
    }

    fn log_probs_array(&self, obs: &Array2<f64>) -> Array2<f64> {
        let mut logits = self.actor.predict(&self.actor_store, obs);
        for mut row in logits.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        logits
    }

    fn critic_pair(&self, store: &ParamStore, obs: &Array2<f64>, act: Option<&Array2<f64>>) -> (Array2<f64>, Array2<f64>) {
        let x = match act {
            Some(a) => concatenate(Axis(1), &[obs.view(), a.view()]).expect("same rows"),
            None => obs.clone(),
        };
        (self.q1.predict(store, &x), self.q2.predict(store, &x))
    }

    fn noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, self.head.act_dim()), || StandardNormal.sample(rng))
    }

    /// Soft Bellman target `r + γ·E_{a′∼π}[min Q̄(s′, a′) − α log π(a′|s′)]`.
    /// Draws noise only for box actions.
    pub fn critic_target(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let alpha = self.alpha();
        let v = match self.head {
            Head::Discrete { .. } => {
                let logp = self.log_probs_array(&batch.next_obs);
                let (t1, t2) = self.critic_pair(&self.target_store, &batch.next_obs, None);
                let q = ndarray::Zip::from(&t1).and(&t2).and(&logp).map_collect(|&a, &b, &lp| lp.exp() * (a.min(b) - alpha * lp));
                q.sum_axis(Axis(1))
            }
            Head::Continuous { .. } => {
                let noise = self.noise(batch.len(), rng);
                let (a, log_pi) = self.gaussian_sample_array(&batch.next_obs, &noise);
                let (t1, t2) = self.critic_pair(&self.target_store, &batch.next_obs, Some(&a));
                Array1::from_shape_fn(batch.len(), |i| t1[[i, 0]].min(t2[[i, 0]]) - alpha * log_pi[i])
            }
        };
        &batch.reward + &(v * self.config.gamma)
    }

    fn critic_loss<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &Batch, y: &Array1<f64>) -> (Var<'t>, Var<'t>) {
        let act = self.internal_actions(&batch.act);
        let y = tape.leaf(y.clone().insert_axis(Axis(1)));
        let (q1, q2) = match self.head {
            Head::Discrete { n, .. } => {
                let onehot = tape.leaf(Array2::from_shape_fn((batch.len(), n), |(i, k)| f64::from(act[[i, 0]] as usize == k)));
                let obs = tape.leaf(batch.obs.clone());
                (
                    self.q1.forward(p, obs).mul(onehot).sum_rows(),
                    self.q2.forward(p, obs).mul(onehot).sum_rows(),
                )
            }
            Head::Continuous { .. } => {
                let x = tape.leaf(concatenate(Axis(1), &[batch.obs.view(), act.view()]).expect("same rows"));
                (self.q1.forward(p, x), self.q2.forward(p, x))
            }
        };
        ((q1 - y).square().mean() + (q2 - y).square().mean(), q1)
    }

    /// Actor objective `E[α log π − min Q]` and the mean entropy, on `tape`.
    fn actor_loss<'t>(&self, tape: &'t Tape, pa: &Bound<'t>, pc: &Bound<'t>, obs: &Array2<f64>, noise: &Array2<f64>) -> (Var<'t>, f64) {
        let alpha = self.alpha();
        let x = tape.leaf(obs.clone());
        match self.head {
            Head::Discrete { .. } => {
                let logp = self.actor.forward(pa, x).log_softmax();
                let probs = logp.exp();
                let (q1, q2) = self.critic_pair(&self.critic_store, obs, None);
                let qmin = tape.leaf(ndarray::Zip::from(&q1).and(&q2).map_collect(|&a, &b| a.min(b)));
                let loss = probs.mul(logp.scale(alpha) - qmin).sum_rows().mean();
                let entropy = -probs.mul(logp).sum_rows().mean().item();
                (loss, entropy)
            }
            Head::Continuous { .. } => {
                let (a, log_pi) = self.gaussian_sample(pa, x, noise);
                let xa = Var::concat_cols(&[x, a]);
                let qmin = self.q1.forward(pc, xa).min(self.q2.forward(pc, xa));
                let loss = (log_pi.scale(alpha) - qmin).mean();
                (loss, -log_pi.mean().item())
            }
        }
    }

    /// Actor loss value for fixed `noise`; used by gradient checks.
    pub fn actor_loss_value(&self, obs: &Array2<f64>, noise: &Array2<f64>) -> f64 {
        let tape = Tape::new();
        let pa = self.actor_store.bind(&tape);
        let pc = self.critic_store.bind(&tape);
        self.actor_loss(&tape, &pa, &pc, obs, noise).0.item()
    }

    /// Actor loss gradient with respect to the actor parameters for fixed `noise`.
    pub fn actor_loss_grad(&self, obs: &Array2<f64>, noise: &Array2<f64>) -> Vec<Array2<f64>> {
        let tape = Tape::new();
        let pa = self.actor_store.bind(&tape);
        let pc = self.critic_store.bind(&tape);
        let (loss, _) = self.actor_loss(&tape, &pa, &pc, obs, noise);
        let g = tape.backward(loss);
        self.actor_store.grads(&pa, &g)
    }

    pub fn actor_params_mut(&mut self) -> &mut [Array2<f64>] {
        self.actor_store.values_mut()
    }

    /// One gradient step on the critics, the actor, and the temperature, then
    /// a soft target update.
    pub fn update(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<UpdateStats> {
        let y = self.critic_target(batch, rng);

        let tape = Tape::new();
        let pc = self.critic_store.bind(&tape);
        let (closs, q1) = self.critic_loss(&tape, &pc, batch, &y);
        let critic_loss = closs.item();
        let q = q1.value();
        let g = tape.backward(closs);
        let cgrads = self.critic_store.grads(&pc, &g);
        drop(tape);
        self.critic_opt.step(&mut self.critic_store, &cgrads);

        let noise = self.noise(batch.len(), rng);
        let tape = Tape::new();
        let pa = self.actor_store.bind(&tape);
        let pc = self.critic_store.bind(&tape);
        let (aloss, entropy) = self.actor_loss(&tape, &pa, &pc, &batch.obs, &noise);
        let actor_loss = aloss.item();
        let g = tape.backward(aloss);
        let agrads = self.actor_store.grads(&pa, &g);
        drop(tape);

        if !critic_loss.is_finite() || !actor_loss.is_finite() {
            return Err(Error::Numeric {
                location: "soft actor-critic update".into(),
                detail: format!("critic loss {critic_loss}, actor loss {actor_loss}; {}", batch.summary()),
            });
        }
        self.actor_opt.step(&mut self.actor_store, &agrads);
        // d/d(log α) of −log α·(log π + H̄) is H − H̄.
        let alpha_grad = Array2::from_elem((1, 1), entropy - self.target_entropy);
        self.alpha_opt.step(&mut self.log_alpha, &[alpha_grad]);
        self.target_store.soft_update(&self.critic_store, self.config.tau);

        let q_mean = q.mean().unwrap_or(f64::NAN);
        let q_std = (q.mapv(|v| (v - q_mean).powi(2)).mean().unwrap_or(f64::NAN)).sqrt();
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            alpha: self.alpha(),
            entropy,
            q_mean,
            q_std,
        })
    }

    /// Raw actions for normalized observations; `deterministic` takes the mode.
    pub fn act(&self, obs: &Array2<f64>, deterministic: bool, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let n = obs.nrows();
        let internal = match self.head {
            Head::Discrete { n: k, .. } => {
                let logp = self.log_probs_array(obs);
                Array2::from_shape_fn((n, 1), |(i, _)| {
                    let row = logp.row(i);
                    let pick = if deterministic {
                        (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
                    } else {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        (0..k).find(|&j| {
                            acc += row[j].exp();
                            u < acc
                        })
                        .unwrap_or(k - 1)
                    };
                    pick as f64
                })
            }
            Head::Continuous { dim, .. } => {
                let noise = if deterministic { Array2::zeros((n, dim)) } else { self.noise(n, rng) };
                self.gaussian_sample_array(obs, &noise).0
            }
        };
        self.raw_actions(&internal)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("sac_policy");
        config_to_container(&mut c, &self.config);
        let (kind, a, b) = match self.head {
            Head::Discrete { low, n } => (0.0, low as f64, n as f64),
            Head::Continuous { dim, low, high } => {
                c.put_f64("box_bounds", vec![2], vec![low, high]);
                (1.0, dim as f64, 0.0)
            }
        };
        c.put_f64("head", vec![5], vec![kind, a, b, self.target_entropy, self.obs_dim as f64]);
        store_to_container(&mut c, "actor", &self.actor_store);
        store_to_container(&mut c, "critic", &self.critic_store);
        store_to_container(&mut c, "target", &self.target_store);
        store_to_container(&mut c, "temperature", &self.log_alpha);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("sac_policy")?;
        let config: SacConfig = config_from_container(c)?;
        let (_, h) = c.get_real("head")?;
        let [kind, a, b, target_entropy, obs_dim] = h[..] else {
            return Err(format_err("head", "expected 5 values"));
        };
        let space = if kind == 0.0 {
            ActionSpace::Discrete {
                low: a as i64,
                high: a as i64 + b as i64 - 1,
            }
        } else {
            let (_, bounds) = c.get_real("box_bounds")?;
            ActionSpace::Box {
                dim: a as usize,
                low: bounds[0],
                high: bounds[1],
            }
        };
        let mut sac = Self::new(obs_dim as usize, space, config, 0)?;
        sac.target_entropy = target_entropy;
        store_from_container(c, "actor", &mut sac.actor_store)?;
        store_from_container(c, "critic", &mut sac.critic_store)?;
        store_from_container(c, "target", &mut sac.target_store)?;
        store_from_container(c, "temperature", &mut sac.log_alpha)?;
        Ok(sac)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
