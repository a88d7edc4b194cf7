//! Exact checks of the conservatism bounds on small tabular problems.
//!
//! Returns use the normalized convention `η(π) = (1−γ)·E_{μ0}[V^π]`, the
//! expectation of reward under the normalized discounted occupancy. Values
//! `V^π` stay unnormalized, so `|V| ≤ c = r_max/(1−γ)`.

use ndarray::{Array2, Array3, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::guardian::penalty_u;
use crate::mdp::{exact_return, occupancy, random_simplex, state_values, TabularMdp, TabularPolicy};
use crate::rng::SeedStream;

/// Numerical allowance when a bound is met with equality.
pub const SLACK_TOL: f64 = 1e-10;
/// Required accuracy of the telescoping identity.
pub const TELESCOPING_TOL: f64 = 1e-8;
/// Largest deterministic-policy count enumerated for the optimality gap.
pub const ENUMERATION_BUDGET: usize = 100_000;

/// `sup_{‖f‖∞ ≤ 1} |E_p f − E_q f| = ‖p − q‖₁`, attained at `f = sign(p − q)`.
pub fn ipm_sup_norm(p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Param(format!("rows of length {} and {}", p.len(), q.len())));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
}

/// True MDP, learned model, and densities over `(s′, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularInstance {
    pub seed: u64,
    pub mdp: TabularMdp,
    /// `T̂[s, a, s′]`.
    pub model: Array3<f64>,
    pub model_reward: Array2<f64>,
    /// True density `p[s′, a]`.
    pub density: Array2<f64>,
    /// Estimated density `p_θ[s′, a]`.
    pub density_est: Array2<f64>,
    pub eps_density: f64,
    pub eps_approx: f64,
    pub c_hat: f64,
    pub lambda: f64,
    pub tau: f64,
}

fn penalty_grid(density: &Array2<f64>, tau: f64) -> Array2<f64> {
    density.mapv(|p| penalty_u(p.ln(), tau))
}

impl TabularInstance {
    pub fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    /// `c = r_max / (1−γ)`.
    pub fn c(&self) -> f64 {
        self.mdp.r_max() / (1.0 - self.mdp.gamma())
    }

    /// `u[s′, a]` from the true density.
    pub fn u_true(&self) -> Array2<f64> {
        penalty_grid(&self.density, self.tau)
    }

    /// `û[s′, a]` from the estimated density.
    pub fn u_est(&self) -> Array2<f64> {
        penalty_grid(&self.density_est, self.tau)
    }

    /// `E_{s′∼T̂(s,a)}[u(s′, a)]` for every `(s, a)`.
    pub fn model_expectation(&self, u: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn((self.n_states(), self.n_actions()), |(s, a)| {
            self.model.slice(ndarray::s![s, a, ..]).dot(&u.column(a))
        })
    }

    /// `d_F(T̂(s,a), T(s,a))` for every `(s, a)`.
    pub fn model_error(&self) -> Array2<f64> {
        let t = self.mdp.transition();
        Array2::from_shape_fn((self.n_states(), self.n_actions()), |(s, a)| {
            ipm_sup_norm(self.model.slice(ndarray::s![s, a, ..]), t.slice(ndarray::s![s, a, ..])).expect("same shape")
        })
    }

    /// `(T̂, r)`: the model with the shared true reward.
    pub fn model_mdp(&self) -> Result<TabularMdp> {
        self.mdp.with_transition(self.model.clone())
    }

    /// `(T̂, r̂ − λ·E_{T̂}[û])`.
    pub fn penalized_mdp(&self) -> Result<TabularMdp> {
        let reward = &self.model_reward - &(self.model_expectation(&self.u_est()) * self.lambda);
        self.model_mdp()?.with_reward(reward)
    }

    /// `γ·c·Ĉ`.
    pub fn matched_lambda(&self) -> f64 {
        self.mdp.gamma() * self.c() * self.c_hat
    }

    /// Checks shapes and the three assumptions.
    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states(), self.n_actions());
        if self.model.dim() != (s, a, s) || self.model_reward.dim() != (s, a) {
            return Err(Error::Param("model arrays do not match the MDP".into()));
        }
        if self.density.dim() != (s, a) || self.density_est.dim() != (s, a) {
            return Err(Error::Param("density grids must be S×A over (s′, a)".into()));
        }
        self.model_mdp()?;
        if self.density.iter().chain(&self.density_est).any(|&p| !p.is_finite() || p <= 0.0) {
            return Err(Error::Param("densities must be positive".into()));
        }
        let worst = self
            .density
            .iter()
            .zip(&self.density_est)
            .map(|(p, q)| (p.ln() - q.ln()).abs())
            .fold(0.0f64, f64::max);
        if worst > self.eps_density + SLACK_TOL {
            return Err(Error::Infeasible(format!("log-density error {worst} exceeds ε_density {}", self.eps_density)));
        }
        let eu = self.model_expectation(&self.u_true());
        let err = self.model_error();
        let violations: Vec<String> = ndarray::Zip::indexed(&err)
            .and(&eu)
            .fold(Vec::new(), |mut v, sa, &d, &e| {
                if d > self.c_hat * e + self.eps_approx + SLACK_TOL {
                    v.push(format!("{sa:?}"));
                }
                v
            });
        if !violations.is_empty() {
            return Err(Error::Infeasible(format!("model error bound fails at {}", violations.join(", "))));
        }
        Ok(())
    }
}

/// Smallest `C ≥ 0` with `d_F(T̂(s,a), T(s,a)) ≤ C·E_{T̂}[u] + ε_approx` everywhere.
pub fn fit_c_hat(inst: &TabularInstance) -> Result<f64> {
    let eu = inst.model_expectation(&inst.u_true());
    let err = inst.model_error();
    let mut c = 0.0f64;
    let mut infeasible = Vec::new();
    for ((sa, &d), &e) in err.indexed_iter().zip(&eu) {
        let excess = d - inst.eps_approx;
        if excess <= 0.0 {
            continue;
        }
        if e > 0.0 {
            c = c.max(excess / e);
        } else {
            infeasible.push(format!("{sa:?} (d_F = {d:.3e})"));
        }
    }
    if infeasible.is_empty() {
        Ok(c)
    } else {
        Err(Error::Infeasible(format!(
            "zero expected penalty but model error above ε_approx at {}",
            infeasible.join(", ")
        )))
    }
}

/// Shape and noise ranges for random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceConfig {
    pub gamma_range: (f64, f64),
    pub eps_density_max: f64,
    pub eps_approx_max: f64,
    /// Range of the model-error constant the perturbation is budgeted against.
    pub c_range: (f64, f64),
    /// Percentile range of `log p` used for `τ`.
    pub tau_percentile: (f64, f64),
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            gamma_range: (0.5, 0.95),
            eps_density_max: 0.3,
            eps_approx_max: 0.05,
            c_range: (0.2, 2.0),
            tau_percentile: (20.0, 60.0),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Random instance satisfying the assumptions by construction: the
/// penalty is fixed first, then each model row is moved toward a random
/// distribution only as far as the model-error budget allows.
pub fn generate_instance(seed: u64, n_states: usize, n_actions: usize, config: &InstanceConfig) -> Result<TabularInstance> {
    if n_states < 1 || n_actions < 1 {
        return Err(Error::Param("need at least one state and one action".into()));
    }
    let root = SeedStream::new(seed);
    let mut rng = root.child(0).rng();
    let gamma = uniform(&mut rng, config.gamma_range);
    let mdp = TabularMdp::random(root.child(1).raw(), n_states, n_actions, gamma)?;

    // Cubed exponentials spread the mass so some cells sit far below τ.
    let raw = Array2::from_shape_simple_fn((n_states, n_actions), || {
        let e: f64 = Exp1.sample(&mut rng);
        e.powi(3) + 1e-6
    });
    let density = &raw / raw.sum();
    let logs: Vec<f64> = density.iter().map(|p| p.ln()).collect();
    let tau = crate::density::percentile(&logs, uniform(&mut rng, config.tau_percentile));

    let eps = uniform(&mut rng, (0.0, config.eps_density_max));
    let noisy = density.mapv(|p| p * (eps * rng.random_range(-1.0..=1.0)).exp());
    let density_est = &noisy / noisy.sum();
    let eps_density = density
        .iter()
        .zip(&density_est)
        .map(|(p, q)| (p.ln() - q.ln()).abs())
        .fold(0.0f64, f64::max);

    let eps_approx = uniform(&mut rng, (0.0, config.eps_approx_max));
    let budget_c = uniform(&mut rng, config.c_range);
    let u = penalty_grid(&density, tau);
    let t = mdp.transition();
    let mut model = t.clone();
    for s in 0..n_states {
        for a in 0..n_actions {
            let q = ndarray::Array1::from(random_simplex(&mut rng, n_states));
            let row = t.slice(ndarray::s![s, a, ..]);
            let d = ipm_sup_norm(q.view(), row)?;
            let (e_t, e_q) = (row.dot(&u.column(a)), q.dot(&u.column(a)));
            // w·d ≤ C((1−w)e_t + w·e_q) + ε_approx, linear in the mixing weight w.
            let k = d - budget_c * (e_q - e_t);
            // The margin keeps rows with no expected penalty strictly feasible after rounding.
            let w_max = if k <= 0.0 { 1.0 } else { ((budget_c * e_t + eps_approx) / k).min(1.0) } * (1.0 - 1e-9);
            let w = if rng.random_bool(0.3) { w_max } else { w_max * rng.random::<f64>() };
            let mixed = &row * (1.0 - w) + &q * w;
            let mixed = &mixed / mixed.sum();
            model.slice_mut(ndarray::s![s, a, ..]).assign(&mixed);
        }
    }

    let mut inst = TabularInstance {
        seed,
        model_reward: mdp.reward().clone(),
        mdp,
        model,
        density,
        density_est,
        eps_density,
        eps_approx,
        c_hat: 0.0,
        lambda: 0.0,
        tau,
    };
    inst.c_hat = fit_c_hat(&inst)?;
    inst.lambda = inst.matched_lambda();
    inst.validate()?;
    Ok(inst)
}

/// Uniform shape with `2 ≤ S ≤ max_states`, `2 ≤ A ≤ max_actions`.
pub fn random_shape(seed: u64, max_states: usize, max_actions: usize) -> (usize, usize) {
    let mut rng = SeedStream::new(seed).child(99).rng();
    (rng.random_range(2..=max_states.max(2)), rng.random_range(2..=max_actions.max(2)))
}

fn normalized_return(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    Ok((1.0 - mdp.gamma()) * exact_return(mdp, pi)?)
}

/// `(η_M̂ − η_M) − γ·E_{ρ̂}[G]` with `G(s,a) = E_{T̂}[V_M] − E_T[V_M]`.
pub fn check_telescoping(inst: &TabularInstance, pi: &TabularPolicy) -> Result<f64> {
    let model = inst.model_mdp()?;
    let gap = normalized_return(&model, pi)? - normalized_return(&inst.mdp, pi)?;
    let v = state_values(&inst.mdp, pi)?;
    let t = inst.mdp.transition();
    let g = Array2::from_shape_fn((inst.n_states(), inst.n_actions()), |(s, a)| {
        (&inst.model.slice(ndarray::s![s, a, ..]) - &t.slice(ndarray::s![s, a, ..])).dot(&v)
    });
    let rhs = inst.mdp.gamma() * occupancy(&model, pi)?.expect(&g);
    Ok(gap - rhs)
}

/// Largest observed `|u(x) − u(y)| / |x − y|` over random log-density pairs
/// within a random `ε` of each other.
pub fn check_lipschitz_penalty(n_samples: usize, seed: u64) -> f64 {
    let mut rng = SeedStream::new(seed).rng();
    let tau = 0.0;
    (0..n_samples)
        .filter_map(|_| {
            let eps = rng.random_range(0.0..2.0);
            let x = rng.random_range(tau - 10.0..tau + 5.0);
            let y = x + rng.random_range(-eps..=eps);
            (x != y).then(|| (penalty_u(x, tau) - penalty_u(y, tau)).abs() / (x - y).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub holds: bool,
    /// Left side minus right side.
    pub slack: f64,
}

impl BoundCheck {
    fn from_slack(slack: f64) -> Self {
        Self { holds: slack >= -SLACK_TOL, slack }
    }
}

/// `η_M(π) ≥ η_M̃(π) − γ·c·ε_approx − λ·ε_density`.
pub fn check_theorem1(inst: &TabularInstance, pi: &TabularPolicy) -> Result<BoundCheck> {
    let lhs = normalized_return(&inst.mdp, pi)?;
    let penalized = normalized_return(&inst.penalized_mdp()?, pi)?;
    let rhs = penalized - inst.mdp.gamma() * inst.c() * inst.eps_approx - inst.lambda * inst.eps_density;
    Ok(BoundCheck::from_slack(lhs - rhs))
}

/// Per-policy quantities for the optimality gap.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PolicyScore {
    /// `η_M(π)`.
    true_return: f64,
    /// `E_{ρ̂}[r̂ − λ·E_{T̂}[û]]`.
    penalized: f64,
    /// `E_{ρ̂}[E_{T̂}[u]]` with the true penalty.
    penalty: f64,
}

/// Every deterministic policy of an instance, plus sampled stochastic ones.
#[derive(Debug, Clone)]
pub struct PolicyTable {
    deterministic: Vec<PolicyScore>,
    stochastic: Vec<PolicyScore>,
    lambda: f64,
    eps_density: f64,
    approx_term: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    pub delta: f64,
    pub delta_min: f64,
    /// `None` when `δ < δ_min`: the bound makes no claim there.
    pub verdict: Option<BoundCheck>,
    /// Candidate policies inside the relaxed constraint set.
    pub n_feasible: usize,
}

impl PolicyTable {
    /// Enumerates all `A^S` deterministic policies and `n_stochastic` random
    /// stochastic ones. The constrained maximum is taken over both, so it is
    /// a lower bound on the maximum over all policies.
    pub fn new(inst: &TabularInstance, n_stochastic: usize) -> Result<Self> {
        let (s, a) = (inst.n_states(), inst.n_actions());
        let count = (0..s).try_fold(1usize, |acc, _| acc.checked_mul(a).filter(|&c| c <= ENUMERATION_BUDGET));
        let count = count.ok_or_else(|| Error::Param(format!("{a}^{s} deterministic policies exceed the enumeration budget")))?;
        let model = inst.model_mdp()?;
        let penalized_reward = &inst.model_reward - &(inst.model_expectation(&inst.u_est()) * inst.lambda);
        let true_penalty = inst.model_expectation(&inst.u_true());
        let score = |pi: &TabularPolicy| -> Result<PolicyScore> {
            let occ = occupancy(&model, pi)?;
            Ok(PolicyScore {
                true_return: normalized_return(&inst.mdp, pi)?,
                penalized: occ.expect(&penalized_reward),
                penalty: occ.expect(&true_penalty),
            })
        };
        let deterministic = (0..count)
            .map(|mut code| {
                let actions: Vec<usize> = (0..s)
                    .map(|_| {
                        let act = code % a;
                        code /= a;
                        act
                    })
                    .collect();
                score(&TabularPolicy::deterministic(&actions, a)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = SeedStream::new(inst.seed).child(7).rng();
        let stochastic = (0..n_stochastic)
            .map(|_| score(&TabularPolicy::random(&mut rng, s, a)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            deterministic,
            stochastic,
            lambda: inst.lambda,
            eps_density: inst.eps_density,
            approx_term: 2.0 * inst.mdp.gamma() * inst.c() * inst.eps_approx,
        })
    }

    /// `min_π E_{ρ̂}[E_{T̂}[u]]`, exact because the minimum of a linear
    /// function of the occupancy is attained by a deterministic policy.
    pub fn delta_min(&self) -> f64 {
        self.deterministic.iter().map(|p| p.penalty).fold(f64::INFINITY, f64::min)
    }

    pub fn delta_max(&self) -> f64 {
        self.deterministic.iter().map(|p| p.penalty).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `n` evenly spaced values from `δ_min` to the largest policy penalty.
    pub fn delta_grid(&self, n: usize) -> Vec<f64> {
        let (lo, hi) = (self.delta_min(), self.delta_max());
        match n {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
        }
    }

    /// `η_M(π̂) ≥ max_{π: E[u] ≤ δ+ε} η_M(π) − 2λδ − 4λε_density − 2γc·ε_approx`.
    pub fn check(&self, delta: f64) -> GapCheck {
        let delta_min = self.delta_min();
        if delta < delta_min {
            return GapCheck {
                delta,
                delta_min,
                verdict: None,
                n_feasible: 0,
            };
        }
        let chosen = self
            .deterministic
            .iter()
            .max_by(|a, b| a.penalized.total_cmp(&b.penalized))
            .expect("at least one policy");
        let limit = delta + self.eps_density;
        let feasible: Vec<&PolicyScore> = self.deterministic.iter().chain(&self.stochastic).filter(|p| p.penalty <= limit).collect();
        let best = feasible.iter().map(|p| p.true_return).fold(f64::NEG_INFINITY, f64::max);
        let rhs = best - 2.0 * self.lambda * delta - 4.0 * self.lambda * self.eps_density - self.approx_term;
        GapCheck {
            delta,
            delta_min,
            verdict: Some(BoundCheck::from_slack(chosen.true_return - rhs)),
            n_feasible: feasible.len(),
        }
    }
}

/// Stochastic policies added to the constrained search per instance.
pub const STOCHASTIC_CANDIDATES: usize = 64;

pub fn check_theorem2(inst: &TabularInstance, delta: f64) -> Result<GapCheck> {
    Ok(PolicyTable::new(inst, STOCHASTIC_CANDIDATES)?.check(delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Telescoping,
    Theorem1,
    Theorem2,
}

/// One line of the verdict table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub instance_seed: u64,
    pub check: CheckKind,
    pub n_states: usize,
    pub n_actions: usize,
    /// Policy index for per-policy checks.
    pub policy: Option<usize>,
    pub delta: Option<f64>,
    pub holds: bool,
    /// Bound slack, or the residual for the telescoping identity.
    pub value: f64,
    pub vacuous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub theorem1_instances: usize,
    pub policies_per_instance: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub theorem2_instances: usize,
    pub deltas: usize,
    pub tiny_max_states: usize,
    pub tiny_max_actions: usize,
    pub instance: InstanceConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            theorem1_instances: 200,
            policies_per_instance: 10,
            max_states: 10,
            max_actions: 4,
            theorem2_instances: 50,
            deltas: 5,
            tiny_max_states: 5,
            tiny_max_actions: 3,
            instance: InstanceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<VerdictRow>,
}

impl SuiteReport {
    pub fn violations(&self) -> impl Iterator<Item = &VerdictRow> {
        self.rows.iter().filter(|r| !r.holds && !r.vacuous)
    }

    pub fn all_hold(&self) -> bool {
        self.violations().next().is_none()
    }

    pub fn max_residual(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.check == CheckKind::Telescoping)
            .map(|r| r.value.abs())
            .fold(0.0, f64::max)
    }

    pub fn count(&self, check: CheckKind) -> usize {
        self.rows.iter().filter(|r| r.check == check).count()
    }
}

/// Policies for the per-policy checks: one uniform, then alternating random
/// deterministic and random stochastic.
fn suite_policies(seed: u64, s: usize, a: usize, n: usize) -> Vec<TabularPolicy> {
    let mut rng = SeedStream::new(seed).child(5).rng();
    (0..n)
        .map(|i| match i {
            0 => TabularPolicy::uniform(s, a),
            _ if i % 2 == 1 => {
                let actions: Vec<usize> = (0..s).map(|_| rng.random_range(0..a)).collect();
                TabularPolicy::deterministic(&actions, a).expect("in range")
            }
            _ => TabularPolicy::random(&mut rng, s, a),
        })
        .collect()
}

fn instance_rows(seed: u64, max_s: usize, max_a: usize, config: &SuiteConfig, gap: bool) -> Result<Vec<VerdictRow>> {
    let (s, a) = random_shape(seed, max_s, max_a);
    let inst = generate_instance(seed, s, a, &config.instance)?;
    let row = |check, policy, delta, holds, value, vacuous| VerdictRow {
        instance_seed: seed,
        check,
        n_states: s,
        n_actions: a,
        policy,
        delta,
        holds,
        value,
        vacuous,
    };
    let mut rows = Vec::new();
    for (i, pi) in suite_policies(seed, s, a, config.policies_per_instance).iter().enumerate() {
        let res = check_telescoping(&inst, pi)?;
        rows.push(row(CheckKind::Telescoping, Some(i), None, res.abs() < TELESCOPING_TOL, res, false));
        if !gap {
            let b = check_theorem1(&inst, pi)?;
            rows.push(row(CheckKind::Theorem1, Some(i), None, b.holds, b.slack, false));
        }
    }
    if gap {
        let table = PolicyTable::new(&inst, STOCHASTIC_CANDIDATES)?;
        for delta in table.delta_grid(config.deltas) {
            let g = table.check(delta);
            let (holds, slack) = g.verdict.map_or((true, f64::NAN), |v| (v.holds, v.slack));
            rows.push(row(CheckKind::Theorem2, None, Some(delta), holds, slack, g.verdict.is_none()));
        }
    }
    Ok(rows)
}

/// Return bound and telescoping on `theorem1_instances` instances; policy
/// gap bound and telescoping on `theorem2_instances` tiny ones. Instance `i` of the
/// first group uses seed `path[seed, 1, i]`, of the second `path[seed, 2, i]`.
pub fn run_suite(config: &SuiteConfig, seed: u64, exec: Exec) -> Result<SuiteReport> {
    let root = SeedStream::new(seed);
    let first = exec.try_map(config.theorem1_instances, |i| {
        instance_rows(root.path(&[1, i as u64]).raw(), config.max_states, config.max_actions, config, false)
    })?;
    let second = exec.try_map(config.theorem2_instances, |i| {
        instance_rows(root.path(&[2, i as u64]).raw(), config.tiny_max_states, config.tiny_max_actions, config, true)
    })?;
    Ok(SuiteReport {
        rows: first.into_iter().chain(second).flatten().collect(),
    })
}

impl TabularInstance {
    /// Instance whose model equals the true MDP and whose estimate is exact.
    pub fn exact(mdp: TabularMdp, density: Array2<f64>, tau: f64, lambda: f64) -> Result<Self> {
        let total = density.sum();
        let density = density / total;
        let inst = Self {
            seed: 0,
            model: mdp.transition().clone(),
            model_reward: mdp.reward().clone(),
            density_est: density.clone(),
            density,
            mdp,
            eps_density: 0.0,
            eps_approx: 0.0,
            c_hat: 0.0,
            lambda,
            tau,
        };
        inst.validate()?;
        Ok(inst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_ipm(p: &[f64], q: &[f64]) -> f64 {
        (0..1usize << p.len())
            .map(|mask| {
                let f = |i: usize| if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
                (0..p.len()).map(|i| f(i) * (p[i] - q[i])).sum::<f64>().abs()
            })
            .fold(0.0, f64::max)
    }

    fn small(seed: u64) -> TabularInstance {
        let (s, a) = random_shape(seed, 6, 3);
        generate_instance(seed, s, a, &InstanceConfig::default()).unwrap()
    }

    #[test]
    fn ipm_examples() {
        let p = ndarray::arr1(&[0.2, 0.3, 0.5]);
        assert_eq!(ipm_sup_norm(p.view(), p.view()).unwrap(), 0.0);
        assert_eq!(ipm_sup_norm(ndarray::arr1(&[1.0, 0.0]).view(), ndarray::arr1(&[0.0, 1.0]).view()).unwrap(), 2.0);
        assert!(ipm_sup_norm(p.view(), ndarray::arr1(&[1.0]).view()).is_err());
    }

    #[test]
    fn c_hat_limits_and_minimality() {
        let inst = small(3);
        let exact = TabularInstance::exact(inst.mdp.clone(), inst.density.clone(), inst.tau, 0.5).unwrap();
        assert_eq!(fit_c_hat(&exact).unwrap(), 0.0);
        let absorbed = TabularInstance {
            eps_approx: inst.model_error().iter().copied().fold(0.0, f64::max),
            ..inst.clone()
        };
        assert_eq!(fit_c_hat(&absorbed).unwrap(), 0.0);

        for seed in 0..20 {
            let inst = small(seed);
            if inst.c_hat == 0.0 {
                continue;
            }
            let eu = inst.model_expectation(&inst.u_true());
            let err = inst.model_error();
            let tight = err
                .iter()
                .zip(&eu)
                .map(|(d, e)| (inst.c_hat * e + inst.eps_approx - d).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(tight < 1e-10, "seed {seed}: no active constraint ({tight})");
            let smaller = TabularInstance { c_hat: inst.c_hat - 1e-6, ..inst.clone() };
            let violated = err.iter().zip(&eu).any(|(d, e)| *d > smaller.c_hat * e + smaller.eps_approx);
            assert!(violated, "seed {seed}: Ĉ is not minimal");
        }
    }

    #[test]
    fn infeasible_pairs_are_reported() {
        let mut inst = small(4);
        inst.tau = f64::NEG_INFINITY;
        inst.eps_approx = 0.0;
        assert!(inst.model_error().iter().any(|&d| d > 0.0));
        assert!(matches!(fit_c_hat(&inst), Err(Error::Infeasible(_))));
    }

    #[test]
    fn telescoping_on_random_instances() {
        let mut rng = SeedStream::new(0).rng();
        for seed in 0..20 {
            let inst = small(100 + seed);
            for _ in 0..5 {
                let pi = TabularPolicy::random(&mut rng, inst.n_states(), inst.n_actions());
                let res = check_telescoping(&inst, &pi).unwrap();
                assert!(res.abs() < TELESCOPING_TOL, "seed {seed}: residual {res}");
            }
        }
        let exact = TabularInstance::exact(small(1).mdp, small(1).density, 0.0, 0.0).unwrap();
        let pi = TabularPolicy::uniform(exact.n_states(), exact.n_actions());
        assert_eq!(check_telescoping(&exact, &pi).unwrap(), 0.0);
    }

    #[test]
    fn exact_model_slack_is_the_penalty() {
        let base = small(5);
        let inst = TabularInstance::exact(base.mdp.clone(), base.density.clone(), base.tau, 0.7).unwrap();
        let pi = TabularPolicy::uniform(inst.n_states(), inst.n_actions());
        let b = check_theorem1(&inst, &pi).unwrap();
        let occ = occupancy(&inst.mdp, &pi).unwrap();
        let expected = 0.7 * occ.expect(&inst.model_expectation(&inst.u_true()));
        assert!(b.holds && expected > 0.0);
        assert!((b.slack - expected).abs() < 1e-12);
    }

    #[test]
    fn theorem1_on_random_instances() {
        for seed in 0..30 {
            let inst = small(200 + seed);
            for pi in suite_policies(seed, inst.n_states(), inst.n_actions(), 10) {
                let b = check_theorem1(&inst, &pi).unwrap();
                assert!(b.holds, "seed {seed}: slack {}", b.slack);
            }
        }
    }

    #[test]
    fn underweighted_penalty_can_fail() {
        // Search for a violation with λ = 0 on aggressively perturbed models.
        let config = InstanceConfig {
            c_range: (5.0, 10.0),
            eps_approx_max: 0.0,
            ..InstanceConfig::default()
        };
        let found = (0..200).any(|seed| {
            let (s, a) = random_shape(seed, 6, 3);
            let inst = TabularInstance {
                lambda: 0.0,
                ..generate_instance(seed, s, a, &config).unwrap()
            };
            suite_policies(seed, s, a, 10)
                .iter()
                .any(|pi| !check_theorem1(&inst, pi).unwrap().holds)
        });
        assert!(found, "no counterexample with λ = 0");
    }

    #[test]
    fn theorem2_on_tiny_instances() {
        for seed in 0..10 {
            let (s, a) = random_shape(300 + seed, 4, 3);
            let inst = generate_instance(300 + seed, s, a, &InstanceConfig::default()).unwrap();
            let table = PolicyTable::new(&inst, 16).unwrap();
            for delta in table.delta_grid(5) {
                let g = table.check(delta);
                let v = g.verdict.expect("δ ≥ δ_min");
                assert!(v.holds, "seed {seed} δ {delta}: slack {}", v.slack);
                assert!(g.n_feasible >= 1);
            }
            assert!(table.check(table.delta_min() - 1e-3).verdict.is_none());
        }
    }

    #[test]
    fn error_free_gap_is_nonnegative() {
        let base = small(9);
        let inst = TabularInstance::exact(base.mdp.clone(), base.density.clone(), base.tau, 0.0).unwrap();
        let table = PolicyTable::new(&inst, 0).unwrap();
        let g = table.check(table.delta_max());
        // With λ = 0 and no errors, π̂ is optimal in the true MDP.
        assert!(g.verdict.unwrap().slack >= -SLACK_TOL);
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let inst = generate_instance(1, 10, 4, &InstanceConfig::default()).unwrap();
        assert!(matches!(PolicyTable::new(&inst, 0), Err(Error::Param(_))));
    }

    #[test]
    fn penalty_is_one_lipschitz() {
        assert!(check_lipschitz_penalty(100_000, 0) <= 1.0);
        assert_eq!(penalty_u(-3.0, 0.0) - penalty_u(-3.0, 0.0), 0.0);
        assert!((penalty_u(-25.0, 0.0) - penalty_u(-40.0, 0.0)).abs() < 1e-8);
    }

    #[test]
    fn suite_is_reproducible_across_modes() {
        let config = SuiteConfig {
            theorem1_instances: 6,
            theorem2_instances: 3,
            ..SuiteConfig::default()
        };
        let a = run_suite(&config, 4, Exec::Parallel).unwrap();
        let b = run_suite(&config, 4, Exec::Sequential).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        assert!(a.all_hold());
        assert_eq!(a.count(CheckKind::Theorem1), 60);
        assert_eq!(a.count(CheckKind::Theorem2), 15);
        assert!(a.max_residual() < TELESCOPING_TOL);
    }

    proptest! {
        #[test]
        fn ipm_matches_sign_enumeration(seed in 0u64..10_000, n in 1usize..=10) {
            let mut rng = SeedStream::new(seed).rng();
            let p = random_simplex(&mut rng, n);
            let q = random_simplex(&mut rng, n);
            let fast = ipm_sup_norm(ndarray::aview1(&p), ndarray::aview1(&q)).unwrap();
            prop_assert!((fast - brute_ipm(&p, &q)).abs() < 1e-12);
        }

        #[test]
        fn estimated_penalty_within_density_error(seed in 0u64..10_000) {
            let inst = small(seed);
            let worst = (&inst.u_true() - &inst.u_est()).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            prop_assert!(worst <= inst.eps_density + 1e-15);
        }
    }
}
