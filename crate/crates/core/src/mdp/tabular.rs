use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Uniform};

use crate::error::{param, Error, Result};
use crate::exec::Exec;
use crate::rng::SeedStream;

const ROW_TOL: f64 = 1e-12;

fn check_simplex(row: impl IntoIterator<Item = f64>, what: &str) -> Result<()> {
    let mut sum = 0.0;
    for p in row {
        if !p.is_finite() || p < 0.0 {
            return param(format!("{what} has an invalid probability {p}"));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_TOL {
        return param(format!("{what} sums to {sum}"));
    }
    Ok(())
}

pub(crate) fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let mut row: Vec<f64> = draws.iter().map(|d| d / total).collect();
    // Put the rounding residue on the largest entry so the row sums to 1 to the last ulp.
    let resid = 1.0 - row.iter().sum::<f64>();
    let imax = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
    row[imax] += resid;
    row
}

/// Finite MDP `(S, A, T, r, μ0, γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    transition: Array3<f64>,
    reward: Array2<f64>,
    initial: Array1<f64>,
    gamma: f64,
    r_max: f64,
}

impl TabularMdp {
    pub fn new(transition: Array3<f64>, reward: Array2<f64>, initial: Array1<f64>, gamma: f64) -> Result<Self> {
        let r_max = reward.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        Self::with_bound(transition, reward, initial, gamma, r_max)
    }

    /// Like [`TabularMdp::new`] with an explicit reward bound `r_max ≥ max |r|`.
    pub fn with_bound(
        transition: Array3<f64>,
        reward: Array2<f64>,
        initial: Array1<f64>,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self> {
        let (s, a, s2) = transition.dim();
        if s == 0 || a == 0 || s2 != s {
            return param(format!("transition shape {:?} is not S×A×S", transition.dim()));
        }
        if reward.dim() != (s, a) {
            return param(format!("reward shape {:?}, expected {:?}", reward.dim(), (s, a)));
        }
        if initial.len() != s {
            return param(format!("initial distribution has {} entries, expected {s}", initial.len()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return param(format!("gamma {gamma} outside (0, 1)"));
        }
        for si in 0..s {
            for ai in 0..a {
                check_simplex(
                    transition.slice(ndarray::s![si, ai, ..]).iter().copied(),
                    &format!("T({si}, {ai})"),
                )?;
            }
        }
        check_simplex(initial.iter().copied(), "initial distribution")?;
        if reward.iter().any(|r| !r.is_finite() || r.abs() > r_max + 1e-12) {
            return param("reward exceeds r_max or is not finite");
        }
        Ok(Self {
            transition,
            reward,
            initial,
            gamma,
            r_max,
        })
    }

    /// Random instance with Dirichlet(1) rows and rewards uniform on `[-1, 1]`.
    pub fn random(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> Result<Self> {
        if n_states < 2 || n_actions < 2 {
            return param(format!("need at least 2 states and 2 actions, got {n_states}×{n_actions}"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return param(format!("gamma {gamma} outside (0, 1)"));
        }
        let mut rng = SeedStream::new(seed).rng();
        let mut transition = Array3::zeros((n_states, n_actions, n_states));
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = random_simplex(&mut rng, n_states);
                transition.slice_mut(ndarray::s![s, a, ..]).assign(&Array1::from(row));
            }
        }
        let unif = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        let reward = Array2::from_shape_fn((n_states, n_actions), |_| unif.sample(&mut rng));
        let initial = Array1::from(random_simplex(&mut rng, n_states));
        Self::with_bound(transition, reward, initial, gamma, 1.0)
    }

    pub fn n_states(&self) -> usize {
        self.reward.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.reward.ncols()
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    pub fn initial(&self) -> &Array1<f64> {
        &self.initial
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// Same MDP with another transition kernel (e.g. a learned model `T̂`).
    pub fn with_transition(&self, transition: Array3<f64>) -> Result<Self> {
        Self::with_bound(transition, self.reward.clone(), self.initial.clone(), self.gamma, self.r_max)
    }

    /// Same MDP with another reward; the bound is widened if needed.
    pub fn with_reward(&self, reward: Array2<f64>) -> Result<Self> {
        let bound = reward.iter().fold(self.r_max, |m, r| m.max(r.abs()));
        Self::with_bound(self.transition.clone(), reward, self.initial.clone(), self.gamma, bound)
    }
}

/// Stochastic tabular policy `π(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (s, row) in probs.axis_iter(Axis(0)).enumerate() {
            check_simplex(row.iter().copied(), &format!("π(·|{s})"))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return param(format!("action {a} out of range for {n_actions} actions"));
            }
            probs[[s, a]] = 1.0;
        }
        Ok(Self { probs })
    }

    pub fn random(rng: &mut impl Rng, n_states: usize, n_actions: usize) -> Self {
        let mut probs = Array2::zeros((n_states, n_actions));
        for s in 0..n_states {
            probs.row_mut(s).assign(&Array1::from(random_simplex(rng, n_actions)));
        }
        Self { probs }
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    fn check(&self, mdp: &TabularMdp) -> Result<()> {
        if self.probs.dim() != (mdp.n_states(), mdp.n_actions()) {
            return param(format!(
                "policy shape {:?} does not match MDP {}×{}",
                self.probs.dim(),
                mdp.n_states(),
                mdp.n_actions()
            ));
        }
        Ok(())
    }
}

/// `P_π(s, s') = Σ_a π(a|s) T(s'|s,a)`.
pub fn policy_transition(mdp: &TabularMdp, pi: &TabularPolicy) -> Array2<f64> {
    let (s, a) = (mdp.n_states(), mdp.n_actions());
    let mut p = Array2::zeros((s, s));
    for si in 0..s {
        for ai in 0..a {
            let w = pi.probs[[si, ai]];
            if w != 0.0 {
                p.row_mut(si)
                    .scaled_add(w, &mdp.transition.slice(ndarray::s![si, ai, ..]));
            }
        }
    }
    p
}

/// `r_π(s) = Σ_a π(a|s) r(s,a)`.
pub fn policy_reward(mdp: &TabularMdp, pi: &TabularPolicy) -> Array1<f64> {
    (&pi.probs * &mdp.reward).sum_axis(Axis(1))
}

fn solve(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<Array1<f64>> {
    a.lu()
        .solve(&b)
        .map(|x| Array1::from(x.as_slice().to_vec()))
        .ok_or_else(|| Error::Numeric {
            location: what.into(),
            detail: "singular linear system".into(),
        })
}

/// `V^π` from the direct solve of `(I − γP_π) V = r_π`.
pub fn state_values(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Array1<f64>> {
    pi.check(mdp)?;
    let n = mdp.n_states();
    let p = policy_transition(mdp, pi);
    let r = policy_reward(mdp, pi);
    let a = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - mdp.gamma * p[[i, j]]);
    solve(a, DVector::from_vec(r.to_vec()), "state_values")
}

/// `Q^π(s,a) = r(s,a) + γ Σ_s' T(s'|s,a) V^π(s')`.
pub fn action_values(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Array2<f64>> {
    let v = state_values(mdp, pi)?;
    Ok(q_from_v(mdp, &v))
}

pub fn q_from_v(mdp: &TabularMdp, v: &Array1<f64>) -> Array2<f64> {
    let mut q = mdp.reward.clone();
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            q[[s, a]] += mdp.gamma * mdp.transition.slice(ndarray::s![s, a, ..]).dot(v);
        }
    }
    q
}

/// Max-norm residual of the Bellman evaluation equation at `v`.
pub fn bellman_residual(mdp: &TabularMdp, pi: &TabularPolicy, v: &Array1<f64>) -> f64 {
    let p = policy_transition(mdp, pi);
    let r = policy_reward(mdp, pi);
    let rhs = &r + &(p.dot(v) * mdp.gamma);
    (&rhs - v).iter().fold(0.0f64, |m, d| m.max(d.abs()))
}

/// Expected discounted return `η = E_{s0∼μ0}[V^π(s0)]` (unnormalized).
pub fn exact_return(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    Ok(mdp.initial.dot(&state_values(mdp, pi)?))
}

/// Discounted occupancy `ρ^π(s,a) = Σ_t γ^t P(s_t=s, a_t=a)`, total mass `1/(1−γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    rho: Array2<f64>,
    gamma: f64,
}

impl Occupancy {
    pub fn unnormalized(&self) -> &Array2<f64> {
        &self.rho
    }

    /// `(1−γ)ρ`, a probability distribution over `(s, a)`.
    pub fn normalized(&self) -> Array2<f64> {
        &self.rho * (1.0 - self.gamma)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `Σ ρ(s,a) f(s,a)` with the unnormalized measure.
    pub fn integrate(&self, f: &Array2<f64>) -> f64 {
        (&self.rho * f).sum()
    }

    /// Expectation of `f` under the normalized measure.
    pub fn expect(&self, f: &Array2<f64>) -> f64 {
        self.integrate(f) * (1.0 - self.gamma)
    }
}

pub fn occupancy(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Occupancy> {
    pi.check(mdp)?;
    let n = mdp.n_states();
    let p = policy_transition(mdp, pi);
    let a = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - mdp.gamma * p[[j, i]]);
    let d = solve(a, DVector::from_vec(mdp.initial.to_vec()), "occupancy")?;
    let rho = &pi.probs * &d.insert_axis(Axis(1));
    Ok(Occupancy { rho, gamma: mdp.gamma })
}

fn sample_index(rng: &mut impl Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Mean and standard error of the truncated discounted return over sampled episodes.
pub fn monte_carlo_return(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    episodes: usize,
    horizon: usize,
    seed: u64,
    exec: Exec,
) -> (f64, f64) {
    const CHUNK: usize = 1024;
    let root = SeedStream::new(seed);
    let parts = exec.map_chunks(episodes, CHUNK, |c, start, end| {
        let mut rng = root.child(c as u64).rng();
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in start..end {
            let mut s = sample_index(&mut rng, mdp.initial.iter().copied());
            let (mut g, mut disc) = (0.0, 1.0);
            for _ in 0..horizon {
                let a = sample_index(&mut rng, pi.probs.row(s).iter().copied());
                g += disc * mdp.reward[[s, a]];
                disc *= mdp.gamma;
                s = sample_index(&mut rng, mdp.transition.slice(ndarray::s![s, a, ..]).iter().copied());
            }
            sum += g;
            sq += g * g;
        }
        (sum, sq)
    });
    let (sum, sq) = parts.iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let n = episodes as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn single_state(r: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(Array3::ones((1, 1, 1)), array![[r]], array![1.0], gamma).unwrap()
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let a = TabularMdp::random(0, 3, 2, 0.9).unwrap();
        let b = TabularMdp::random(0, 3, 2, 0.9).unwrap();
        let c = TabularMdp::random(1, 3, 2, 0.9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.transition(), c.transition());
        assert_eq!(a.r_max(), 1.0);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(TabularMdp::random(0, 1, 2, 0.9).is_err());
        assert!(TabularMdp::random(0, 3, 1, 0.9).is_err());
        assert!(TabularMdp::random(0, 3, 2, 1.0).is_err());
        assert!(TabularMdp::random(0, 3, 2, 0.0).is_err());
        let mdp = TabularMdp::random(0, 3, 2, 0.9).unwrap();
        assert!(exact_return(&mdp, &TabularPolicy::uniform(2, 2)).is_err());
    }

    #[test]
    fn geometric_series_and_zero_reward() {
        let pi = TabularPolicy::uniform(1, 1);
        assert!((exact_return(&single_state(1.0, 0.9), &pi).unwrap() - 10.0).abs() < 1e-12);
        let mdp = TabularMdp::random(3, 4, 2, 0.9).unwrap();
        let zero = mdp.with_reward(Array2::zeros((4, 2))).unwrap();
        assert_eq!(exact_return(&zero, &TabularPolicy::uniform(4, 2)).unwrap(), 0.0);
    }

    #[test]
    fn single_state_occupancy_mass() {
        let occ = occupancy(&single_state(0.0, 0.5), &TabularPolicy::uniform(1, 1)).unwrap();
        assert!((occ.unnormalized()[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((occ.normalized().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_two_state_equal_occupancy() {
        // Each action moves to the other state; the start is uniform.
        let mut t = Array3::zeros((2, 2, 2));
        for a in 0..2 {
            t[[0, a, 1]] = 1.0;
            t[[1, a, 0]] = 1.0;
        }
        let mdp = TabularMdp::new(t, Array2::zeros((2, 2)), array![0.5, 0.5], 0.8).unwrap();
        let occ = occupancy(&mdp, &TabularPolicy::uniform(2, 2)).unwrap();
        let d = occ.unnormalized().sum_axis(Axis(1));
        assert!((d[0] - d[1]).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_agrees_with_exact_solve() {
        // Horizon chosen so that γ^H · r_max/(1−γ) < 1e-4.
        let mut rng = SeedStream::new(99).rng();
        for seed in 0..10 {
            let mdp = TabularMdp::random(seed, 5, 3, 0.9).unwrap();
            let pi = TabularPolicy::random(&mut rng, 5, 3);
            let horizon = ((1e-4f64 * (1.0 - 0.9)).ln() / 0.9f64.ln()).ceil() as usize;
            let exact = exact_return(&mdp, &pi).unwrap();
            let (mean, se) = monte_carlo_return(&mdp, &pi, 100_000, horizon, seed, Exec::Parallel);
            assert!((mean - exact).abs() < 3.0 * se, "seed {seed}: {mean} ± {se} vs {exact}");
        }
    }

    #[test]
    fn monte_carlo_independent_of_execution_mode() {
        let mdp = TabularMdp::random(5, 4, 2, 0.8).unwrap();
        let pi = TabularPolicy::uniform(4, 2);
        let a = monte_carlo_return(&mdp, &pi, 5000, 40, 1, Exec::Sequential);
        let b = monte_carlo_return(&mdp, &pi, 5000, 40, 1, Exec::Parallel);
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn rows_are_distributions(seed in 0u64..10_000, s in 2usize..8, a in 2usize..5) {
            let mdp = TabularMdp::random(seed, s, a, 0.9).unwrap();
            for row in mdp.transition().lanes(Axis(2)) {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn return_equals_occupancy_weighted_reward(seed in 0u64..10_000, s in 2usize..8, a in 2usize..5, g in 0.5f64..0.99) {
            let mdp = TabularMdp::random(seed, s, a, g).unwrap();
            let pi = TabularPolicy::random(&mut SeedStream::new(seed).child(1).rng(), s, a);
            let eta = exact_return(&mdp, &pi).unwrap();
            let occ = occupancy(&mdp, &pi).unwrap();
            prop_assert!((occ.integrate(mdp.reward()) - eta).abs() < 1e-8);
            prop_assert!((occ.expect(mdp.reward()) / (1.0 - g) - eta).abs() < 1e-8);
            prop_assert!((occ.unnormalized().sum() - 1.0 / (1.0 - g)).abs() < 1e-8);
            prop_assert!((occ.normalized().sum() - 1.0).abs() < 1e-8);
            prop_assert!(occ.unnormalized().iter().all(|&r| r >= 0.0));
            let v = state_values(&mdp, &pi).unwrap();
            prop_assert!(bellman_residual(&mdp, &pi, &v) <= 1e-10);
        }
    }
}
