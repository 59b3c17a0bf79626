//! Certified robust action selection for discrete-action Q-networks under
//! bounded observation perturbations, an adversary, and a small episode
//! harness on a discrete-action double integrator.

use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{Hyperrect, InputSet, Norm, WeightedBall};
use crate::network::Network;
use crate::propagators::{propagate, PropagatorKind, Specification};

/// Corner enumeration is attempted up to this many perturbed dimensions.
pub const MAX_CORNER_DIMS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustConfig {
    pub eps: Vec<f64>,
    pub p: Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    pub eps: Vec<f64>,
    pub p: Norm,
    /// Allows a finite-difference sign attack when corner search is too large.
    #[serde(default)]
    pub heuristic: bool,
}

impl RobustConfig {
    pub fn uniform(n: usize, eps: f64, p: Norm) -> Self {
        Self { eps: vec![eps; n], p }
    }
}

impl AdversaryConfig {
    pub fn uniform(n: usize, eps: f64, p: Norm) -> Self {
        Self {
            eps: vec![eps; n],
            p,
            heuristic: false,
        }
    }
}

fn check_eps(eps: &[f64], dim: usize) -> Result<()> {
    check_dim(dim, eps.len())?;
    if eps.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
        return Err(Error::Config("perturbation radii must be finite and non-negative".into()));
    }
    Ok(())
}

fn check_qnet(qnet: &Network) -> Result<()> {
    if qnet.output_dim() < 2 {
        return Err(Error::Config("a Q-network needs at least two actions".into()));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &Array1<f64>) -> usize {
    (1..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// Index of the smallest entry; ties go to the lowest index.
pub fn argmin(v: &Array1<f64>) -> usize {
    (1..v.len()).fold(0, |b, i| if v[i] < v[b] { i } else { b })
}

/// `Q_l(s_adv, a_j) <= min_{s in B_p(s_adv, eps)} Q(s, a_j)` for every action.
pub fn q_lower_bounds(qnet: &Network, s_adv: &Array1<f64>, cfg: &RobustConfig) -> Result<Array1<f64>> {
    check_qnet(qnet)?;
    check_dim(qnet.input_dim(), s_adv.len())?;
    check_eps(&cfg.eps, s_adv.len())?;
    if cfg.eps.iter().all(|&e| e == 0.0) {
        return qnet.forward(s_adv.view());
    }
    let ball = WeightedBall::new(s_adv.clone(), Array1::from(cfg.eps.clone()), cfg.p)?;
    let spec = Specification::identity(qnet.output_dim());
    Ok(propagate(PropagatorKind::Crown, qnet, &InputSet::Ball(ball), &spec)?.lower)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCertificate {
    pub q_lower: Vec<f64>,
    pub q_nominal: Vec<f64>,
    pub chosen: usize,
    pub nominal: usize,
}

pub fn select_robust_action(qnet: &Network, s_adv: &Array1<f64>, cfg: &RobustConfig) -> Result<ActionCertificate> {
    let q_lower = q_lower_bounds(qnet, s_adv, cfg)?;
    let q_nominal = qnet.forward(s_adv.view())?;
    Ok(ActionCertificate {
        chosen: argmax(&q_lower),
        nominal: argmax(&q_nominal),
        q_lower: q_lower.to_vec(),
        q_nominal: q_nominal.to_vec(),
    })
}

fn candidates(qnet: &Network, s0: &Array1<f64>, cfg: &AdversaryConfig, nom: usize, worst: usize) -> Result<Vec<Array1<f64>>> {
    let n = s0.len();
    let active: Vec<usize> = (0..n).filter(|&k| cfg.eps[k] > 0.0).collect();
    let mut out = vec![s0.clone()];
    match cfg.p {
        Norm::Inf if active.len() <= MAX_CORNER_DIMS => {
            for mask in 0..1usize << active.len() {
                let mut s = s0.clone();
                for (bit, &k) in active.iter().enumerate() {
                    s[k] += if mask >> bit & 1 == 1 { cfg.eps[k] } else { -cfg.eps[k] };
                }
                out.push(s);
            }
        }
        Norm::Inf if !cfg.heuristic => return Err(Error::CornerSearchTooLarge(active.len())),
        Norm::Inf => {
            // step against the finite-difference gradient of the margin
            let margin = |s: &Array1<f64>| -> Result<f64> {
                let q = qnet.forward(s.view())?;
                Ok(q[nom] - q[worst])
            };
            let mut s = s0.clone();
            for &k in &active {
                let h = 1e-6 * cfg.eps[k].max(1e-9);
                let mut plus = s0.clone();
                plus[k] += h;
                let mut minus = s0.clone();
                minus[k] -= h;
                let g = margin(&plus)? - margin(&minus)?;
                s[k] -= cfg.eps[k] * if g >= 0.0 { 1.0 } else { -1.0 };
            }
            out.push(s);
        }
        _ => {
            for &k in &active {
                for sign in [-1.0, 1.0] {
                    let mut s = s0.clone();
                    s[k] += sign * cfg.eps[k];
                    out.push(s);
                }
            }
        }
    }
    Ok(out)
}

/// Perturbed observation that tries to make the agent pick the action that is
/// worst in the true state. Falls back to the candidate that shrinks the gap
/// between the true best and worst actions the most.
pub fn adversary_perturb(qnet: &Network, s0: &Array1<f64>, cfg: &AdversaryConfig) -> Result<Array1<f64>> {
    check_qnet(qnet)?;
    check_dim(qnet.input_dim(), s0.len())?;
    check_eps(&cfg.eps, s0.len())?;
    if cfg.eps.iter().all(|&e| e == 0.0) {
        return Ok(s0.clone());
    }
    let q0 = qnet.forward(s0.view())?;
    let (nom, worst) = (argmax(&q0), argmin(&q0));
    let mut best_flip: Option<(f64, Array1<f64>)> = None;
    let mut best_any: Option<(f64, Array1<f64>)> = None;
    for s in candidates(qnet, s0, cfg, nom, worst)? {
        let q = qnet.forward(s.view())?;
        let margin = q[nom] - q[worst];
        if argmax(&q) == worst && best_flip.as_ref().is_none_or(|(m, _)| margin < *m) {
            best_flip = Some((margin, s.clone()));
        }
        if best_any.as_ref().is_none_or(|(m, _)| margin < *m) {
            best_any = Some((margin, s));
        }
    }
    Ok(best_flip.or(best_any).map(|(_, s)| s).expect("s0 is always a candidate"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentMode {
    Nominal,
    Carrl,
}

/// Double integrator with actions `u ∈ {-1, 0, +1}` and reward
/// `-(xᵀx + 0.1 u²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDoubleIntegrator {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub actions: Vec<f64>,
    pub control_cost: f64,
    pub initial: Hyperrect,
}

impl Default for DiscreteDoubleIntegrator {
    fn default() -> Self {
        Self {
            a: array![[1.0, 1.0], [0.0, 1.0]],
            b: array![0.5, 1.0],
            actions: vec![-1.0, 0.0, 1.0],
            control_cost: 0.1,
            initial: Hyperrect::from_slices(&[-2.0, -1.0], &[2.0, 1.0]).expect("valid box"),
        }
    }
}

impl DiscreteDoubleIntegrator {
    pub fn step(&self, x: &Array1<f64>, action: usize) -> (Array1<f64>, f64) {
        let u = self.actions[action];
        let reward = -(x.dot(x) + self.control_cost * u * u);
        (self.a.dot(x) + &self.b * u, reward)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub q_lower: Vec<Vec<f64>>,
    pub total_return: f64,
}

/// Runs `horizon` steps: the adversary corrupts the observation, the agent
/// acts on it, the plant advances. Only the initial state depends on `seed`.
pub fn episode_rollout(
    env: &DiscreteDoubleIntegrator,
    qnet: &Network,
    mode: AgentMode,
    adv: &AdversaryConfig,
    rob: &RobustConfig,
    horizon: usize,
    seed: u64,
) -> Result<Episode> {
    check_dim(env.actions.len(), qnet.output_dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = env.initial.sample(&mut rng);
    let mut ep = Episode {
        states: vec![x.to_vec()],
        observations: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        q_lower: Vec::with_capacity(horizon),
        total_return: 0.0,
    };
    for _ in 0..horizon {
        let obs = adversary_perturb(qnet, &x, adv)?;
        let (action, ql) = match mode {
            AgentMode::Nominal => {
                let q = qnet.forward(obs.view())?;
                (argmax(&q), q)
            }
            AgentMode::Carrl => {
                let ql = q_lower_bounds(qnet, &obs, rob)?;
                (argmax(&ql), ql)
            }
        };
        let (next, r) = env.step(&x, action);
        ep.observations.push(obs.to_vec());
        ep.actions.push(action);
        ep.rewards.push(r);
        ep.q_lower.push(ql.to_vec());
        ep.total_return += r;
        x = next;
        ep.states.push(x.to_vec());
    }
    Ok(ep)
}

/// Hand-built Q-network for the discrete double integrator: with `v = k·s`,
/// `Q = (v - 0.5, 0, -v - 0.5)`, i.e. push against `v` outside a dead zone.
pub fn crafted_qnet(k: [f64; 2]) -> Network {
    Network::from_rows(&[
        (vec![vec![k[0], k[1]], vec![-k[0], -k[1]]], vec![0.0, 0.0]),
        (vec![vec![1.0, -1.0], vec![0.0, 0.0], vec![-1.0, 1.0]], vec![-0.5, 0.0, -0.5]),
    ])
    .expect("valid shapes")
}
