//! Reachability for an LTV plant in feedback with a ReLU policy (Reach-LP).
//!
//! Dynamics: `x' = A x + B u + c + ω`, observation `y = Cᵀ x + ν`, control
//! `u = π(y)`. The policy is relaxed by CROWN over the observation set and
//! each next-state facet `A_out_i x'` is bounded in closed form (balls, boxes)
//! or by LP (polytopes).

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{aabb, is_feasible, lp_solve, union_aabb, Hyperrect, InputSet, Polytope, Sense, WeightedBall};
use crate::network::Network;
use crate::propagators::{crown_relax, AffineBoundPair};

/// Dynamics at one time step. `c` is `n_x × n_y`, so `y = cᵀ x + ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDynamics {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub c: Array2<f64>,
    pub offset: Array1<f64>,
}

impl StepDynamics {
    pub fn new(a: Array2<f64>, b: Array2<f64>, c: Array2<f64>, offset: Array1<f64>) -> Result<Self> {
        let nx = a.nrows();
        if a.ncols() != nx {
            return Err(Error::Config(format!("A must be square, got {}x{}", nx, a.ncols())));
        }
        check_dim(nx, b.nrows())?;
        check_dim(nx, c.nrows())?;
        check_dim(nx, offset.len())?;
        let finite = a.iter().chain(b.iter()).chain(c.iter()).chain(offset.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("dynamics".into()));
        }
        Ok(Self { a, b, c, offset })
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn ny(&self) -> usize {
        self.c.ncols()
    }
}

/// An LTV plant. A single entry in `steps` means time-invariant dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvSystem {
    steps: Vec<StepDynamics>,
    omega: Hyperrect,
    nu: Hyperrect,
    control_limits: Option<(Array1<f64>, Array1<f64>)>,
}

impl LtvSystem {
    pub fn new(
        steps: Vec<StepDynamics>,
        omega: Option<Hyperrect>,
        nu: Option<Hyperrect>,
        control_limits: Option<(Array1<f64>, Array1<f64>)>,
    ) -> Result<Self> {
        let first = steps.first().ok_or_else(|| Error::Config("no dynamics given".into()))?;
        let (nx, nu_dim, ny) = (first.nx(), first.nu(), first.ny());
        for s in &steps {
            check_dim(nx, s.nx())?;
            check_dim(nu_dim, s.nu())?;
            check_dim(ny, s.ny())?;
        }
        let omega = omega.unwrap_or_else(|| Hyperrect::point(&Array1::zeros(nx)));
        let nu = nu.unwrap_or_else(|| Hyperrect::point(&Array1::zeros(ny)));
        check_dim(nx, omega.dim())?;
        check_dim(ny, nu.dim())?;
        if let Some((lo, hi)) = &control_limits {
            check_dim(nu_dim, lo.len())?;
            check_dim(nu_dim, hi.len())?;
        }
        Ok(Self {
            steps,
            omega,
            nu,
            control_limits,
        })
    }

    pub fn time_invariant(dynamics: StepDynamics) -> Result<Self> {
        Self::new(vec![dynamics], None, None, None)
    }

    pub fn with_noise(mut self, omega: Hyperrect, nu: Hyperrect) -> Result<Self> {
        check_dim(self.nx(), omega.dim())?;
        check_dim(self.ny(), nu.dim())?;
        self.omega = omega;
        self.nu = nu;
        Ok(self)
    }

    pub fn with_control_limits(mut self, lo: Array1<f64>, hi: Array1<f64>) -> Result<Self> {
        check_dim(self.nu(), lo.len())?;
        check_dim(self.nu(), hi.len())?;
        self.control_limits = Some((lo, hi));
        Ok(self)
    }

    pub fn dynamics(&self, t: usize) -> &StepDynamics {
        &self.steps[t.min(self.steps.len() - 1)]
    }

    pub fn schedule_len(&self) -> Option<usize> {
        (self.steps.len() > 1).then_some(self.steps.len())
    }

    pub fn omega(&self) -> &Hyperrect {
        &self.omega
    }

    pub fn nu_set(&self) -> &Hyperrect {
        &self.nu
    }

    pub fn control_limits(&self) -> Option<&(Array1<f64>, Array1<f64>)> {
        self.control_limits.as_ref()
    }

    pub fn nx(&self) -> usize {
        self.steps[0].nx()
    }

    pub fn nu(&self) -> usize {
        self.steps[0].nu()
    }

    pub fn ny(&self) -> usize {
        self.steps[0].ny()
    }
}

/// Plant plus policy. Control limits, if any, are folded into the policy
/// network at construction.
#[derive(Debug, Clone)]
pub struct NeuralFeedbackLoop {
    system: LtvSystem,
    policy: Network,
}

impl NeuralFeedbackLoop {
    pub fn new(system: LtvSystem, policy: Network) -> Result<Self> {
        check_dim(system.ny(), policy.input_dim())?;
        check_dim(system.nu(), policy.output_dim())?;
        let policy = match system.control_limits() {
            Some((lo, hi)) => policy.append_control_limits(lo, hi)?,
            None => policy,
        };
        Ok(Self { system, policy })
    }

    pub fn system(&self) -> &LtvSystem {
        &self.system
    }

    pub fn policy(&self) -> &Network {
        &self.policy
    }

    /// One exact transition with given noise realizations.
    pub fn step(&self, t: usize, x: ArrayView1<f64>, omega: ArrayView1<f64>, nu: ArrayView1<f64>) -> Result<Array1<f64>> {
        let d = self.system.dynamics(t);
        let y = d.c.t().dot(&x) + nu;
        let u = self.policy.forward(y.view())?;
        Ok(d.a.dot(&x) + d.b.dot(&u) + &d.offset + omega)
    }
}

/// State sets handled by the recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StateSet {
    Rect(Hyperrect),
    Ball(WeightedBall),
    Polytope(Polytope),
}

impl StateSet {
    pub fn dim(&self) -> usize {
        match self {
            StateSet::Rect(r) => r.dim(),
            StateSet::Ball(b) => b.dim(),
            StateSet::Polytope(p) => p.dim(),
        }
    }

    /// `max_{x in set} c·x`.
    pub fn support(&self, c: ArrayView1<f64>) -> Result<f64> {
        match self {
            StateSet::Rect(r) => Ok(r.support(c)),
            StateSet::Ball(b) => Ok(b.support(c)),
            StateSet::Polytope(p) => Ok(lp_solve(c, p, Sense::Max)?.value),
        }
    }

    /// Smallest enclosing box (by LP for polytopes).
    pub fn bounding_rect(&self) -> Result<Hyperrect> {
        match self {
            StateSet::Rect(r) => Ok(r.clone()),
            StateSet::Ball(b) => Ok(b.bounding_rect()),
            StateSet::Polytope(p) => {
                let n = p.dim();
                let mut lo = Array1::zeros(n);
                let mut hi = Array1::zeros(n);
                for k in 0..n {
                    let mut e = Array1::zeros(n);
                    e[k] = 1.0;
                    hi[k] = lp_solve(e.view(), p, Sense::Max)?.value;
                    lo[k] = lp_solve(e.view(), p, Sense::Min)?.value;
                }
                Hyperrect::new(lo, hi)
            }
        }
    }

    pub fn as_polytope(&self) -> Result<Polytope> {
        match self {
            StateSet::Rect(r) => Ok(Polytope::from_rect(r)),
            StateSet::Ball(b) => Ok(Polytope::from_rect(&b.bounding_rect())),
            StateSet::Polytope(p) => Ok(p.clone()),
        }
    }

    pub fn contains(&self, x: ArrayView1<f64>) -> bool {
        match self {
            StateSet::Rect(r) => r.contains(x),
            StateSet::Ball(b) => b.contains(x),
            StateSet::Polytope(p) => p.contains(x, 0.0),
        }
    }

    /// Uniform samples (rejection from the bounding box for polytopes).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Array1<f64>> {
        match self {
            StateSet::Rect(r) => Ok(r.sample(rng)),
            StateSet::Ball(b) => Ok(b.sample(rng)),
            StateSet::Polytope(p) => {
                let bx = self.bounding_rect()?;
                for _ in 0..1_000_000 {
                    let x = bx.sample(rng);
                    if p.contains(x.view(), 0.0) {
                        return Ok(x);
                    }
                }
                Err(Error::InvalidSet("polytope too thin to sample".into()))
            }
        }
    }

    pub fn as_rect(&self) -> Option<&Hyperrect> {
        match self {
            StateSet::Rect(r) => Some(r),
            _ => None,
        }
    }
}

impl From<Hyperrect> for StateSet {
    fn from(r: Hyperrect) -> Self {
        StateSet::Rect(r)
    }
}

/// Interval image of `Cᵀ x` over `x_set`, widened by the measurement noise.
pub fn observation_set(sys: &LtvSystem, t: usize, x_set: &Hyperrect) -> Result<Hyperrect> {
    let d = sys.dynamics(t);
    check_dim(d.nx(), x_set.dim())?;
    let ct = d.c.t();
    let center = ct.dot(&x_set.center());
    let radius = ct.mapv(f64::abs).dot(&x_set.radius());
    let lo = &center - &radius + sys.nu_set().lower();
    let hi = &center + &radius + sys.nu_set().upper();
    Hyperrect::new(lo, hi)
}

/// Per-facet affine bounds `M_L x + n_L <= A_out x' <= M_U x + n_U`, valid for
/// every state whose observation lies in the relaxation's domain.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTerms {
    pub m_upper: Array2<f64>,
    pub n_upper: Array1<f64>,
    pub m_lower: Array2<f64>,
    pub n_lower: Array1<f64>,
    /// Rows of `Ψ` or `Φ` chosen per facet (each `n_u × n_y`).
    pub upsilon_upper: Vec<Array2<f64>>,
    pub gamma_upper: Vec<Array1<f64>>,
    pub upsilon_lower: Vec<Array2<f64>>,
    pub gamma_lower: Vec<Array1<f64>>,
}

/// `Σ_k v_k · (v_k >= 0 ? hi_k : lo_k)`, the maximum of `v·w` over the box.
fn extreme(v: ArrayView1<f64>, lo: &Array1<f64>, hi: &Array1<f64>) -> f64 {
    Zip::from(&v)
        .and(lo)
        .and(hi)
        .fold(0.0, |acc, &c, &l, &h| acc + if c >= 0.0 { c * h } else { c * l })
}

pub fn step_terms(sys: &LtvSystem, t: usize, relax: &AffineBoundPair, a_out: &Array2<f64>) -> Result<StepTerms> {
    let d = sys.dynamics(t);
    check_dim(d.nx(), a_out.ncols())?;
    check_dim(d.nu(), relax.out_dim())?;
    check_dim(d.ny(), relax.in_dim())?;
    let (nu, ny, m) = (d.nu(), d.ny(), a_out.nrows());
    let (omega, noise) = (sys.omega(), sys.nu_set());
    let ct = d.c.t();

    let mut terms = StepTerms {
        m_upper: Array2::zeros((m, d.nx())),
        n_upper: Array1::zeros(m),
        m_lower: Array2::zeros((m, d.nx())),
        n_lower: Array1::zeros(m),
        upsilon_upper: Vec::with_capacity(m),
        gamma_upper: Vec::with_capacity(m),
        upsilon_lower: Vec::with_capacity(m),
        gamma_lower: Vec::with_capacity(m),
    };
    for i in 0..m {
        let a = a_out.row(i);
        let g = a.dot(&d.b);
        let mut ups_u = Array2::zeros((nu, ny));
        let mut gam_u = Array1::zeros(nu);
        let mut ups_l = Array2::zeros((nu, ny));
        let mut gam_l = Array1::zeros(nu);
        for j in 0..nu {
            let (hi_a, hi_b, lo_a, lo_b) = if g[j] >= 0.0 {
                (&relax.upper_a, &relax.upper_b, &relax.lower_a, &relax.lower_b)
            } else {
                (&relax.lower_a, &relax.lower_b, &relax.upper_a, &relax.upper_b)
            };
            ups_u.row_mut(j).assign(&hi_a.row(j));
            gam_u[j] = hi_b[j];
            ups_l.row_mut(j).assign(&lo_a.row(j));
            gam_l[j] = lo_b[j];
        }
        let base = a.dot(&d.a);
        let h_u = g.dot(&ups_u);
        let h_l = g.dot(&ups_l);
        terms.m_upper.row_mut(i).assign(&(&base + &h_u.dot(&ct)));
        terms.m_lower.row_mut(i).assign(&(&base + &h_l.dot(&ct)));
        let ac = a.dot(&d.offset);
        terms.n_upper[i] = extreme(h_u.view(), noise.lower(), noise.upper()) + g.dot(&gam_u) + ac + extreme(a, omega.lower(), omega.upper());
        terms.n_lower[i] = -extreme((-&h_l).view(), noise.lower(), noise.upper()) + g.dot(&gam_l) + ac
            - extreme((-&a.to_owned()).view(), omega.lower(), omega.upper());
        terms.upsilon_upper.push(ups_u);
        terms.gamma_upper.push(gam_u);
        terms.upsilon_lower.push(ups_l);
        terms.gamma_lower.push(gam_l);
    }
    Ok(terms)
}

/// Facet bounds `gamma_lower <= A_out x' <= gamma_upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct FacetBounds {
    pub a_out: Array2<f64>,
    pub upper: Array1<f64>,
    pub lower: Array1<f64>,
}

impl FacetBounds {
    /// Box when `A_out` is the identity, otherwise the polytope
    /// `{A_out x <= upper, -A_out x <= -lower}`.
    pub fn to_set(&self) -> Result<StateSet> {
        let n = self.a_out.ncols();
        if self.a_out.nrows() == n && self.a_out == Array2::<f64>::eye(n) {
            return Ok(StateSet::Rect(Hyperrect::new(self.lower.clone(), self.upper.clone())?));
        }
        let a = ndarray::concatenate(Axis(0), &[self.a_out.view(), (-&self.a_out).view()]).expect("same width");
        let b = ndarray::concatenate(Axis(0), &[self.upper.view(), (-&self.lower).view()]).expect("1-d");
        Ok(StateSet::Polytope(Polytope::new(a, b)?))
    }
}

/// Optimizes the facet terms over `x_set`: closed form for boxes and balls,
/// LP for polytopes.
pub fn optimize_terms(terms: &StepTerms, x_set: &StateSet) -> Result<(Array1<f64>, Array1<f64>)> {
    let m = terms.n_upper.len();
    let mut up = Array1::zeros(m);
    let mut lo = Array1::zeros(m);
    for i in 0..m {
        up[i] = x_set.support(terms.m_upper.row(i))? + terms.n_upper[i];
        let neg = -&terms.m_lower.row(i);
        lo[i] = -x_set.support(neg.view())? + terms.n_lower[i];
    }
    Ok((up, lo))
}

/// Policy relaxation valid for every observation reachable from `x_set`.
pub fn relax_policy(nfl: &NeuralFeedbackLoop, t: usize, x_set: &StateSet) -> Result<AffineBoundPair> {
    let bx = x_set.bounding_rect()?;
    let obs = observation_set(nfl.system(), t, &bx)?;
    crown_relax(nfl.policy(), &InputSet::Rect(obs))
}

pub fn reach_step(nfl: &NeuralFeedbackLoop, t: usize, x_set: &StateSet, a_out: &Array2<f64>) -> Result<FacetBounds> {
    check_dim(nfl.system().nx(), x_set.dim())?;
    if let StateSet::Polytope(p) = x_set {
        if !is_feasible(p)? {
            return Err(Error::Infeasible);
        }
    }
    let relax = relax_policy(nfl, t, x_set)?;
    let terms = step_terms(nfl.system(), t, &relax, a_out)?;
    let (upper, lower) = optimize_terms(&terms, x_set)?;
    Ok(FacetBounds {
        a_out: a_out.clone(),
        upper,
        lower,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachSequence {
    /// `sets[0]` is the initial set.
    pub sets: Vec<StateSet>,
    /// Wall-clock seconds spent on each step.
    pub runtimes: Vec<f64>,
}

impl ReachSequence {
    pub fn horizon(&self) -> usize {
        self.sets.len() - 1
    }

    pub fn boxes(&self) -> Result<Vec<Hyperrect>> {
        self.sets.iter().map(StateSet::bounding_rect).collect()
    }
}

/// `T` steps of the recursion; sets are re-boxed between steps.
pub fn reach_sequence(nfl: &NeuralFeedbackLoop, x0: &StateSet, horizon: usize, a_out: Option<&Array2<f64>>) -> Result<ReachSequence> {
    if horizon == 0 {
        return Err(Error::Config("horizon must be >= 1".into()));
    }
    if let Some(len) = nfl.system().schedule_len() {
        if horizon > len {
            return Err(Error::Config(format!("horizon {horizon} exceeds the {len}-step dynamics schedule")));
        }
    }
    let eye = Array2::eye(nfl.system().nx());
    let a_out = a_out.unwrap_or(&eye);
    let mut sets = vec![x0.clone()];
    let mut runtimes = Vec::with_capacity(horizon);
    let mut current = x0.clone();
    for t in 0..horizon {
        let start = Instant::now();
        let next = reach_step(nfl, t, &current, a_out)?.to_set()?;
        current = match &next {
            StateSet::Rect(_) => next.clone(),
            other => StateSet::Rect(other.bounding_rect()?),
        };
        runtimes.push(start.elapsed().as_secs_f64());
        sets.push(next);
    }
    Ok(ReachSequence { sets, runtimes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClosedLoopPartitioner {
    None,
    Uniform { counts: Vec<usize> },
    /// Refines the cell whose reachable boxes stick out furthest from the
    /// sampled rollouts, until `budget` reach sequences have been computed.
    Greedy { budget: usize, samples: usize },
}

/// Result of a partitioned analysis: fused per-step boxes plus the cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedReach {
    pub fused: ReachSequence,
    pub cells: Vec<Hyperrect>,
    pub reach_calls: usize,
}

fn fuse_sequences(x0: &StateSet, seqs: &[Vec<Hyperrect>], runtimes: Vec<f64>) -> Result<ReachSequence> {
    let horizon = seqs[0].len() - 1;
    let mut sets = vec![x0.clone()];
    for t in 1..=horizon {
        let boxes: Vec<Hyperrect> = seqs.iter().map(|s| s[t].clone()).collect();
        sets.push(StateSet::Rect(union_aabb(&boxes)?));
    }
    Ok(ReachSequence { sets, runtimes })
}

fn cell_sequence(nfl: &NeuralFeedbackLoop, cell: &Hyperrect, horizon: usize, a_out: Option<&Array2<f64>>) -> Result<(Vec<Hyperrect>, Vec<f64>)> {
    let seq = reach_sequence(nfl, &StateSet::Rect(cell.clone()), horizon, a_out)?;
    Ok((seq.boxes()?, seq.runtimes))
}

/// Splits a box `X0` into cells, runs the recursion per cell and fuses each
/// step by union of boxes.
pub fn partitioned_reach(
    nfl: &NeuralFeedbackLoop,
    x0: &Hyperrect,
    horizon: usize,
    a_out: Option<&Array2<f64>>,
    partitioner: &ClosedLoopPartitioner,
    seed: u64,
) -> Result<PartitionedReach> {
    match partitioner {
        ClosedLoopPartitioner::None => {
            let seq = reach_sequence(nfl, &StateSet::Rect(x0.clone()), horizon, a_out)?;
            let boxes = seq.boxes()?;
            let fused = fuse_sequences(&StateSet::Rect(x0.clone()), &[boxes], seq.runtimes)?;
            Ok(PartitionedReach {
                fused,
                cells: vec![x0.clone()],
                reach_calls: 1,
            })
        }
        ClosedLoopPartitioner::Uniform { counts } => {
            let cells = x0.grid(counts)?;
            let start = Instant::now();
            let results: Vec<(Vec<Hyperrect>, Vec<f64>)> =
                cells.par_iter().map(|c| cell_sequence(nfl, c, horizon, a_out)).collect::<Result<_>>()?;
            let total = start.elapsed().as_secs_f64();
            let seqs: Vec<Vec<Hyperrect>> = results.into_iter().map(|(s, _)| s).collect();
            let runtimes = vec![total / horizon as f64; horizon];
            Ok(PartitionedReach {
                fused: fuse_sequences(&StateSet::Rect(x0.clone()), &seqs, runtimes)?,
                reach_calls: cells.len(),
                cells,
            })
        }
        ClosedLoopPartitioner::Greedy { budget, samples } => greedy_reach(nfl, x0, horizon, a_out, *budget, *samples, seed),
    }
}

fn box_excess(r: &Hyperrect, under: &Hyperrect) -> f64 {
    (0..r.dim())
        .map(|k| (r.upper()[k] - under.upper()[k]).max(under.lower()[k] - r.lower()[k]))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn greedy_reach(
    nfl: &NeuralFeedbackLoop,
    x0: &Hyperrect,
    horizon: usize,
    a_out: Option<&Array2<f64>>,
    budget: usize,
    samples: usize,
    seed: u64,
) -> Result<PartitionedReach> {
    if budget == 0 || samples == 0 {
        return Err(Error::Config("greedy partitioner needs budget >= 1 and samples >= 1".into()));
    }
    let start = Instant::now();
    let rollouts = simulate(nfl, &StateSet::Rect(x0.clone()), horizon, samples, seed, true)?;
    let under: Vec<Hyperrect> = rollouts.iter().map(|s| aabb(s.rows())).collect::<Result<_>>()?;
    let score = |seq: &[Hyperrect]| -> f64 {
        (1..=horizon).map(|t| box_excess(&seq[t], &under[t])).fold(f64::NEG_INFINITY, f64::max)
    };
    let widths0 = x0.widths();
    let mut cells: Vec<(Hyperrect, Vec<Hyperrect>, f64)> = Vec::new();
    let (root, _) = cell_sequence(nfl, x0, horizon, a_out)?;
    let s = score(&root);
    cells.push((x0.clone(), root, s));
    let mut calls = 1;
    while calls + 2 <= budget {
        // ties resolve to the earliest cell
        let (idx, best) = cells
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bs), (i, c)| if c.2 > bs { (i, c.2) } else { (bi, bs) });
        if best <= 0.0 {
            break;
        }
        let cell = &cells[idx].0;
        let widths = cell.widths();
        let dim = (0..cell.dim())
            .filter(|&k| widths0[k] > 0.0 && widths[k] > 0.0)
            .fold(None, |acc: Option<(usize, f64)>, k| {
                let w = widths[k] / widths0[k];
                if acc.is_none_or(|(_, bw)| w > bw) { Some((k, w)) } else { acc }
            });
        let Some((dim, _)) = dim else { break };
        let (left, right) = cell.bisect(dim)?;
        let (l, r) = rayon::join(
            || cell_sequence(nfl, &left, horizon, a_out),
            || cell_sequence(nfl, &right, horizon, a_out),
        );
        let (l, r) = (l?.0, r?.0);
        calls += 2;
        let (ls, rs) = (score(&l), score(&r));
        cells.remove(idx);
        cells.push((left, l, ls));
        cells.push((right, r, rs));
    }
    let total = start.elapsed().as_secs_f64();
    let seqs: Vec<Vec<Hyperrect>> = cells.iter().map(|c| c.1.clone()).collect();
    Ok(PartitionedReach {
        fused: fuse_sequences(&StateSet::Rect(x0.clone()), &seqs, vec![total / horizon as f64; horizon])?,
        cells: cells.into_iter().map(|c| c.0).collect(),
        reach_calls: calls,
    })
}

/// `n` closed-loop rollouts from uniform initial states. Entry `t` of the
/// result holds the states at time `t`, one per row. Noise is sampled
/// uniformly from its support when `noisy`, and set to its center otherwise.
pub fn simulate(nfl: &NeuralFeedbackLoop, x0: &StateSet, horizon: usize, n: usize, seed: u64, noisy: bool) -> Result<Vec<Array2<f64>>> {
    let sys = nfl.system();
    let nx = sys.nx();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Array2<f64>> = (0..=horizon).map(|_| Array2::zeros((n, nx))).collect();
    for i in 0..n {
        let mut x = x0.sample(&mut rng)?;
        out[0].row_mut(i).assign(&x);
        for t in 0..horizon {
            let (w, v) = if noisy {
                (sys.omega().sample(&mut rng), sys.nu_set().sample(&mut rng))
            } else {
                (sys.omega().center(), sys.nu_set().center())
            };
            x = nfl.step(t, x.view(), w.view(), v.view())?;
            out[t + 1].row_mut(i).assign(&x);
        }
    }
    Ok(out)
}

/// Goal for the final set and per-step avoid sets (`avoid[t]` applies to
/// `R_t`; an empty list means no avoid constraints).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachAvoidSpec {
    pub goal: Option<StateSet>,
    #[serde(default)]
    pub avoid: Vec<Vec<StateSet>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachAvoidReport {
    pub verified: bool,
    pub goal_reached: bool,
    /// Steps whose reachable set may touch an avoid set.
    pub avoid_violations: Vec<usize>,
}

/// Whether `inner ⊆ outer`, using support functions of `inner`.
pub fn set_within(inner: &StateSet, outer: &StateSet) -> Result<bool> {
    check_dim(outer.dim(), inner.dim())?;
    if let (StateSet::Rect(a), StateSet::Rect(b)) = (inner, outer) {
        return Ok(b.contains_rect(a));
    }
    let p = match outer {
        StateSet::Polytope(p) => p.clone(),
        StateSet::Rect(r) => Polytope::from_rect(r),
        StateSet::Ball(b) => {
            // only exact for boxes inside the ball: check every corner
            let r = inner.bounding_rect()?;
            return Ok(r.dim() <= 16 && r.corners().iter().all(|c| b.contains(c.view())));
        }
    };
    for (row, &b) in p.a().rows().into_iter().zip(p.b().iter()) {
        if inner.support(row)? > b {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Whether two sets may intersect. Boxes are decided exactly, polytopes by
/// LP feasibility; balls are replaced by their bounding boxes.
pub fn sets_intersect(a: &StateSet, b: &StateSet) -> Result<bool> {
    check_dim(a.dim(), b.dim())?;
    match (a, b) {
        (StateSet::Polytope(_), _) | (_, StateSet::Polytope(_)) => is_feasible(&a.as_polytope()?.intersect(&b.as_polytope()?)?),
        _ => Ok(a.bounding_rect()?.intersects(&b.bounding_rect()?)),
    }
}

pub fn verify_reach_avoid(seq: &ReachSequence, spec: &ReachAvoidSpec) -> Result<ReachAvoidReport> {
    let horizon = seq.horizon();
    if !spec.avoid.is_empty() && spec.avoid.len() != horizon + 1 {
        return Err(Error::Config(format!(
            "expected {} avoid lists (one per step including t=0), got {}",
            horizon + 1,
            spec.avoid.len()
        )));
    }
    let goal_reached = match &spec.goal {
        Some(g) => set_within(&seq.sets[horizon], g)?,
        None => true,
    };
    let mut avoid_violations = Vec::new();
    for (t, avoid) in spec.avoid.iter().enumerate() {
        for a in avoid {
            if sets_intersect(&seq.sets[t], a)? {
                avoid_violations.push(t);
                break;
            }
        }
    }
    Ok(ReachAvoidReport {
        verified: goal_reached && avoid_violations.is_empty(),
        goal_reached,
        avoid_violations,
    })
}

/// `area(R_t) / area(aabb(samples_t)) - 1` in the plane of `dims`, for
/// `t = 1..=T`.
pub fn error_metric(seq: &ReachSequence, samples: &[Array2<f64>], dims: [usize; 2]) -> Result<Vec<f64>> {
    check_dim(seq.sets.len(), samples.len())?;
    let mut errors = Vec::with_capacity(seq.horizon());
    for t in 1..=seq.horizon() {
        let s = &samples[t];
        if s.nrows() < 2 {
            return Err(Error::DegenerateMetric(t));
        }
        let sample_box = aabb(s.rows())?.project(&dims);
        let denom = sample_box.volume();
        if !(denom > 0.0) {
            return Err(Error::DegenerateMetric(t));
        }
        let area = seq.sets[t].bounding_rect()?.project(&dims).volume();
        errors.push(area / denom - 1.0);
    }
    Ok(errors)
}

/// Discrete-time double integrator, `Δt = 1`.
pub fn double_integrator() -> StepDynamics {
    StepDynamics::new(
        ndarray::array![[1.0, 1.0], [0.0, 1.0]],
        ndarray::array![[0.5], [1.0]],
        Array2::eye(2),
        Array1::zeros(2),
    )
    .expect("valid matrices")
}

/// Initial set used by the double-integrator benchmark.
pub fn double_integrator_x0() -> Hyperrect {
    Hyperrect::from_slices(&[2.5, -0.25], &[3.0, 0.25]).expect("valid box")
}

/// Infinite-horizon discrete LQR gain for a single-input system with
/// `Q = I`, `R = r`, by Riccati iteration: `u = -K x`.
pub fn lqr_gain(d: &StepDynamics, r: f64) -> Array1<f64> {
    assert_eq!(d.nu(), 1, "single-input systems only");
    let (a, b) = (&d.a, d.b.column(0).to_owned());
    let mut p = Array2::<f64>::eye(d.nx());
    let mut k = Array1::zeros(d.nx());
    for _ in 0..10_000 {
        let pb = p.dot(&b);
        let denom = r + b.dot(&pb);
        k = a.t().dot(&pb) / denom;
        let pa = p.dot(a);
        let next = Array2::<f64>::eye(d.nx()) + a.t().dot(&pa)
            - denom * k.view().insert_axis(Axis(1)).dot(&k.view().insert_axis(Axis(0)));
        let delta = (&next - &p).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        p = next;
        if delta < 1e-13 {
            break;
        }
    }
    k
}

/// Solves a small symmetric positive definite system by Gaussian elimination
/// with partial pivoting.
fn solve_dense(mut m: Array2<f64>, mut rhs: Array1<f64>) -> Array1<f64> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs())).expect("nonempty");
        if piv != col {
            for k in 0..n {
                m.swap([col, k], [piv, k]);
            }
            rhs.swap(col, piv);
        }
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            for k in col..n {
                m[[row, k]] -= f * m[[col, k]];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[[row, k]] * x[k]).sum();
        x[row] = (rhs[row] - s) / m[[row, row]];
    }
    x
}

/// Seeded `(2, 5, 5, 1)` controller for the benchmark: random hidden layers
/// and an output layer fit by ridge least squares to the LQR law `-K x` over
/// the region the benchmark trajectories visit.
pub fn benchmark_controller(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random = Network::random(&[2, 5, 5, 1], &mut rng);
    let k = lqr_gain(&double_integrator(), 1.0);
    let region = Hyperrect::from_slices(&[-0.5, -1.5], &[3.5, 0.5]).expect("valid box");
    let hidden = Network::new(random.layers()[..2].to_vec()).expect("valid prefix");
    let n = 2000;
    let width = hidden.output_dim() + 1;
    let mut gram = Array2::<f64>::eye(width) * 1e-6;
    let mut rhs = Array1::zeros(width);
    for _ in 0..n {
        let x = region.sample(&mut rng);
        let mut feat = hidden.forward(x.view()).expect("matching width").mapv(|v| v.max(0.0)).to_vec();
        feat.push(1.0);
        let feat = Array1::from(feat);
        let target = -k.dot(&x);
        gram += &(feat.view().insert_axis(Axis(1)).dot(&feat.view().insert_axis(Axis(0))));
        rhs.scaled_add(target, &feat);
    }
    let w = solve_dense(gram, rhs);
    let last = crate::network::Layer::new(
        w.slice(ndarray::s![..width - 1]).to_owned().insert_axis(Axis(0)),
        Array1::from_elem(1, w[width - 1]),
    )
    .expect("finite fit");
    let mut layers = random.layers()[..2].to_vec();
    layers.push(last);
    Network::new(layers).expect("valid widths")
}

/// Double integrator in feedback with `controller` and `u ∈ [-1, 1]`.
pub fn double_integrator_loop(controller: Network, noise: Option<f64>) -> Result<NeuralFeedbackLoop> {
    let mut sys = LtvSystem::time_invariant(double_integrator())?.with_control_limits(ndarray::array![-1.0], ndarray::array![1.0])?;
    if let Some(s) = noise {
        let r = Hyperrect::from_center_radius(&Array1::zeros(2), &Array1::from_elem(2, s))?;
        sys = sys.with_noise(r.clone(), r)?;
    }
    NeuralFeedbackLoop::new(sys, controller)
}
