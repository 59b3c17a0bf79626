//! Input-set partitioning under an analyzer: uniform grids, simulation-guided
//! (SG) refinement and greedy simulation-guided (GSG) refinement.
//!
//! All partitioners work in the space of specification rows `C f(x)`; with
//! the identity specification that is the plain output space.

use std::time::Instant;

use ndarray::{Array1, Array2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{aabb, union_aabb, Hull2D, Hyperrect, InputSet, Point2};
use crate::network::Network;
use crate::propagators::{propagate, OutputBounds, PropagatorKind, Specification};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionerKind {
    Uniform { counts: Vec<usize> },
    SimGuided,
    GreedySimGuided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputShape {
    LowerBounds,
    LinfBall,
    ConvexHull2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Termination {
    pub propagator_call_budget: Option<usize>,
    pub time_budget_s: Option<f64>,
    pub min_cell_fraction: Option<f64>,
}

impl Termination {
    pub fn calls(budget: usize) -> Self {
        Self {
            propagator_call_budget: Some(budget),
            time_budget_s: None,
            min_cell_fraction: None,
        }
    }
}

impl Default for Termination {
    fn default() -> Self {
        Self {
            propagator_call_budget: None,
            time_budget_s: None,
            min_cell_fraction: Some(1.0 / 32.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzerConfig {
    pub propagator: PropagatorKind,
    pub partitioner: PartitionerKind,
    pub output_shape: OutputShape,
    pub termination: Termination,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            propagator: PropagatorKind::Crown,
            partitioner: PartitionerKind::GreedySimGuided,
            output_shape: OutputShape::LinfBall,
            termination: Termination::default(),
            mc_samples: 1000,
            seed: 0,
        }
    }
}

impl AnalyzerConfig {
    /// One propagator call over the whole input set.
    pub fn raw(propagator: PropagatorKind) -> Self {
        Self {
            propagator,
            partitioner: PartitionerKind::Uniform { counts: Vec::new() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        let t = &self.termination;
        if !matches!(self.partitioner, PartitionerKind::Uniform { .. })
            && t.propagator_call_budget.is_none()
            && t.time_budget_s.is_none()
            && t.min_cell_fraction.is_none()
        {
            return Err(Error::Config("at least one termination criterion is required".into()));
        }
        if let Some(f) = t.min_cell_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config("min_cell_fraction must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// One input cell and the propagator's bounds on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: usize,
    pub input: Hyperrect,
    pub output: OutputBounds,
    pub refined_depth: usize,
}

/// Monte-Carlo under-approximation of the output set.
#[derive(Debug, Clone)]
pub struct UnderApprox {
    /// One sampled output per row.
    pub samples: Array2<f64>,
    pub interval: Hyperrect,
    pub hull: Option<Hull2D>,
}

/// The analyzer's over-approximation in the requested shape.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputEstimate {
    LowerBounds(Array1<f64>),
    Box(Hyperrect),
    Hull(Hull2D),
}

impl OutputEstimate {
    pub fn area(&self) -> Option<f64> {
        match self {
            OutputEstimate::LowerBounds(_) => None,
            OutputEstimate::Box(r) => Some(r.volume()),
            OutputEstimate::Hull(h) => Some(h.area()),
        }
    }

    /// Exact containment (no tolerance for boxes and lower bounds).
    pub fn contains(&self, y: ndarray::ArrayView1<f64>) -> bool {
        match self {
            OutputEstimate::LowerBounds(l) => Zip::from(l).and(&y).all(|&a, &b| a <= b),
            OutputEstimate::Box(r) => r.contains(y),
            OutputEstimate::Hull(h) => h.distance([y[0], y[1]]) <= 1e-12,
        }
    }

    pub fn as_box(&self) -> Option<&Hyperrect> {
        match self {
            OutputEstimate::Box(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub estimate: OutputEstimate,
    pub under: UnderApprox,
    pub cells: Vec<Cell>,
    pub propagator_calls: usize,
}

/// `n` uniform samples of the input box mapped through the network.
pub fn mc_underapprox(net: &Network, input: &Hyperrect, n: usize, seed: u64) -> Result<UnderApprox> {
    mc_underapprox_spec(net, input, &Specification::identity(net.output_dim()), n, seed)
}

pub fn mc_underapprox_spec(
    net: &Network,
    input: &Hyperrect,
    spec: &Specification,
    n: usize,
    seed: u64,
) -> Result<UnderApprox> {
    check_dim(net.input_dim(), input.dim())?;
    if n == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Array2::zeros((n, input.dim()));
    for mut row in xs.rows_mut() {
        row.assign(&input.sample(&mut rng));
    }
    let ys = net.forward_batch(&xs)?;
    let mut samples = Array2::zeros((n, spec.rows()));
    for (y, mut s) in ys.rows().into_iter().zip(samples.rows_mut()) {
        s.assign(&spec.apply(y));
    }
    let interval = aabb(samples.rows())?;
    let hull = if samples.ncols() == 2 {
        let pts: Vec<Point2> = samples.rows().into_iter().map(|r| [r[0], r[1]]).collect();
        Hull2D::new(&pts).ok()
    } else {
        None
    };
    Ok(UnderApprox {
        samples,
        interval,
        hull,
    })
}

/// Runs the configured partitioner over a box input.
pub fn analyze(net: &Network, input: &Hyperrect, spec: &Specification, cfg: &AnalyzerConfig) -> Result<AnalysisResult> {
    cfg.validate()?;
    check_dim(net.input_dim(), input.dim())?;
    check_dim(net.output_dim(), spec.out_dim())?;
    if cfg.output_shape == OutputShape::ConvexHull2d && spec.rows() != 2 {
        return Err(Error::Config("convex hull output needs a 2-D output space".into()));
    }
    match &cfg.partitioner {
        PartitionerKind::Uniform { counts } => uniform_partition(net, input, counts, spec, cfg),
        PartitionerKind::SimGuided => refine(net, input, spec, cfg, false),
        PartitionerKind::GreedySimGuided => refine(net, input, spec, cfg, true),
    }
}

fn propagate_cell(net: &Network, kind: PropagatorKind, input: &Hyperrect, spec: &Specification) -> Result<OutputBounds> {
    propagate(kind, net, &InputSet::Rect(input.clone()), spec)
}

/// Splits the input into a grid with `counts[k]` cells per dimension (an
/// empty `counts` means a single cell).
pub fn uniform_partition(
    net: &Network,
    input: &Hyperrect,
    counts: &[usize],
    spec: &Specification,
    cfg: &AnalyzerConfig,
) -> Result<AnalysisResult> {
    use rayon::prelude::*;
    let counts: Vec<usize> = if counts.is_empty() {
        vec![1; input.dim()]
    } else {
        counts.to_vec()
    };
    let grid = input.grid(&counts)?;
    let outputs: Vec<OutputBounds> = grid
        .par_iter()
        .map(|c| propagate_cell(net, cfg.propagator, c, spec))
        .collect::<Result<_>>()?;
    let cells: Vec<Cell> = grid
        .into_iter()
        .zip(outputs)
        .enumerate()
        .map(|(id, (input, output))| Cell {
            id,
            input,
            output,
            refined_depth: 0,
        })
        .collect();
    let under = mc_underapprox_spec(net, input, spec, cfg.mc_samples, cfg.seed)?;
    let estimate = fuse(&cells, None, cfg.output_shape)?;
    Ok(AnalysisResult {
        estimate,
        under,
        propagator_calls: cells.len(),
        cells,
    })
}

/// Fuses per-cell bounds (and optionally the sample under-approximation).
fn fuse(cells: &[Cell], under: Option<&UnderApprox>, shape: OutputShape) -> Result<OutputEstimate> {
    let mut boxes: Vec<Hyperrect> = cells.iter().map(|c| c.output.as_rect()).collect::<Result<_>>()?;
    if let Some(u) = under {
        boxes.push(u.interval.clone());
    }
    let bbox = union_aabb(&boxes)?;
    Ok(match shape {
        OutputShape::LinfBall => OutputEstimate::Box(bbox),
        OutputShape::LowerBounds => OutputEstimate::LowerBounds(bbox.lower().clone()),
        OutputShape::ConvexHull2d => {
            let mut pts: Vec<Point2> = Vec::with_capacity(4 * cells.len());
            for c in cells {
                let (l, u) = (&c.output.lower, &c.output.upper);
                pts.extend([[l[0], l[1]], [u[0], l[1]], [u[0], u[1]], [l[0], u[1]]]);
            }
            if let Some(u) = under {
                match &u.hull {
                    Some(h) => pts.extend_from_slice(h.vertices()),
                    None => pts.extend(u.samples.rows().into_iter().map(|r| [r[0], r[1]])),
                }
            }
            match Hull2D::new(&pts) {
                Ok(h) => OutputEstimate::Hull(h),
                Err(Error::DegenerateHull) => OutputEstimate::Box(bbox),
                Err(e) => return Err(e),
            }
        }
    })
}

/// How far a cell's output bounds stick out of the sample under-approximation
/// (positive outside, `<= 0` when contained).
fn excess(out: &OutputBounds, under: &UnderApprox, shape: OutputShape) -> f64 {
    let iv = &under.interval;
    match (shape, &under.hull) {
        (OutputShape::LowerBounds, _) => (0..out.lower.len())
            .map(|k| iv.lower()[k] - out.lower[k])
            .fold(f64::NEG_INFINITY, f64::max),
        (OutputShape::ConvexHull2d, Some(h)) => {
            let (l, u) = (&out.lower, &out.upper);
            [[l[0], l[1]], [u[0], l[1]], [u[0], u[1]], [l[0], u[1]]]
                .into_iter()
                .map(|p| h.distance(p))
                .fold(f64::NEG_INFINITY, f64::max)
        }
        _ => (0..out.lower.len())
            .map(|k| (out.upper[k] - iv.upper()[k]).max(iv.lower()[k] - out.lower[k]))
            .fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Longest edge after normalizing by the initial edge lengths; ties go to the
/// lowest index. `None` when no dimension can be split.
fn split_dim(cell: &Hyperrect, initial_widths: &Array1<f64>) -> Option<(usize, f64)> {
    let widths = cell.widths();
    let mut best: Option<(usize, f64)> = None;
    for k in 0..cell.dim() {
        if initial_widths[k] > 0.0 && widths[k] > 0.0 {
            let w = widths[k] / initial_widths[k];
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((k, w));
            }
        }
    }
    best
}

fn intersect_bounds(child: OutputBounds, parent: &OutputBounds) -> OutputBounds {
    OutputBounds {
        lower: Zip::from(&child.lower).and(&parent.lower).map_collect(|&a, &b| a.max(b)),
        upper: Zip::from(&child.upper).and(&parent.upper).map_collect(|&a, &b| a.min(b)),
    }
}

fn refine(net: &Network, input: &Hyperrect, spec: &Specification, cfg: &AnalyzerConfig, greedy: bool) -> Result<AnalysisResult> {
    let start = Instant::now();
    let under = mc_underapprox_spec(net, input, spec, cfg.mc_samples, cfg.seed)?;
    let initial_widths = input.widths();
    let root = Cell {
        id: 0,
        input: input.clone(),
        output: propagate_cell(net, cfg.propagator, input, spec)?,
        refined_depth: 0,
    };
    let mut calls = 1usize;
    let mut next_id = 1usize;
    let mut stack: Vec<Cell> = vec![root];
    let mut retired: Vec<Cell> = Vec::new();
    let term = &cfg.termination;

    loop {
        let idx = if greedy {
            // max excess; ties resolve to the oldest (smallest id)
            let mut best: Option<(usize, f64, usize)> = None;
            for (i, c) in stack.iter().enumerate() {
                let e = excess(&c.output, &under, cfg.output_shape);
                let better = match best {
                    None => true,
                    Some((_, be, bid)) => e > be || (e == be && c.id < bid),
                };
                if better {
                    best = Some((i, e, c.id));
                }
            }
            match best {
                None => break,
                Some((_, e, _)) if e <= 0.0 => {
                    retired.append(&mut stack);
                    break;
                }
                Some((i, _, _)) => i,
            }
        } else {
            match stack.len() {
                0 => break,
                n => n - 1,
            }
        };
        let cell = stack.remove(idx);
        if excess(&cell.output, &under, cfg.output_shape) <= 0.0 {
            retired.push(cell);
            continue;
        }
        let Some((dim, norm_width)) = split_dim(&cell.input, &initial_widths) else {
            retired.push(cell);
            continue;
        };
        let out_of_budget = term.propagator_call_budget.is_some_and(|b| calls + 2 > b);
        let out_of_time = term.time_budget_s.is_some_and(|t| start.elapsed().as_secs_f64() >= t);
        let too_small = term.min_cell_fraction.is_some_and(|f| norm_width / 2.0 < f);
        if out_of_budget || out_of_time || too_small {
            stack.push(cell);
            break;
        }
        let (left, right) = cell.input.bisect(dim)?;
        let (lo, ro) = rayon::join(
            || propagate_cell(net, cfg.propagator, &left, spec),
            || propagate_cell(net, cfg.propagator, &right, spec),
        );
        calls += 2;
        for (input, out) in [(left, lo?), (right, ro?)] {
            stack.push(Cell {
                id: next_id,
                input,
                output: intersect_bounds(out, &cell.output),
                refined_depth: cell.refined_depth + 1,
            });
            next_id += 1;
        }
    }

    let mut cells = retired;
    cells.extend(stack);
    cells.sort_by_key(|c| c.id);
    let estimate = fuse(&cells, Some(&under), cfg.output_shape)?;
    Ok(AnalysisResult {
        estimate,
        under,
        cells,
        propagator_calls: calls,
    })
}
