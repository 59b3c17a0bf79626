//! Input-set to output-bound propagators: interval bound propagation and a
//! CROWN-style backward linear relaxation.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{Hyperrect, InputSet};
use crate::network::{relu, Network};

/// Rows of `C`; each row is one linear objective over the network output.
#[derive(Debug, Clone, PartialEq)]
pub struct Specification {
    c: Array2<f64>,
}

impl Specification {
    pub fn new(c: Array2<f64>) -> Result<Self> {
        if c.nrows() == 0 {
            return Err(Error::Specification("no objectives".into()));
        }
        if let Some(i) = c.rows().into_iter().position(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::Specification(format!("row {i} is all zeros")));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("specification".into()));
        }
        Ok(Self { c })
    }

    pub fn identity(n: usize) -> Self {
        Self { c: Array2::eye(n) }
    }

    /// Margins `e_label - e_i` for every `i != label`.
    pub fn classification(n: usize, label: usize) -> Result<Self> {
        if label >= n {
            return Err(Error::InvalidLabel { label, outputs: n });
        }
        if n < 2 {
            return Err(Error::Specification("classification needs two outputs".into()));
        }
        let mut c = Array2::zeros((n - 1, n));
        for (row, i) in (0..n).filter(|&i| i != label).enumerate() {
            c[[row, label]] = 1.0;
            c[[row, i]] = -1.0;
        }
        Ok(Self { c })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.c
    }

    pub fn rows(&self) -> usize {
        self.c.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn negated(&self) -> Self {
        Self { c: -&self.c }
    }

    /// Exact value `C y`.
    pub fn apply(&self, y: ArrayView1<f64>) -> Array1<f64> {
        self.c.dot(&y)
    }
}

/// Bounds on the pre-activations `z^(l)` of every hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PreActBounds {
    pub lower: Vec<Array1<f64>>,
    pub upper: Vec<Array1<f64>>,
}

/// Interval `[lower_i, upper_i]` for each specification row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputBounds {
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
}

impl OutputBounds {
    pub fn as_rect(&self) -> Result<Hyperrect> {
        Hyperrect::new(self.lower.clone(), self.upper.clone())
    }

    pub fn contains(&self, v: ArrayView1<f64>) -> bool {
        v.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(&x, (&l, &u))| l <= x && x <= u)
    }
}

/// Affine functions sandwiching the network: `Φx + β <= f(x) <= Ψx + α`
/// for every `x` in `valid_domain`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBoundPair {
    pub upper_a: Array2<f64>,
    pub upper_b: Array1<f64>,
    pub lower_a: Array2<f64>,
    pub lower_b: Array1<f64>,
    pub valid_domain: InputSet,
}

impl AffineBoundPair {
    pub fn out_dim(&self) -> usize {
        self.upper_b.len()
    }

    pub fn in_dim(&self) -> usize {
        self.upper_a.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagatorKind {
    Ibp,
    #[default]
    Crown,
}

/// How CROWN obtains the pre-activation bounds it relaxes against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntermediateBounds {
    /// Backward relaxation of every truncated sub-network (tighter).
    #[default]
    Crown,
    /// Interval arithmetic (faster).
    Ibp,
}

// ---------------------------------------------------------------------------
// IBP
// ---------------------------------------------------------------------------

fn affine_interval(w: &Array2<f64>, b: &Array1<f64>, lo: &Array1<f64>, hi: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let mut out_lo = b.clone();
    let mut out_hi = b.clone();
    for (i, row) in w.rows().into_iter().enumerate() {
        let (mut l, mut u) = (0.0, 0.0);
        for (j, &wij) in row.iter().enumerate() {
            if wij >= 0.0 {
                l += wij * lo[j];
                u += wij * hi[j];
            } else {
                l += wij * hi[j];
                u += wij * lo[j];
            }
        }
        out_lo[i] += l;
        out_hi[i] += u;
    }
    (out_lo, out_hi)
}

/// Layer-wise interval arithmetic. Returns hidden pre-activation bounds and
/// the output box.
pub fn ibp(net: &Network, input: &Hyperrect) -> Result<(PreActBounds, OutputBounds)> {
    check_dim(net.input_dim(), input.dim())?;
    let mut lo = input.lower().clone();
    let mut hi = input.upper().clone();
    let mut pre = PreActBounds {
        lower: Vec::new(),
        upper: Vec::new(),
    };
    let last = net.layers().len() - 1;
    for (l, layer) in net.layers().iter().enumerate() {
        let (zl, zu) = affine_interval(layer.weights(), layer.bias(), &lo, &hi);
        if l < last {
            lo = zl.mapv(relu);
            hi = zu.mapv(relu);
            pre.lower.push(zl);
            pre.upper.push(zu);
        } else {
            lo = zl;
            hi = zu;
        }
    }
    Ok((pre, OutputBounds { lower: lo, upper: hi }))
}

/// Bounds on `C y` for `y` in an output box.
pub fn spec_over_box(spec: &Specification, out: &OutputBounds) -> OutputBounds {
    let (lower, upper) = affine_interval(spec.matrix(), &Array1::zeros(spec.rows()), &out.lower, &out.upper);
    OutputBounds { lower, upper }
}

// ---------------------------------------------------------------------------
// CROWN
// ---------------------------------------------------------------------------

/// Linear relaxation of one ReLU neuron given pre-activation bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ReluRelax {
    upper_slope: f64,
    upper_icpt: f64,
    lower_slope: f64,
}

fn relax_relu(l: f64, u: f64) -> ReluRelax {
    if l >= 0.0 {
        ReluRelax {
            upper_slope: 1.0,
            upper_icpt: 0.0,
            lower_slope: 1.0,
        }
    } else if u <= 0.0 {
        ReluRelax {
            upper_slope: 0.0,
            upper_icpt: 0.0,
            lower_slope: 0.0,
        }
    } else {
        let s = u / (u - l);
        ReluRelax {
            upper_slope: s,
            upper_icpt: -l * s,
            // adaptive lower line; ties pick slope 1
            lower_slope: if u >= -l { 1.0 } else { 0.0 },
        }
    }
}

/// Backward substitution of `C z^(k)` down to the network input, where
/// `z^(k)` is the output of affine layer `k` and `relax[l]` relaxes the ReLU
/// applied to `z^(l)` for `l < k`.
fn backward(net: &Network, k: usize, relax: &[Vec<ReluRelax>], c: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>, Array1<f64>) {
    let m = c.nrows();
    let mut lam_u = c.clone();
    let mut lam_l = c.clone();
    let mut bias_u = Array1::<f64>::zeros(m);
    let mut bias_l = Array1::<f64>::zeros(m);
    for l in (0..=k).rev() {
        let layer = &net.layers()[l];
        bias_u += &lam_u.dot(layer.bias());
        bias_l += &lam_l.dot(layer.bias());
        lam_u = lam_u.dot(layer.weights());
        lam_l = lam_l.dot(layer.weights());
        if l == 0 {
            break;
        }
        // x^(l) = relu(z^(l-1))
        let neurons = &relax[l - 1];
        for i in 0..m {
            for (j, r) in neurons.iter().enumerate() {
                let lu = lam_u[[i, j]];
                if lu >= 0.0 {
                    lam_u[[i, j]] = lu * r.upper_slope;
                    bias_u[i] += lu * r.upper_icpt;
                } else {
                    lam_u[[i, j]] = lu * r.lower_slope;
                }
                let ll = lam_l[[i, j]];
                if ll >= 0.0 {
                    lam_l[[i, j]] = ll * r.lower_slope;
                } else {
                    lam_l[[i, j]] = ll * r.upper_slope;
                    bias_l[i] += ll * r.upper_icpt;
                }
            }
        }
    }
    (lam_u, bias_u, lam_l, bias_l)
}

/// Concretizes affine forms `A x + b` over a set: `(min, max)` per row.
/// Rounding allowance for an affine form evaluated over `bx`: a small
/// multiple of machine epsilon times the magnitude of the summed terms.
fn rounding_slack(a: ArrayView1<f64>, b: f64, bx: &Hyperrect) -> f64 {
    let mag = a
        .iter()
        .zip(bx.lower().iter().zip(bx.upper().iter()))
        .filter(|(&c, _)| c != 0.0)
        .fold(b.abs(), |acc, (&c, (&l, &u))| acc + c.abs() * l.abs().max(u.abs()));
    ROUNDING_FACTOR * f64::EPSILON * mag
}

const ROUNDING_FACTOR: f64 = 64.0;

/// Maximizes the upper forms and minimizes the lower forms over `set`,
/// rounded outward so that floating-point error cannot make them unsound.
fn concretize_forms(
    set: &InputSet,
    upper_a: &Array2<f64>,
    upper_b: &Array1<f64>,
    lower_a: &Array2<f64>,
    lower_b: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let bx = set.bounding_rect();
    let hi = Array1::from_shape_fn(upper_b.len(), |i| {
        set.support(upper_a.row(i)) + upper_b[i] + rounding_slack(upper_a.row(i), upper_b[i], &bx)
    });
    let lo = Array1::from_shape_fn(lower_b.len(), |i| {
        -set.support(lower_a.row(i).mapv(|v| -v).view()) + lower_b[i] - rounding_slack(lower_a.row(i), lower_b[i], &bx)
    });
    (lo, hi)
}

/// CROWN pre-activation bounds for every hidden layer.
pub fn crown_preact(net: &Network, input: &InputSet, mode: IntermediateBounds) -> Result<PreActBounds> {
    check_dim(net.input_dim(), input.dim())?;
    if mode == IntermediateBounds::Ibp {
        return Ok(ibp(net, &input.bounding_rect())?.0);
    }
    let mut pre = PreActBounds {
        lower: Vec::new(),
        upper: Vec::new(),
    };
    let mut relax: Vec<Vec<ReluRelax>> = Vec::new();
    for k in 0..net.num_hidden() {
        let n = net.layers()[k].out_dim();
        let (ua, ub, la, lb) = backward(net, k, &relax, &Array2::eye(n));
        let (lo, hi) = concretize_forms(input, &ua, &ub, &la, &lb);
        if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteBounds(k));
        }
        relax.push(lo.iter().zip(hi.iter()).map(|(&l, &u)| relax_relu(l, u)).collect());
        pre.lower.push(lo);
        pre.upper.push(hi);
    }
    Ok(pre)
}

/// Affine over/under-approximation of the whole network over `input`.
pub fn crown_relax(net: &Network, input: &InputSet) -> Result<AffineBoundPair> {
    crown_relax_with(net, input, IntermediateBounds::Crown)
}

pub fn crown_relax_with(net: &Network, input: &InputSet, mode: IntermediateBounds) -> Result<AffineBoundPair> {
    let pre = crown_preact(net, input, mode)?;
    let relax: Vec<Vec<ReluRelax>> = pre
        .lower
        .iter()
        .zip(&pre.upper)
        .map(|(lo, hi)| lo.iter().zip(hi.iter()).map(|(&l, &u)| relax_relu(l, u)).collect())
        .collect();
    let (upper_a, upper_b, lower_a, lower_b) =
        backward(net, net.num_hidden(), &relax, &Array2::eye(net.output_dim()));
    if upper_a.iter().chain(lower_a.iter()).chain(upper_b.iter()).chain(lower_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteBounds(net.num_hidden()));
    }
    Ok(AffineBoundPair {
        upper_a,
        upper_b,
        lower_a,
        lower_b,
        valid_domain: input.clone(),
    })
}

/// Spec-row affine forms: upper picks `Ψ/α` where `c_j >= 0` and `Φ/β`
/// otherwise; lower mirrors.
pub fn compose_spec(bnds: &AffineBoundPair, spec: &Specification) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>, Array1<f64>)> {
    check_dim(bnds.out_dim(), spec.out_dim())?;
    let c = spec.matrix();
    let pos = c.mapv(|v| v.max(0.0));
    let neg = c.mapv(|v| v.min(0.0));
    let up_a = pos.dot(&bnds.upper_a) + neg.dot(&bnds.lower_a);
    let up_b = pos.dot(&bnds.upper_b) + neg.dot(&bnds.lower_b);
    let lo_a = pos.dot(&bnds.lower_a) + neg.dot(&bnds.upper_a);
    let lo_b = pos.dot(&bnds.lower_b) + neg.dot(&bnds.upper_b);
    Ok((up_a, up_b, lo_a, lo_b))
}

/// Closed-form maximization/minimization of the relaxed network over `input`.
pub fn concretize(bnds: &AffineBoundPair, input: &InputSet, spec: &Specification) -> Result<OutputBounds> {
    check_dim(bnds.in_dim(), input.dim())?;
    if !bnds.valid_domain.contains_set(input) {
        return Err(Error::DomainMismatch);
    }
    let (ua, ub, la, lb) = compose_spec(bnds, spec)?;
    let (lower, upper) = concretize_forms(input, &ua, &ub, &la, &lb);
    Ok(OutputBounds { lower, upper })
}

/// Bounds on `C f(x)` over `input` with the chosen propagator.
pub fn propagate(kind: PropagatorKind, net: &Network, input: &InputSet, spec: &Specification) -> Result<OutputBounds> {
    check_dim(net.output_dim(), spec.out_dim())?;
    match kind {
        PropagatorKind::Ibp => {
            let (_, out) = ibp(net, &input.bounding_rect())?;
            Ok(spec_over_box(spec, &out))
        }
        PropagatorKind::Crown => {
            let relax = crown_relax(net, input)?;
            concretize(&relax, input, spec)
        }
    }
}

/// Output box (identity specification) for a box input.
pub fn output_box(kind: PropagatorKind, net: &Network, input: &Hyperrect) -> Result<Hyperrect> {
    let spec = Specification::identity(net.output_dim());
    propagate(kind, net, &InputSet::Rect(input.clone()), &spec)?.as_rect()
}
