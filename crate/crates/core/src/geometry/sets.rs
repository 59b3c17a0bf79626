use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};

/// Order `p` of an ℓp norm, `1 <= p <= ∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Norm {
    One,
    P(f64),
    Inf,
}

impl Norm {
    pub fn new(p: f64) -> Result<Self> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::InvalidSet(format!("norm order {p} must be >= 1")));
        }
        Ok(if p == 1.0 {
            Norm::One
        } else if p.is_infinite() {
            Norm::Inf
        } else {
            Norm::P(p)
        })
    }

    pub fn order(self) -> f64 {
        match self {
            Norm::One => 1.0,
            Norm::P(p) => p,
            Norm::Inf => f64::INFINITY,
        }
    }

    /// Hölder conjugate `q` with `1/p + 1/q = 1`.
    pub fn dual(self) -> Norm {
        match self {
            Norm::One => Norm::Inf,
            Norm::Inf => Norm::One,
            Norm::P(p) => Norm::P(p / (p - 1.0)),
        }
    }

    pub fn eval<I: IntoIterator<Item = f64>>(self, values: I) -> f64 {
        let it = values.into_iter();
        match self {
            Norm::One => it.map(f64::abs).sum(),
            Norm::Inf => it.map(f64::abs).fold(0.0, f64::max),
            Norm::P(p) => it.map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p),
        }
    }
}

impl Serialize for Norm {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Norm::Inf => s.serialize_str("inf"),
            other => s.serialize_f64(other.order()),
        }
    }
}

impl<'de> Deserialize<'de> for Norm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let p = match Raw::deserialize(d)? {
            Raw::Num(p) => p,
            Raw::Str(s) if s == "inf" => f64::INFINITY,
            Raw::Str(s) => return Err(serde::de::Error::custom(format!("unknown norm `{s}`"))),
        };
        Norm::new(p).map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RectDoc", into = "RectDoc")]
pub struct Hyperrect {
    lower: Array1<f64>,
    upper: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RectDoc {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl TryFrom<RectDoc> for Hyperrect {
    type Error = Error;
    fn try_from(d: RectDoc) -> Result<Self> {
        Hyperrect::new(Array1::from(d.lower), Array1::from(d.upper))
    }
}

impl From<Hyperrect> for RectDoc {
    fn from(r: Hyperrect) -> Self {
        RectDoc {
            lower: r.lower.to_vec(),
            upper: r.upper.to_vec(),
        }
    }
}

impl Hyperrect {
    pub fn new(lower: Array1<f64>, upper: Array1<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if lower.iter().chain(upper.iter()).any(|v| v.is_nan()) {
            return Err(Error::NonFinite("box bounds".into()));
        }
        if let Some(i) = (0..lower.len()).find(|&i| lower[i] > upper[i]) {
            return Err(Error::InvalidSet(format!(
                "lower[{i}] = {} exceeds upper[{i}] = {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn from_slices(lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::new(Array1::from(lower.to_vec()), Array1::from(upper.to_vec()))
    }

    pub fn from_center_radius(center: &Array1<f64>, radius: &Array1<f64>) -> Result<Self> {
        check_dim(center.len(), radius.len())?;
        if radius.iter().any(|&r| r < 0.0) {
            return Err(Error::InvalidSet("negative radius".into()));
        }
        Self::new(center - radius, center + radius)
    }

    pub fn point(x: &Array1<f64>) -> Self {
        Self {
            lower: x.clone(),
            upper: x.clone(),
        }
    }

    pub fn lower(&self) -> &Array1<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &Array1<f64> {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Array1<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn radius(&self) -> Array1<f64> {
        (&self.upper - &self.lower) * 0.5
    }

    pub fn widths(&self) -> Array1<f64> {
        &self.upper - &self.lower
    }

    /// Product of edge lengths (area in 2-D).
    pub fn volume(&self) -> f64 {
        self.widths().iter().product()
    }

    pub fn as_ball(&self) -> WeightedBall {
        WeightedBall {
            center: self.center(),
            radius: self.radius(),
            p: Norm::Inf,
        }
    }

    pub fn contains(&self, x: ArrayView1<f64>) -> bool {
        x.len() == self.dim()
            && Zip::from(&self.lower)
                .and(&self.upper)
                .and(&x)
                .all(|&l, &u, &v| l <= v && v <= u)
    }

    pub fn contains_rect(&self, other: &Hyperrect) -> bool {
        other.dim() == self.dim()
            && Zip::from(&self.lower)
                .and(&self.upper)
                .and(&other.lower)
                .and(&other.upper)
                .all(|&l, &u, &ol, &ou| l <= ol && ou <= u)
    }

    /// Closed boxes sharing at least one point.
    pub fn intersects(&self, other: &Hyperrect) -> bool {
        self.intersection(other).is_some()
    }

    pub fn intersection(&self, other: &Hyperrect) -> Option<Hyperrect> {
        if other.dim() != self.dim() {
            return None;
        }
        let lower = Zip::from(&self.lower).and(&other.lower).map_collect(|&a, &b| a.max(b));
        let upper = Zip::from(&self.upper).and(&other.upper).map_collect(|&a, &b| a.min(b));
        Hyperrect::new(lower, upper).ok()
    }

    /// Exact support function `max_{x in box} c·x`.
    pub fn support(&self, c: ArrayView1<f64>) -> f64 {
        Zip::from(&c)
            .and(&self.lower)
            .and(&self.upper)
            .fold(0.0, |acc, &ci, &l, &u| acc + if ci >= 0.0 { ci * u } else { ci * l })
    }

    /// Splits at the midpoint of `dim`.
    pub fn bisect(&self, dim: usize) -> Result<(Hyperrect, Hyperrect)> {
        if dim >= self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: dim,
            });
        }
        if !(self.upper[dim] > self.lower[dim]) {
            return Err(Error::DegenerateDimension(dim));
        }
        let mid = 0.5 * (self.lower[dim] + self.upper[dim]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[dim] = mid;
        right.lower[dim] = mid;
        Ok((left, right))
    }

    /// Uniform grid with `counts[k]` cells along dimension `k`, in row-major order.
    pub fn grid(&self, counts: &[usize]) -> Result<Vec<Hyperrect>> {
        check_dim(self.dim(), counts.len())?;
        if counts.contains(&0) {
            return Err(Error::Config("grid counts must be >= 1".into()));
        }
        let total = counts.iter().map(|&c| c as u128).product::<u128>();
        if total > 1_000_000 {
            return Err(Error::TooManyCells(total));
        }
        let widths = self.widths();
        let mut cells = Vec::with_capacity(total as usize);
        let mut idx = vec![0usize; counts.len()];
        for _ in 0..total {
            let lower = Array1::from_shape_fn(self.dim(), |k| {
                if idx[k] == 0 {
                    self.lower[k]
                } else {
                    self.lower[k] + widths[k] * idx[k] as f64 / counts[k] as f64
                }
            });
            let upper = Array1::from_shape_fn(self.dim(), |k| {
                if idx[k] + 1 == counts[k] {
                    self.upper[k]
                } else {
                    self.lower[k] + widths[k] * (idx[k] + 1) as f64 / counts[k] as f64
                }
            });
            cells.push(Hyperrect { lower, upper });
            for k in (0..counts.len()).rev() {
                idx[k] += 1;
                if idx[k] < counts[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(cells)
    }

    /// All `2^n` vertices (duplicates collapse along degenerate dimensions).
    pub fn corners(&self) -> Vec<Array1<f64>> {
        let n = self.dim();
        assert!(n < 24, "corner enumeration over {n} dimensions");
        (0..1usize << n)
            .map(|mask| {
                Array1::from_shape_fn(n, |k| {
                    if mask >> k & 1 == 1 {
                        self.upper[k]
                    } else {
                        self.lower[k]
                    }
                })
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        Zip::from(&self.lower)
            .and(&self.upper)
            .map_collect(|&l, &u| (l + (u - l) * rng.random::<f64>()).min(u))
    }

    /// Minkowski sum of two boxes.
    pub fn minkowski_sum(&self, other: &Hyperrect) -> Result<Hyperrect> {
        check_dim(self.dim(), other.dim())?;
        Hyperrect::new(&self.lower + &other.lower, &self.upper + &other.upper)
    }

    /// Projection onto the coordinates in `dims`.
    pub fn project(&self, dims: &[usize]) -> Hyperrect {
        Hyperrect {
            lower: dims.iter().map(|&d| self.lower[d]).collect(),
            upper: dims.iter().map(|&d| self.upper[d]).collect(),
        }
    }
}

/// Smallest box containing every point.
pub fn aabb<'a, I>(points: I) -> Result<Hyperrect>
where
    I: IntoIterator<Item = ArrayView1<'a, f64>>,
{
    let mut it = points.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::InvalidSet("bounding box of no points".into()))?;
    let mut lower = first.to_owned();
    let mut upper = first.to_owned();
    for p in it {
        check_dim(lower.len(), p.len())?;
        Zip::from(&mut lower).and(&mut upper).and(&p).for_each(|l, u, &v| {
            *l = l.min(v);
            *u = u.max(v);
        });
    }
    Hyperrect::new(lower, upper)
}

/// Smallest box containing every box.
pub fn union_aabb<'a, I>(rects: I) -> Result<Hyperrect>
where
    I: IntoIterator<Item = &'a Hyperrect>,
{
    let mut it = rects.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::InvalidSet("union of no boxes".into()))?;
    let mut out = first.clone();
    for r in it {
        check_dim(out.dim(), r.dim())?;
        Zip::from(&mut out.lower).and(&r.lower).for_each(|a, &b| *a = a.min(b));
        Zip::from(&mut out.upper).and(&r.upper).for_each(|a, &b| *a = a.max(b));
    }
    Ok(out)
}

/// `{x : ‖(x - center) ⊘ radius‖_p <= 1}`; coordinates with zero radius are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BallDoc", into = "BallDoc")]
pub struct WeightedBall {
    center: Array1<f64>,
    radius: Array1<f64>,
    p: Norm,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct BallDoc {
    pub center: Vec<f64>,
    pub radius: Vec<f64>,
    pub p: Norm,
}

impl TryFrom<BallDoc> for WeightedBall {
    type Error = Error;
    fn try_from(d: BallDoc) -> Result<Self> {
        WeightedBall::new(Array1::from(d.center), Array1::from(d.radius), d.p)
    }
}

impl From<WeightedBall> for BallDoc {
    fn from(b: WeightedBall) -> Self {
        BallDoc {
            center: b.center.to_vec(),
            radius: b.radius.to_vec(),
            p: b.p,
        }
    }
}

impl WeightedBall {
    pub fn new(center: Array1<f64>, radius: Array1<f64>, p: Norm) -> Result<Self> {
        check_dim(center.len(), radius.len())?;
        if center.iter().chain(radius.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ball parameters".into()));
        }
        if radius.iter().any(|&r| r < 0.0) {
            return Err(Error::InvalidSet("negative radius".into()));
        }
        Ok(Self { center, radius, p })
    }

    /// Ball with the same scalar radius in every coordinate.
    pub fn uniform(center: Array1<f64>, eps: f64, p: Norm) -> Result<Self> {
        let n = center.len();
        Self::new(center, Array1::from_elem(n, eps), p)
    }

    pub fn center(&self) -> &Array1<f64> {
        &self.center
    }

    pub fn radius(&self) -> &Array1<f64> {
        &self.radius
    }

    pub fn p(&self) -> Norm {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn is_point(&self) -> bool {
        self.radius.iter().all(|&r| r == 0.0)
    }

    /// `max_{x in ball} c·x = ‖ε ⊙ c‖_q + c·center`.
    pub fn support(&self, c: ArrayView1<f64>) -> f64 {
        support_value(c, self)
    }

    pub fn bounding_rect(&self) -> Hyperrect {
        Hyperrect {
            lower: &self.center - &self.radius,
            upper: &self.center + &self.radius,
        }
    }

    pub fn contains(&self, x: ArrayView1<f64>) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        let mut scaled = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let d = x[i] - self.center[i];
            if self.radius[i] == 0.0 {
                if d != 0.0 {
                    return false;
                }
            } else {
                scaled.push(d / self.radius[i]);
            }
        }
        self.p.eval(scaled) <= 1.0 + 1e-12
    }

    /// Uniform sample from the ball.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        let active: Vec<usize> = (0..self.dim()).filter(|&i| self.radius[i] > 0.0).collect();
        let mut x = self.center.clone();
        if active.is_empty() {
            return x;
        }
        let unit = unit_ball_sample(self.p, active.len(), rng);
        for (k, &i) in active.iter().enumerate() {
            x[i] += self.radius[i] * unit[k];
        }
        x
    }
}

/// Uniform sample from the unit ℓp ball in `n` dimensions, using the
/// generalized-Gaussian construction `g / (‖g‖_p^p + W)^(1/p)`.
fn unit_ball_sample<R: Rng + ?Sized>(p: Norm, n: usize, rng: &mut R) -> Vec<f64> {
    match p {
        Norm::Inf => (0..n).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect(),
        _ => {
            let q = p.order();
            let gamma = Gamma::new(1.0 / q, 1.0).expect("valid gamma");
            let g: Vec<f64> = (0..n)
                .map(|_| {
                    let mag: f64 = gamma.sample(rng).powf(1.0 / q);
                    if rng.random::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            let w: f64 = Exp1.sample(rng);
            let denom = (g.iter().map(|v| v.abs().powf(q)).sum::<f64>() + w).powf(1.0 / q);
            g.into_iter().map(|v| v / denom).collect()
        }
    }
}

/// Closed-form maximum of `c·x` over a weighted ℓp ball via the dual norm.
/// Zero-radius coordinates contribute only through `c·center`.
pub fn support_value(c: ArrayView1<f64>, ball: &WeightedBall) -> f64 {
    let linear = c.dot(&ball.center);
    let scaled = c
        .iter()
        .zip(ball.radius.iter())
        .filter(|(_, &r)| r > 0.0)
        .map(|(&ci, &r)| ci * r);
    ball.p.dual().eval(scaled) + linear
}

/// Input uncertainty set accepted by the propagators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum InputSet {
    Rect(Hyperrect),
    Ball(WeightedBall),
}

impl InputSet {
    pub fn dim(&self) -> usize {
        match self {
            InputSet::Rect(r) => r.dim(),
            InputSet::Ball(b) => b.dim(),
        }
    }

    pub fn support(&self, c: ArrayView1<f64>) -> f64 {
        match self {
            InputSet::Rect(r) => r.support(c),
            InputSet::Ball(b) => b.support(c),
        }
    }

    pub fn bounding_rect(&self) -> Hyperrect {
        match self {
            InputSet::Rect(r) => r.clone(),
            InputSet::Ball(b) => b.bounding_rect(),
        }
    }

    pub fn is_point(&self) -> bool {
        match self {
            InputSet::Rect(r) => r.lower == r.upper,
            InputSet::Ball(b) => b.is_point(),
        }
    }

    pub fn center(&self) -> Array1<f64> {
        match self {
            InputSet::Rect(r) => r.center(),
            InputSet::Ball(b) => b.center.clone(),
        }
    }

    pub fn contains(&self, x: ArrayView1<f64>) -> bool {
        match self {
            InputSet::Rect(r) => r.contains(x),
            InputSet::Ball(b) => b.contains(x),
        }
    }

    /// Sufficient test for `other ⊆ self`: equality, box inclusion for
    /// box-shaped `self`, or (for small dimension) every vertex of `other`'s
    /// bounding box lying in `self`.
    pub fn contains_set(&self, other: &InputSet) -> bool {
        if self == other {
            return true;
        }
        if self.dim() != other.dim() {
            return false;
        }
        let outer = other.bounding_rect();
        match self {
            InputSet::Rect(r) => r.contains_rect(&outer),
            InputSet::Ball(b) if b.p == Norm::Inf => b.bounding_rect().contains_rect(&outer),
            InputSet::Ball(b) => {
                outer.dim() <= 16 && outer.corners().iter().all(|v| b.contains(v.view()))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        match self {
            InputSet::Rect(r) => r.sample(rng),
            InputSet::Ball(b) => b.sample(rng),
        }
    }
}

impl From<Hyperrect> for InputSet {
    fn from(r: Hyperrect) -> Self {
        InputSet::Rect(r)
    }
}

impl From<WeightedBall> for InputSet {
    fn from(b: WeightedBall) -> Self {
        InputSet::Ball(b)
    }
}

/// H-polytope `{x : A x <= b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolytopeDoc", into = "PolytopeDoc")]
pub struct Polytope {
    a: Array2<f64>,
    b: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct PolytopeDoc {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl TryFrom<PolytopeDoc> for Polytope {
    type Error = Error;
    fn try_from(d: PolytopeDoc) -> Result<Self> {
        let a = crate::network::matrix_from_rows(&d.a).map_err(Error::InvalidSet)?;
        Polytope::new(a, Array1::from(d.b))
    }
}

impl From<Polytope> for PolytopeDoc {
    fn from(p: Polytope) -> Self {
        PolytopeDoc {
            a: crate::network::matrix_to_rows(&p.a),
            b: p.b.to_vec(),
        }
    }
}

impl Polytope {
    pub fn new(a: Array2<f64>, b: Array1<f64>) -> Result<Self> {
        check_dim(a.nrows(), b.len())?;
        if a.nrows() == 0 {
            return Err(Error::InvalidSet("polytope needs at least one constraint".into()));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("polytope constraints".into()));
        }
        if let Some(i) = a.rows().into_iter().position(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::InvalidSet(format!("constraint row {i} is all zeros")));
        }
        Ok(Self { a, b })
    }

    /// The `2n` facets `x_k <= u_k`, `-x_k <= -l_k`.
    pub fn from_rect(r: &Hyperrect) -> Self {
        let n = r.dim();
        let mut a = Array2::zeros((2 * n, n));
        let mut b = Array1::zeros(2 * n);
        for k in 0..n {
            a[[k, k]] = 1.0;
            b[k] = r.upper[k];
            a[[n + k, k]] = -1.0;
            b[n + k] = -r.lower[k];
        }
        Self { a, b }
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array1<f64> {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn contains(&self, x: ArrayView1<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && self
                .a
                .rows()
                .into_iter()
                .zip(self.b.iter())
                .all(|(row, &bi)| row.dot(&x) <= bi + tol)
    }

    /// Intersection: stacked constraints.
    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        check_dim(self.dim(), other.dim())?;
        let a = ndarray::concatenate(ndarray::Axis(0), &[self.a.view(), other.a.view()])
            .expect("same column count");
        let b = ndarray::concatenate(ndarray::Axis(0), &[self.b.view(), other.b.view()]).expect("1-d");
        Ok(Polytope { a, b })
    }
}
