//! Convex hulls of planar point sets (Andrew's monotone chain).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = [f64; 2];

/// Convex polygon, counter-clockwise, no three consecutive vertices collinear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hull2D {
    vertices: Vec<Point2>,
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

impl Hull2D {
    pub fn new(points: &[Point2]) -> Result<Self> {
        let mut pts: Vec<Point2> = points.iter().copied().filter(|p| p[0].is_finite() && p[1].is_finite()).collect();
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        pts.dedup();
        if pts.len() < 3 {
            return Err(Error::DegenerateHull);
        }
        let mut hull: Vec<Point2> = Vec::with_capacity(2 * pts.len());
        for &p in &pts {
            while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        let lower_len = hull.len() + 1;
        for &p in pts.iter().rev().skip(1) {
            while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
        if hull.len() < 3 {
            return Err(Error::DegenerateHull);
        }
        Ok(Self { vertices: hull })
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Shoelace area.
    pub fn area(&self) -> f64 {
        0.5 * self.edges().map(|(a, b)| a[0] * b[1] - b[0] * a[1]).sum::<f64>()
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.distance(p) <= 0.0
    }

    /// Signed Euclidean distance to the boundary: negative inside, positive outside.
    pub fn distance(&self, p: Point2) -> f64 {
        let mut inside = true;
        let mut best = f64::INFINITY;
        for (a, b) in self.edges() {
            if cross(a, b, p) < 0.0 {
                inside = false;
            }
            best = best.min(segment_distance(p, a, b));
        }
        if inside {
            -best
        } else {
            best
        }
    }
}

fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (cx * cx + cy * cy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> Hull2D {
        Hull2D::new(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]]).unwrap()
    }

    #[test]
    fn square_hull() {
        let h = unit_square();
        assert_eq!(h.vertices().len(), 4);
        assert!((h.area() - 1.0).abs() < 1e-15);
        assert!((h.distance([0.5, 0.5]) + 0.5).abs() < 1e-15);
        assert!((h.distance([2.0, 0.5]) - 1.0).abs() < 1e-15);
        assert!((h.distance([2.0, 2.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        assert!(matches!(Hull2D::new(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]), Err(Error::DegenerateHull)));
        assert!(matches!(Hull2D::new(&[[0.0, 0.0], [1.0, 1.0]]), Err(Error::DegenerateHull)));
    }

    #[test]
    fn collinear_boundary_points_dropped() {
        let h = Hull2D::new(&[[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(h.vertices().len(), 4);
    }

    #[test]
    fn random_points_inside_their_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point2> = (0..200)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-2.0..3.0)])
            .collect();
        let h = Hull2D::new(&pts).unwrap();
        for p in &pts {
            assert!(h.distance(*p) <= 1e-12);
        }
        // counter-clockwise orientation gives positive area
        assert!(h.area() > 0.0);
    }
}
