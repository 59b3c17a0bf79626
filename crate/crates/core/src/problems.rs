//! Analysis problems on a network in isolation: the output reachable box,
//! classification robustness and the minimal adversarial radius.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{Hyperrect, InputSet, Norm, WeightedBall};
use crate::network::Network;
use crate::partition::{analyze, AnalyzerConfig, OutputEstimate, OutputShape};
use crate::propagators::{propagate, Specification};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Verified,
    NotVerified,
    Unknown,
}

/// `margins[k]` lower-bounds `f_label - f_i` for the k-th label `i != label`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: Status,
    pub margins: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimalEpsResult {
    pub certified_lower: f64,
    pub first_unverified: f64,
    pub iterations: usize,
}

pub const DEFAULT_EPS_TOL: f64 = 1e-4;
const EPS_START: f64 = 1e-3;
const EPS_GROWTH: f64 = 2.0;
const EPS_CEILING: f64 = 1e6;

/// Outer box of `f(input)`: both bounds of every output coordinate.
pub fn output_ball(net: &Network, input: &Hyperrect, cfg: &AnalyzerConfig) -> Result<Hyperrect> {
    let cfg = AnalyzerConfig {
        output_shape: OutputShape::LinfBall,
        ..cfg.clone()
    };
    let res = analyze(net, input, &Specification::identity(net.output_dim()), &cfg)?;
    match res.estimate {
        OutputEstimate::Box(r) => Ok(r),
        _ => unreachable!("box shape requested"),
    }
}

/// Tries to prove `argmax f(x) = label` for every `x` in `input`. Box inputs
/// go through the configured partitioner; balls use one propagator call.
pub fn verify_classification(net: &Network, input: &InputSet, label: usize, cfg: &AnalyzerConfig) -> Result<Verdict> {
    check_dim(net.input_dim(), input.dim())?;
    let spec = Specification::classification(net.output_dim(), label)?;
    let margins: Array1<f64> = match input {
        InputSet::Rect(r) => {
            let cfg = AnalyzerConfig {
                output_shape: OutputShape::LowerBounds,
                ..cfg.clone()
            };
            match analyze(net, r, &spec, &cfg)?.estimate {
                OutputEstimate::LowerBounds(l) => l,
                _ => unreachable!("lower-bound shape requested"),
            }
        }
        InputSet::Ball(_) => propagate(cfg.propagator, net, input, &spec)?.lower,
    };
    Ok(verdict_from_margins(&margins))
}

/// Verified iff every margin is strictly positive; non-finite margins give
/// an unknown verdict.
pub fn verdict_from_margins(margins: &Array1<f64>) -> Verdict {
    let status = if margins.iter().any(|m| !m.is_finite()) {
        Status::Unknown
    } else if margins.iter().all(|&m| m > 0.0) {
        Status::Verified
    } else {
        Status::NotVerified
    };
    Verdict {
        status,
        margins: margins.to_vec(),
    }
}

/// Index of the strictly largest entry.
pub fn strict_argmax(v: &Array1<f64>) -> Result<usize> {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    if v.iter().enumerate().any(|(i, &x)| i != best && x == v[best]) {
        return Err(Error::AmbiguousLabel);
    }
    Ok(best)
}

fn perturbation_set(x: &Array1<f64>, eps: f64, p: Norm) -> Result<InputSet> {
    Ok(match p {
        Norm::Inf => InputSet::Rect(Hyperrect::from_center_radius(x, &Array1::from_elem(x.len(), eps))?),
        _ => InputSet::Ball(WeightedBall::uniform(x.clone(), eps, p)?),
    })
}

/// Largest certified radius around `x_nom`, found by geometric growth and
/// then bisection until the bracket is narrower than `tol`.
pub fn minimal_adversarial_eps(net: &Network, x_nom: &Array1<f64>, p: Norm, cfg: &AnalyzerConfig, tol: f64) -> Result<MinimalEpsResult> {
    check_dim(net.input_dim(), x_nom.len())?;
    if !(tol > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let label = strict_argmax(&net.forward(x_nom.view())?)?;
    let mut iterations = 0;
    let mut verified = |eps: f64| -> Result<bool> {
        iterations += 1;
        let set = perturbation_set(x_nom, eps, p)?;
        Ok(verify_classification(net, &set, label, cfg)?.status == Status::Verified)
    };
    let mut lo = 0.0;
    let mut hi = EPS_START;
    while verified(hi)? {
        lo = hi;
        hi *= EPS_GROWTH;
        if hi > EPS_CEILING {
            return Ok(MinimalEpsResult {
                certified_lower: lo,
                first_unverified: f64::INFINITY,
                iterations,
            });
        }
    }
    while hi - lo >= tol {
        let mid = 0.5 * (lo + hi);
        if verified(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(MinimalEpsResult {
        certified_lower: lo,
        first_unverified: hi,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{PartitionerKind, Termination};
    use crate::propagators::PropagatorKind;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw() -> AnalyzerConfig {
        AnalyzerConfig::raw(PropagatorKind::Crown)
    }

    fn mirror_net() -> Network {
        Network::from_rows(&[(vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0])]).unwrap()
    }

    #[test]
    fn identity_output_ball() {
        let net = Network::from_rows(&[(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0])]).unwrap();
        let input = Hyperrect::from_slices(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let ibp = AnalyzerConfig::raw(PropagatorKind::Ibp);
        assert_eq!(output_ball(&net, &input, &ibp).unwrap(), input);
        let crown = output_ball(&net, &input, &raw()).unwrap();
        assert!(crown.contains_rect(&input));
        assert!((&crown.widths() - &input.widths()).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn affine_output_ball() {
        let net = Network::from_rows(&[(vec![vec![2.0, -1.0], vec![0.5, 3.0]], vec![1.0, -2.0])]).unwrap();
        let input = Hyperrect::from_slices(&[-1.0, 0.0], &[1.0, 2.0]).unwrap();
        let b = output_ball(&net, &input, &raw()).unwrap();
        // center (0,1), radius (1,1): A c + b = (0,1), |A| r = (3, 3.5)
        let expect = Hyperrect::from_slices(&[-3.0, -2.5], &[3.0, 4.5]).unwrap();
        for k in 0..2 {
            assert!((b.lower()[k] - expect.lower()[k]).abs() < 1e-12);
            assert!((b.upper()[k] - expect.upper()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn output_ball_contains_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = Network::random(&[2, 50, 2], &mut rng);
        let input = Hyperrect::from_slices(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let cfg = AnalyzerConfig {
            partitioner: PartitionerKind::GreedySimGuided,
            termination: Termination::calls(31),
            ..raw()
        };
        let b = output_ball(&net, &input, &cfg).unwrap();
        for _ in 0..100_000 {
            let y = net.forward(input.sample(&mut rng).view()).unwrap();
            assert!(b.contains(y.view()));
        }
    }

    #[test]
    fn point_input_verifies_nominal_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let net = Network::random(&[3, 8, 4], &mut rng);
        let x = array![0.2, -0.4, 0.9];
        let label = strict_argmax(&net.forward(x.view()).unwrap()).unwrap();
        let v = verify_classification(&net, &InputSet::Rect(Hyperrect::point(&x)), label, &raw()).unwrap();
        assert_eq!(v.status, Status::Verified);
        assert_eq!(v.margins.len(), 3);
    }

    #[test]
    fn mirror_net_margins() {
        let net = mirror_net();
        let ball = |eps| InputSet::Ball(WeightedBall::uniform(array![0.5], eps, Norm::Inf).unwrap());
        let v = verify_classification(&net, &ball(0.2), 0, &raw()).unwrap();
        assert_eq!(v.status, Status::Verified);
        assert!((v.margins[0] - 0.6).abs() < 1e-12);
        let v = verify_classification(&net, &ball(0.6), 0, &raw()).unwrap();
        assert_eq!(v.status, Status::NotVerified);
        // grid oracle: a counterexample exists in [-0.1, 1.1]
        let found = (0..=1200).map(|i| -0.1 + i as f64 * 1e-3).any(|x| {
            let y = net.forward(array![x].view()).unwrap();
            y[1] >= y[0]
        });
        assert!(found);
    }

    #[test]
    fn invalid_label() {
        let v = verify_classification(&mirror_net(), &InputSet::Rect(Hyperrect::point(&array![0.1])), 2, &raw());
        assert!(matches!(v, Err(Error::InvalidLabel { .. })));
    }

    #[test]
    fn mirror_net_minimal_eps() {
        for p in [Norm::Inf, Norm::P(2.0), Norm::One] {
            let r = minimal_adversarial_eps(&mirror_net(), &array![0.5], p, &raw(), DEFAULT_EPS_TOL).unwrap();
            assert!(r.certified_lower <= 0.5 && 0.5 - r.certified_lower < DEFAULT_EPS_TOL, "{p:?} {r:?}");
            assert!(r.certified_lower <= r.first_unverified);
        }
    }

    #[test]
    fn tied_label_is_rejected() {
        let r = minimal_adversarial_eps(&mirror_net(), &array![0.0], Norm::Inf, &raw(), 1e-4);
        assert!(matches!(r, Err(Error::AmbiguousLabel)));
    }

    #[test]
    fn stable_region_has_positive_radius() {
        // h = relu(x1 + 2), f = (h, 1): label 0 near x = (1, 0), every neuron active
        let net = Network::from_rows(&[
            (vec![vec![1.0, 0.0]], vec![2.0]),
            (vec![vec![1.0], vec![0.0]], vec![0.0, 1.0]),
        ])
        .unwrap();
        let r = minimal_adversarial_eps(&net, &array![1.0, 0.0], Norm::Inf, &raw(), 1e-4).unwrap();
        assert!(r.certified_lower > 0.0);
        assert!((r.certified_lower - 2.0).abs() < 1e-4);
    }

    #[test]
    fn certified_radius_below_grid_attack() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = Network::random(&[2, 5, 2], &mut rng);
        let x = array![0.1, -0.2];
        let label = strict_argmax(&net.forward(x.view()).unwrap()).unwrap();
        let r = minimal_adversarial_eps(&net, &x, Norm::Inf, &raw(), 1e-4).unwrap();
        let mut attack = f64::INFINITY;
        let n = 400;
        for i in 0..=n {
            for j in 0..=n {
                let d = array![-4.0 + 8.0 * i as f64 / n as f64, -4.0 + 8.0 * j as f64 / n as f64];
                let y = net.forward((&x + &d).view()).unwrap();
                if strict_argmax(&y).map_or(true, |l| l != label) {
                    attack = attack.min(d.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                }
            }
        }
        assert!(r.certified_lower <= attack, "{} > {attack}", r.certified_lower);
    }
}
