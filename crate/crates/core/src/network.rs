//! Feed-forward ReLU networks.
//!
//! A network with `L` hidden layers holds `L + 1` affine layers. Every layer
//! except the last is followed by the hidden activation; the output layer is
//! affine only.

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::UnknownActivation(other.to_string())),
        }
    }
}

/// One affine map `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::LayerShape {
                layer: 0,
                msg: format!("{} weight rows but {} biases", weights.nrows(), bias.len()),
            });
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// Immutable feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    hidden_activation: Activation,
}

impl Network {
    /// Builds a ReLU network, validating that consecutive layer widths agree.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        Self::with_activation(layers, Activation::Relu)
    }

    pub fn with_activation(layers: Vec<Layer>, hidden_activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::LayerShape {
                layer: 0,
                msg: "a network needs at least one layer".into(),
            });
        }
        if hidden_activation != Activation::Relu {
            return Err(Error::UnknownActivation(hidden_activation.name().into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::LayerShape {
                    layer: i + 1,
                    msg: format!(
                        "expects {} inputs but previous layer emits {}",
                        pair[1].in_dim(),
                        pair[0].out_dim()
                    ),
                });
            }
        }
        Ok(Self {
            layers,
            hidden_activation,
        })
    }

    /// Convenience constructor from row-major nested weights.
    pub fn from_rows(layers: &[(Vec<Vec<f64>>, Vec<f64>)]) -> Result<Self> {
        let layers = layers
            .iter()
            .enumerate()
            .map(|(i, (w, b))| {
                let weights = matrix_from_rows(w).map_err(|msg| Error::LayerShape { layer: i, msg })?;
                Layer::new(weights, Array1::from(b.clone())).map_err(|e| match e {
                    Error::LayerShape { msg, .. } => Error::LayerShape { layer: i, msg },
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    /// Random network with Gaussian weights scaled by `1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let wdist = Normal::new(0.0, 1.0 / (n_in as f64).sqrt()).unwrap();
                let bdist = Normal::new(0.0, 0.5).unwrap();
                let weights = Array2::from_shape_fn((n_out, n_in), |_| wdist.sample(rng));
                let bias = Array1::from_shape_fn(n_out, |_| bdist.sample(rng));
                Layer { weights, bias }
            })
            .collect();
        Self {
            layers,
            hidden_activation: Activation::Relu,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    /// Layer widths `[n_0, ..., n_{L+1}]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.dot(&h) + &layer.bias;
            if l < last {
                z.mapv_inplace(relu);
            }
            h = z;
        }
        Ok(h)
    }

    /// Evaluates one input per row.
    pub fn forward_batch(&self, xs: &Array2<f64>) -> Result<Array2<f64>> {
        check_dim(self.input_dim(), xs.ncols())?;
        let mut out = Array2::zeros((xs.nrows(), self.output_dim()));
        for (x, mut y) in xs.rows().into_iter().zip(out.rows_mut()) {
            y.assign(&self.forward(x)?);
        }
        Ok(out)
    }

    /// Network computing `clamp(f(x), lower, upper)` element-wise.
    ///
    /// The output layer `W x + b` is replaced by the stacked hidden layer
    /// `[W; W] x + [b - lower; b - upper]` followed by ReLU, and a new output
    /// layer `[I, -I] h + lower`, i.e. `lower + relu(u - lower) - relu(u - upper)`.
    pub fn append_control_limits(&self, lower: &Array1<f64>, upper: &Array1<f64>) -> Result<Self> {
        let n_u = self.output_dim();
        check_dim(n_u, lower.len())?;
        check_dim(n_u, upper.len())?;
        if let Some(j) = (0..n_u).find(|&j| !(lower[j] < upper[j])) {
            return Err(Error::InvalidLimits(j));
        }
        let mut layers = self.layers.clone();
        let out = layers.pop().expect("non-empty");
        let stacked_w = concatenate(Axis(0), &[out.weights.view(), out.weights.view()])
            .expect("same column count");
        let stacked_b = concatenate(
            Axis(0),
            &[(&out.bias - lower).view(), (&out.bias - upper).view()],
        )
        .expect("1-d");
        let eye = Array2::<f64>::eye(n_u);
        let select = concatenate(Axis(1), &[eye.view(), (-&eye).view()]).expect("same rows");
        layers.push(Layer::new(stacked_w, stacked_b)?);
        layers.push(Layer::new(select, lower.clone())?);
        Self::with_activation(layers, self.hidden_activation)
    }

    /// Copy of this network with `delta` added to every output bias.
    pub fn shift_output(&self, delta: f64) -> Self {
        let mut out = self.clone();
        let last = out.layers.last_mut().expect("non-empty");
        last.bias.mapv_inplace(|b| b + delta);
        out
    }
}

#[inline]
pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> std::result::Result<Array2<f64>, String> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().position(|r| r.len() != n_cols) {
        return Err(format!("row {bad} has {} entries, expected {n_cols}", rows[bad].len()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n_rows, n_cols), flat).map_err(|e| e.to_string())
}

pub(crate) fn matrix_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    format_version: u32,
    activation: String,
    layers: Vec<LayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

/// Parses a network document.
pub fn load_network(bytes: &[u8]) -> Result<Network> {
    let doc: NetworkDoc = serde_json::from_slice(bytes)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion(doc.format_version));
    }
    let activation = Activation::parse(&doc.activation)?;
    let layers = doc
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let weights = matrix_from_rows(&l.weights).map_err(|msg| Error::LayerShape { layer: i, msg })?;
            if weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i}")));
            }
            Layer::new(weights, Array1::from(l.bias.clone())).map_err(|e| match e {
                Error::LayerShape { msg, .. } => Error::LayerShape { layer: i, msg },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Network::with_activation(layers, activation)
}

/// Serializes a network. Floats are written in shortest round-trip form, so
/// `load_network(save_network(n)) == n` bit for bit.
pub fn save_network(net: &Network) -> Vec<u8> {
    let doc = NetworkDoc {
        format_version: FORMAT_VERSION,
        activation: net.hidden_activation.name().into(),
        layers: net
            .layers
            .iter()
            .map(|l| LayerDoc {
                weights: matrix_to_rows(&l.weights),
                bias: l.bias.to_vec(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("network document serializes");
    out.push(b'\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line evaluator written independently of `forward`.
    fn reference_forward(net: &Network, x: &[f64]) -> Vec<f64> {
        let mut h: Vec<f64> = x.to_vec();
        let n = net.layers().len();
        for (l, layer) in net.layers().iter().enumerate() {
            let w = layer.weights();
            let mut z = vec![0.0; w.nrows()];
            for i in 0..w.nrows() {
                let mut acc = layer.bias()[i];
                for j in 0..w.ncols() {
                    acc += w[[i, j]] * h[j];
                }
                z[i] = if l + 1 < n { acc.max(0.0) } else { acc };
            }
            h = z;
        }
        h
    }

    #[test]
    fn identity_network() {
        let net = Network::from_rows(&[(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0])]).unwrap();
        assert_eq!(net.forward(array![3.0, -1.0].view()).unwrap(), array![3.0, -1.0]);
        assert_eq!(net.dims(), vec![2, 2]);
    }

    #[test]
    fn one_hidden_layer_by_hand() {
        let net = Network::from_rows(&[(vec![vec![2.0]], vec![-1.0]), (vec![vec![1.0]], vec![0.0])]).unwrap();
        assert_eq!(net.forward(array![1.0].view()).unwrap(), array![1.0]);
        assert_eq!(net.forward(array![0.0].view()).unwrap(), array![0.0]);
    }

    #[test]
    fn forward_matches_reference_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Network::random(&[2, 5, 5, 2], &mut rng);
        for _ in 0..100 {
            let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let got = net.forward(ArrayView1::from(&x)).unwrap();
            let want = reference_forward(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn batch_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::random(&[3, 7, 2], &mut rng);
        let xs = Array2::from_shape_fn((20, 3), |_| rng.random_range(-1.0..1.0));
        let ys = net.forward_batch(&xs).unwrap();
        for (x, y) in xs.rows().into_iter().zip(ys.rows()) {
            let single = net.forward(x).unwrap();
            for (a, b) in single.iter().zip(y.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_shape_error() {
        let net = Network::from_rows(&[(vec![vec![1.0, 0.0]], vec![0.0])]).unwrap();
        assert!(matches!(
            net.forward(array![1.0].view()),
            Err(Error::Dimension { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn minimal_document_loads() {
        let doc = br#"{"format_version": 1, "activation": "relu", "layers": [{"weights": [[2.5]], "bias": [0.5]}]}"#;
        let net = load_network(doc).unwrap();
        assert_eq!(net.dims(), vec![1, 1]);
        assert_eq!(net.forward(array![2.0].view()).unwrap(), array![5.5]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let doc = br#"{"format_version": 1, "activation": "relu", "layers": [
            {"weights": [[1,0],[0,1],[1,1],[0,0],[2,2]], "bias": [0,0,0,0,0]},
            {"weights": [[1,1,1,1],[0,0,0,0]], "bias": [0,0]}]}"#;
        assert!(matches!(load_network(doc), Err(Error::LayerShape { layer: 1, .. })));
    }

    #[test]
    fn unknown_activation_rejected() {
        let doc = br#"{"format_version": 1, "activation": "swish", "layers": [{"weights": [[1]], "bias": [0]}]}"#;
        assert!(matches!(load_network(doc), Err(Error::UnknownActivation(_))));
        let doc = br#"{"format_version": 1, "activation": "relu", "layers": [{"weights": [[1]], "bias": [0]}], "extra": 1}"#;
        assert!(load_network(doc).is_err());
    }

    #[test]
    fn overflowing_literal_rejected() {
        let doc = br#"{"format_version": 1, "activation": "relu", "layers": [{"weights": [[1e400]], "bias": [0]}]}"#;
        assert!(load_network(doc).is_err());
    }

    #[test]
    fn save_load_round_trip_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let depth = rng.random_range(1..4);
            let mut dims = vec![rng.random_range(1..5)];
            for _ in 0..depth {
                dims.push(rng.random_range(1..9));
            }
            let net = Network::random(&dims, &mut rng);
            let doc = save_network(&net);
            let back = load_network(&doc).unwrap();
            assert_eq!(back, net);
            assert_eq!(save_network(&back), doc);
        }
    }

    #[test]
    fn control_limits_clamp_scalar_identity() {
        let net = Network::from_rows(&[(vec![vec![1.0]], vec![0.0])]).unwrap();
        let lim = net.append_control_limits(&array![-1.0], &array![1.0]).unwrap();
        assert_eq!(lim.forward(array![5.0].view()).unwrap(), array![1.0]);
        assert_eq!(lim.forward(array![-3.0].view()).unwrap(), array![-1.0]);
        assert!((lim.forward(array![0.2].view()).unwrap()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn wide_limits_never_bind() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::random(&[2, 6, 1], &mut rng);
        let lim = net.append_control_limits(&array![-1e6], &array![1e6]).unwrap();
        for _ in 0..100 {
            let x = array![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let a = net.forward(x.view()).unwrap()[0];
            let b = lim.forward(x.view()).unwrap()[0];
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn two_output_clamp_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::random(&[3, 8, 8, 2], &mut rng);
        let (lo, hi) = (array![-0.3, -0.1], array![0.2, 0.4]);
        let lim = net.append_control_limits(&lo, &hi).unwrap();
        for _ in 0..1000 {
            let x = Array1::from_shape_fn(3, |_| rng.random_range(-2.0..2.0));
            let raw = net.forward(x.view()).unwrap();
            let got = lim.forward(x.view()).unwrap();
            for j in 0..2 {
                let want = raw[j].max(lo[j]).min(hi[j]);
                assert!((got[j] - want).abs() <= 1e-12, "{} vs {want}", got[j]);
            }
        }
    }

    #[test]
    fn inverted_limits_rejected() {
        let net = Network::from_rows(&[(vec![vec![1.0]], vec![0.0])]).unwrap();
        assert!(matches!(
            net.append_control_limits(&array![1.0], &array![1.0]),
            Err(Error::InvalidLimits(0))
        ));
    }
}
