//! Frozen feed-forward stand-in for the synthesis model and its loss.
//!
//! The model maps `[x' ; cond]` through a chain of dense layers. The loss
//! is the mean squared error against a target vector, and
//! [`grad_wrt_input`] back-propagates it to the embedding part of the input
//! only; weights and conditioning are constants.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::embedding::all_finite;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Dense layer `a = act(W z + b)` with `W` stored row-major as `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>, activation: Activation) -> Self {
        Self {
            rows,
            cols,
            weights,
            bias,
            activation,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Self::new(n, n, weights, vec![0.0; n], Activation::Identity)
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| {
                let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
                self.activation.apply(z)
            })
            .collect()
    }
}

/// The frozen model. Construct with [`ProxyModel::new`] or [`load_proxy`];
/// both validate the layer chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProxy")]
pub struct ProxyModel {
    input_dim: usize,
    cond_dim: usize,
    layers: Vec<Layer>,
}

#[derive(Deserialize)]
struct RawProxy {
    input_dim: usize,
    cond_dim: usize,
    layers: Vec<Layer>,
}

impl TryFrom<RawProxy> for ProxyModel {
    type Error = Error;

    fn try_from(raw: RawProxy) -> Result<Self> {
        ProxyModel::new(raw.input_dim, raw.cond_dim, raw.layers)
    }
}

impl ProxyModel {
    /// `input_dim` is the full input width, embedding plus conditioning.
    pub fn new(input_dim: usize, cond_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("no layers".into()));
        }
        if cond_dim >= input_dim {
            return Err(Error::InvalidModel(format!(
                "cond_dim {cond_dim} leaves no room for the embedding in input_dim {input_dim}"
            )));
        }
        let mut width = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.cols != width {
                return Err(Error::DimensionChainBroken {
                    layer: i,
                    expected: width,
                    found: layer.cols,
                });
            }
            if layer.weights.len() != layer.rows * layer.cols || layer.bias.len() != layer.rows {
                return Err(Error::InvalidModel(format!(
                    "layer {i}: {} weights and {} biases for a {}x{} layer",
                    layer.weights.len(),
                    layer.bias.len(),
                    layer.rows,
                    layer.cols
                )));
            }
            if layer.rows == 0 {
                return Err(Error::InvalidModel(format!("layer {i} has no outputs")));
            }
            if !all_finite(&layer.weights) || !all_finite(&layer.bias) {
                return Err(Error::InvalidModel(format!("layer {i} has non-finite weights")));
            }
            width = layer.rows;
        }
        Ok(Self {
            input_dim,
            cond_dim,
            layers,
        })
    }

    /// A tanh MLP with one hidden layer per entry of `hidden` and a linear
    /// output layer, weights uniform in `±sqrt(3 / fan_in)`, biases zero.
    pub fn seeded_mlp(embed_dim: usize, cond_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![embed_dim + cond_dim];
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (cols, rows) = (w[0], w[1]);
                let bound = (3.0 / cols as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weights = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
                let activation = if i + 2 == widths.len() {
                    Activation::Identity
                } else {
                    Activation::Tanh
                };
                Layer::new(rows, cols, weights, vec![0.0; rows], activation)
            })
            .collect();
        Self::new(embed_dim + cond_dim, cond_dim, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    /// Width of the embedding part of the input.
    pub fn embed_dim(&self) -> usize {
        self.input_dim - self.cond_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn check_input(&self, x_prime: &[f64], cond: &[f64]) -> Result<()> {
        if x_prime.len() + cond.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: x_prime.len() + cond.len(),
            });
        }
        if cond.len() != self.cond_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cond_dim,
                found: cond.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer, input first.
    fn activations(&self, x_prime: &[f64], cond: &[f64]) -> Vec<Vec<f64>> {
        let mut input = Vec::with_capacity(self.input_dim);
        input.extend_from_slice(x_prime);
        input.extend_from_slice(cond);
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for layer in &self.layers {
            let next = layer.apply(acts.last().expect("nonempty"));
            acts.push(next);
        }
        acts
    }
}

/// Synthesis target for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyTarget {
    pub target: Vec<f64>,
}

impl ProxyTarget {
    pub fn new(target: Vec<f64>) -> Self {
        Self { target }
    }
}

pub fn forward(model: &ProxyModel, x_prime: &[f64], cond: &[f64]) -> Result<Vec<f64>> {
    model.check_input(x_prime, cond)?;
    Ok(model.activations(x_prime, cond).pop().expect("nonempty"))
}

/// Mean squared error between the model output and `target`.
pub fn loss(model: &ProxyModel, x_prime: &[f64], cond: &[f64], target: &ProxyTarget) -> Result<f64> {
    let out = forward(model, x_prime, cond)?;
    check_target(model, target)?;
    Ok(mse(&out, &target.target))
}

/// Exact gradient of [`loss`] with respect to `x_prime`.
pub fn grad_wrt_input(model: &ProxyModel, x_prime: &[f64], cond: &[f64], target: &ProxyTarget) -> Result<Vec<f64>> {
    loss_and_grad(model, x_prime, cond, target).map(|(_, g)| g)
}

/// Loss and its input gradient from one forward/backward pass.
pub fn loss_and_grad(
    model: &ProxyModel,
    x_prime: &[f64],
    cond: &[f64],
    target: &ProxyTarget,
) -> Result<(f64, Vec<f64>)> {
    model.check_input(x_prime, cond)?;
    check_target(model, target)?;
    let acts = model.activations(x_prime, cond);
    let out = acts.last().expect("nonempty");
    let n = out.len() as f64;
    let value = mse(out, &target.target);

    // dL/d(output)
    let mut upstream: Vec<f64> = out
        .iter()
        .zip(&target.target)
        .map(|(y, z)| 2.0 * (y - z) / n)
        .collect();
    for (layer, (input, output)) in model
        .layers
        .iter()
        .zip(acts.iter().zip(acts.iter().skip(1)))
        .rev()
    {
        let delta: Vec<f64> = upstream
            .iter()
            .zip(output)
            .map(|(g, a)| g * layer.activation.derivative_from_output(*a))
            .collect();
        let mut down = vec![0.0; input.len()];
        for (row, d) in layer.weights.chunks_exact(layer.cols).zip(&delta) {
            for (acc, w) in down.iter_mut().zip(row) {
                *acc += w * d;
            }
        }
        upstream = down;
    }
    upstream.truncate(x_prime.len());
    Ok((value, upstream))
}

fn check_target(model: &ProxyModel, target: &ProxyTarget) -> Result<()> {
    if target.target.len() != model.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.output_dim(),
            found: target.target.len(),
        });
    }
    Ok(())
}

fn mse(out: &[f64], target: &[f64]) -> f64 {
    out.iter().zip(target).map(|(y, z)| (y - z) * (y - z)).sum::<f64>() / out.len() as f64
}

pub fn load_proxy(path: impl AsRef<Path>) -> Result<ProxyModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_proxy(&text).map_err(|e| match e {
        Error::Json { source, .. } => Error::json(path, source),
        other => other,
    })
}

pub fn parse_proxy(text: &str) -> Result<ProxyModel> {
    let raw: RawProxy = serde_json::from_str(text).map_err(|e| Error::json("<proxy>", e))?;
    ProxyModel::try_from(raw)
}

pub fn save_proxy(model: &ProxyModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string(model).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn linear(a: &[f64], rows: usize, cols: usize) -> ProxyModel {
        ProxyModel::new(cols, 0, vec![Layer::new(rows, cols, a.to_vec(), vec![0.0; rows], Activation::Identity)]).unwrap()
    }

    /// Straight-line evaluation that shares nothing with `activations`.
    fn reference_forward(model: &ProxyModel, x: &[f64], cond: &[f64]) -> Vec<f64> {
        let mut cur: Vec<f64> = x.iter().chain(cond).copied().collect();
        for layer in model.layers() {
            let mut next = vec![0.0; layer.rows];
            for r in 0..layer.rows {
                let mut z = layer.bias[r];
                for c in 0..layer.cols {
                    z += layer.weights[r * layer.cols + c] * cur[c];
                }
                next[r] = match layer.activation {
                    Activation::Identity => z,
                    Activation::Tanh => (z.exp() - (-z).exp()) / (z.exp() + (-z).exp()),
                };
            }
            cur = next;
        }
        cur
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_layer_forward_is_identity() {
        let m = ProxyModel::new(3, 0, vec![Layer::identity(3)]).unwrap();
        assert_eq!(forward(&m, &[0.5, -1.0, 2.0], &[]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn linear_layer_is_matrix_product() {
        let m = linear(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        assert_eq!(forward(&m, &[1.0, 0.0, -1.0], &[]).unwrap(), vec![-2.0, -2.0]);
    }

    #[test]
    fn tanh_network_matches_reference_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ProxyModel::seeded_mlp(6, 2, &[5], 3, 9).unwrap();
        for _ in 0..20 {
            let x = random_vec(&mut rng, 6);
            let c = random_vec(&mut rng, 2);
            let got = forward(&m, &x, &c).unwrap();
            let want = reference_forward(&m, &x, &c);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
            let z = ProxyTarget::new(random_vec(&mut rng, 3));
            let want_loss = want.iter().zip(&z.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 3.0;
            assert!((loss(&m, &x, &c, &z).unwrap() - want_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let m = ProxyModel::new(2, 0, vec![Layer::identity(2)]).unwrap();
        assert_eq!(loss(&m, &[1.0, 0.0], &[], &ProxyTarget::new(vec![0.0, 0.0])).unwrap(), 0.5);
        let out = forward(&m, &[0.3, 0.7], &[]).unwrap();
        assert_eq!(loss(&m, &[0.3, 0.7], &[], &ProxyTarget::new(out)).unwrap(), 0.0);
    }

    #[test]
    fn gradient_vanishes_at_zero_loss() {
        let m = ProxyModel::seeded_mlp(4, 1, &[6], 3, 1).unwrap();
        let x = [0.1, -0.2, 0.3, 0.4];
        let z = ProxyTarget::new(forward(&m, &x, &[0.5]).unwrap());
        assert!(grad_wrt_input(&m, &x, &[0.5], &z).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn linear_gradient_matches_closed_form() {
        // A = [[2, -1], [0.5, 3]], x = (1, 2), z = (0, 1)
        // Ax - z = (0, 5.5); grad = (2/2) Aᵀ (0, 5.5) = (2.75, 16.5)
        let m = linear(&[2.0, -1.0, 0.5, 3.0], 2, 2);
        let g = grad_wrt_input(&m, &[1.0, 2.0], &[], &ProxyTarget::new(vec![0.0, 1.0])).unwrap();
        assert_eq!(g, vec![2.75, 16.5]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for seed in 0..10 {
            let m = ProxyModel::seeded_mlp(5, 2, &[7, 4], 3, seed).unwrap();
            let x = random_vec(&mut rng, 5);
            let c = random_vec(&mut rng, 2);
            let z = ProxyTarget::new(random_vec(&mut rng, 3));
            let g = grad_wrt_input(&m, &x, &c, &z).unwrap();
            for d in 0..5 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[d] += h;
                xm[d] -= h;
                let fd = (loss(&m, &xp, &c, &z).unwrap() - loss(&m, &xm, &c, &z).unwrap()) / (2.0 * h);
                let rel = (g[d] - fd).abs() / g[d].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-5, "coord {d}: {} vs {fd}", g[d]);
            }
        }
    }

    #[test]
    fn input_and_target_dimension_errors() {
        let m = ProxyModel::seeded_mlp(3, 1, &[2], 2, 0).unwrap();
        assert!(matches!(forward(&m, &[0.0; 3], &[]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(forward(&m, &[0.0; 2], &[0.0, 0.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(
            loss(&m, &[0.0; 3], &[0.0], &ProxyTarget::new(vec![0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn identity_file_round_trip() {
        let text = r#"{"input_dim":2,"cond_dim":0,"layers":[{"rows":2,"cols":2,"weights":[1,0,0,1],"bias":[0,0],"activation":"identity"}]}"#;
        let m = parse_proxy(text).unwrap();
        assert_eq!(forward(&m, &[0.25, -4.0], &[]).unwrap(), vec![0.25, -4.0]);

        let m = ProxyModel::seeded_mlp(8, 2, &[6], 3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proxy.json");
        save_proxy(&m, &path).unwrap();
        let before = fs::read(&path).unwrap();
        let back = load_proxy(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), before);
        let x = [0.1, 0.2, 0.3, -0.4, 0.5, 0.6, -0.7, 0.8];
        let c = [1.0, -1.0];
        let a = forward(&m, &x, &c).unwrap();
        let b = forward(&back, &x, &c).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn broken_chain_is_rejected() {
        let text = r#"{"input_dim":2,"cond_dim":0,"layers":[
            {"rows":3,"cols":2,"weights":[1,0,0,1,1,1],"bias":[0,0,0],"activation":"tanh"},
            {"rows":1,"cols":2,"weights":[1,1],"bias":[0],"activation":"identity"}]}"#;
        assert!(matches!(
            parse_proxy(text),
            Err(Error::DimensionChainBroken { layer: 1, expected: 3, found: 2 })
        ));
        assert!(matches!(parse_proxy("{\"input_dim\":"), Err(Error::Json { .. })));
    }
}
