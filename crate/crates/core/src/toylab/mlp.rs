use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    /// `x * sigmoid(x)`
    Silu,
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// Derivative with respect to the pre-activation.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

/// Fully connected layer, weights row-major `(outputs, inputs)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }
}

/// Scalar-output MLP. Hidden layers use `activation`; the readout is linear.
/// The descriptor of an input is the post-activation output of the last
/// hidden layer (the input itself when there are no hidden layers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub activation: Activation,
    pub layers: Vec<Dense>,
}

/// Per-layer pre- and post-activations kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights. First-layer biases are uniform in `[-1, 1]` to
    /// spread the activation kinks over the input box; other biases start at 0.
    pub fn new<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut mlp = Mlp::constant(input_dim, hidden, activation, 0.0);
        let n = mlp.layers.len();
        for (li, layer) in mlp.layers.iter_mut().enumerate() {
            let a = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.random_range(-a..a);
            }
            if li == 0 && n > 1 {
                for b in layer.bias.iter_mut() {
                    *b = rng.random_range(-1.0..1.0);
                }
            }
        }
        mlp
    }

    /// Every parameter set to `value`.
    pub fn constant(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        value: f64,
    ) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| {
                let mut d = Dense::zeros(w[0], w[1]);
                d.weights.iter_mut().for_each(|x| *x = value);
                d.bias.iter_mut().for_each(|x| *x = value);
                d
            })
            .collect();
        Mlp { activation, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn descriptor_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].inputs
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) -> f64 {
        let n = self.layers.len();
        cache.pre.resize(n, Vec::new());
        cache.post.resize(n + 1, Vec::new());
        cache.post[0].clear();
        cache.post[0].extend_from_slice(x);
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = std::mem::take(&mut cache.pre[li]);
            z.resize(layer.outputs, 0.0);
            layer.forward(&cache.post[li], &mut z);
            let act = if li + 1 == n {
                Activation::Identity
            } else {
                self.activation
            };
            let mut a = std::mem::take(&mut cache.post[li + 1]);
            a.clear();
            a.extend(z.iter().map(|&v| act.apply(v)));
            cache.pre[li] = z;
            cache.post[li + 1] = a;
        }
        cache.post[n][0]
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.forward_cached(x, &mut ForwardCache::default())
    }

    pub fn descriptor(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache);
        cache.post[self.layers.len() - 1].clone()
    }

    /// Adds `d_out * d(output)/d(params)` into `grads`, which must have this
    /// model's shape (see [`Mlp::zeros_like`]).
    pub fn backward(&self, cache: &ForwardCache, d_out: f64, grads: &mut Mlp) {
        let n = self.layers.len();
        let mut delta = vec![d_out];
        for li in (0..n).rev() {
            let layer = &self.layers[li];
            let input = &cache.post[li];
            let g = &mut grads.layers[li];
            for (o, &dz) in delta.iter().enumerate() {
                g.bias[o] += dz;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, &x) in row.iter_mut().zip(input) {
                    *gw += dz * x;
                }
            }
            if li == 0 {
                break;
            }
            let pre = &cache.pre[li - 1];
            let mut next = vec![0.0; layer.inputs];
            for (o, &dz) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (nx, &w) in next.iter_mut().zip(row) {
                    *nx += dz * w;
                }
            }
            for (nx, &z) in next.iter_mut().zip(pre) {
                *nx *= self.activation.derivative(z);
            }
            delta = next;
        }
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params(), "parameter vector length");
        let mut it = p.iter().copied();
        for l in self.layers.iter_mut() {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
    }

    /// `self -= lr * grads`
    pub fn sgd_step(&mut self, grads: &Mlp, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

fn half_mean_square(model: &Mlp, inputs: &[f64]) -> f64 {
    let d = model.input_dim();
    let n = inputs.len() / d;
    inputs
        .chunks_exact(d)
        .map(|x| {
            let y = model.forward(x);
            0.5 * y * y
        })
        .sum::<f64>()
        / n as f64
}

/// Analytic gradient of `L = mean(0.5 * y(x)^2)` over the rows of `inputs`.
pub fn loss_gradient(model: &Mlp, inputs: &[f64]) -> Vec<f64> {
    let d = model.input_dim();
    let n = (inputs.len() / d) as f64;
    let mut grads = model.zeros_like();
    let mut cache = ForwardCache::default();
    for x in inputs.chunks_exact(d) {
        let y = model.forward_cached(x, &mut cache);
        model.backward(&cache, y / n, &mut grads);
    }
    grads.params()
}

/// Largest relative deviation between backprop and central differences of
/// `mean(0.5 * y^2)` over every parameter. Gradients smaller than `1e-6` in
/// both routes are compared absolutely against that floor.
pub fn finite_difference_gradcheck(model: &Mlp, inputs: &[f64]) -> f64 {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let analytic = loss_gradient(model, inputs);
    let base = model.params();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (j, &a) in analytic.iter().enumerate() {
        let mut p = base.clone();
        p[j] = base[j] + STEP;
        probe.set_params(&p);
        let up = half_mean_square(&probe, inputs);
        p[j] = base[j] - STEP;
        probe.set_params(&p);
        let down = half_mean_square(&probe, inputs);
        let numeric = (up - down) / (2.0 * STEP);
        let scale = a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}
