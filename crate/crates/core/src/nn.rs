//! Batched dense layers and a ReLU trunk with a skip connection, with
//! hand-written backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Dense {
            weight: Array2::zeros((n_out, n_in)),
            bias: Array1::zeros(n_out),
        }
    }

    /// Weights uniform in `±gain / sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng>(n_in: usize, n_out: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain / (n_in.max(1) as f64).sqrt();
        Dense {
            weight: Array2::from_shape_simple_fn((n_out, n_in), || rng.random_range(-bound..=bound)),
            bias: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.nrows()
    }

    /// `x · Wᵀ + b` for a `(batch, in)` input.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::zeros((x.nrows(), self.n_out()));
        y.assign(&self.bias.broadcast((x.nrows(), self.n_out())).unwrap());
        general_mat_mul(1.0, &x, &self.weight.t(), 1.0, &mut y);
        y
    }

    /// Accumulates parameter gradients into `grad`; returns `d loss / d x` when asked.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: &mut Dense,
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        want_dx.then(|| dy.dot(&self.weight))
    }

    pub fn params(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

pub fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Derivative of softplus expressed through its output: `1 - exp(-y)`.
pub fn softplus_grad_from_output(y: f64) -> f64 {
    -(-y).exp_m1()
}

/// ReLU trunk. Layer `skip` (if any) sees `[hidden, input]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub layers: Vec<Dense>,
    pub skip: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrunkCache {
    /// Input of every layer (after skip concatenation).
    inputs: Vec<Array2<f64>>,
    /// Post-ReLU output of every layer.
    outputs: Vec<Array2<f64>>,
}

impl TrunkCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("trunk has layers")
    }
}

impl Trunk {
    pub fn init<R: Rng>(n_in: usize, width: usize, depth: usize, skip: Option<usize>, rng: &mut R) -> Self {
        assert!(depth >= 1, "trunk needs at least one layer");
        let skip = skip.filter(|&s| s >= 1 && s < depth);
        let layers = (0..depth)
            .map(|l| {
                let fan_in = match l {
                    0 => n_in,
                    l if Some(l) == skip => width + n_in,
                    _ => width,
                };
                Dense::init(fan_in, width, 6f64.sqrt(), rng)
            })
            .collect();
        Trunk { layers, skip }
    }

    pub fn zeros_like(&self) -> Self {
        Trunk {
            layers: self.layers.iter().map(|l| Dense::zeros(l.n_in(), l.n_out())).collect(),
            skip: self.skip,
        }
    }

    pub fn width(&self) -> usize {
        self.layers[0].n_out()
    }

    pub fn forward(&self, x: &Array2<f64>) -> TrunkCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = match outputs.last() {
                None => x.clone(),
                Some(h) if Some(l) == self.skip => {
                    ndarray::concatenate(Axis(1), &[h.view(), x.view()]).expect("same batch")
                }
                Some(h) => h.clone(),
            };
            let mut out = layer.forward(input.view());
            relu_inplace(&mut out);
            inputs.push(input);
            outputs.push(out);
        }
        TrunkCache { inputs, outputs }
    }

    /// Pre-activations of every layer of the recorded forward pass.
    pub fn pre_activations(&self, cache: &TrunkCache) -> Vec<Array2<f64>> {
        self.layers.iter().zip(&cache.inputs).map(|(layer, x)| layer.forward(x.view())).collect()
    }

    /// Backpropagates `d_out` (gradient on the final hidden layer).
    pub fn backward(
        &self,
        cache: &TrunkCache,
        d_out: Array2<f64>,
        grad: &mut Trunk,
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        let n_in = cache.inputs[0].ncols();
        let mut d_x: Option<Array2<f64>> = None;
        let mut d_h = d_out;
        for l in (0..self.layers.len()).rev() {
            let mut dz = d_h;
            dz.zip_mut_with(&cache.outputs[l], |g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
            let need_dx = l > 0 || want_dx;
            let d_in = self.layers[l].backward(cache.inputs[l].view(), dz.view(), &mut grad.layers[l], need_dx);
            let Some(d_in) = d_in else {
                break;
            };
            if l == 0 {
                match d_x.as_mut() {
                    Some(acc) => *acc += &d_in,
                    None => d_x = Some(d_in),
                }
                break;
            }
            if Some(l) == self.skip {
                let w = self.width();
                if want_dx {
                    let part = d_in.slice(s![.., w..w + n_in]).to_owned();
                    match d_x.as_mut() {
                        Some(acc) => *acc += &part,
                        None => d_x = Some(part),
                    }
                }
                d_h = d_in.slice(s![.., ..w]).to_owned();
            } else {
                d_h = d_in;
            }
        }
        if want_dx {
            d_x
        } else {
            None
        }
    }
}
