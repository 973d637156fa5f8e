//! Multi-layer perceptrons on the tape.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    fn slope(self) -> f64 {
        match self {
            Activation::LeakyRelu(s) => s,
            Activation::Identity => 1.0,
        }
    }
}

/// Layer widths (input first) and one activation per affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl MlpSpec {
    /// Hidden layers use leaky ReLU, the output layer is linear.
    pub fn leaky(input: usize, hidden: &[usize], output: usize, slope: f64, seed: u64) -> Self {
        let mut layer_sizes = Vec::with_capacity(hidden.len() + 2);
        layer_sizes.push(input);
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(output);
        let mut activations: Vec<Activation> = hidden.iter().map(|_| Activation::LeakyRelu(slope)).collect();
        activations.push(Activation::Identity);
        Self {
            layer_sizes,
            activations,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.activations.len() != self.layer_sizes.len() - 1 {
            return Err(Error::Config(format!(
                "mlp needs at least one layer and one activation per layer (sizes {:?}, {} activations)",
                self.layer_sizes,
                self.activations.len()
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("mlp layer sizes must be positive".into()));
        }
        for a in &self.activations {
            if let Activation::LeakyRelu(s) = a {
                if !(*s > 0.0 && *s <= 1.0) {
                    return Err(Error::Config(format!("leaky relu slope {s} outside (0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }
}

/// An [`MlpSpec`] bound to parameters inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl Mlp {
    /// Adds `{prefix}.w{l}` / `{prefix}.b{l}` to `store`, initialized uniformly
    /// in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` from `spec.seed`.
    pub fn register(store: &mut ParamStore, prefix: &str, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut init = rng::substream(spec.seed, "mlp-init");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, pair) in spec.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / math::sqrt(fan_in as f64);
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng::uniform(&mut init, -bound, bound)).collect();
            let b: Vec<f64> = (0..fan_out).map(|_| rng::uniform(&mut init, -bound, bound)).collect();
            weights.push(store.insert(&format!("{prefix}.w{l}"), Tensor::matrix(fan_in, fan_out, w)?)?);
            biases.push(store.insert(&format!("{prefix}.b{l}"), Tensor::matrix(1, fan_out, b)?)?);
        }
        Ok(Self { spec, weights, biases })
    }

    /// Looks up an already registered network.
    pub fn bind(store: &ParamStore, prefix: &str, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, pair) in spec.layer_sizes.windows(2).enumerate() {
            let find = |name: &str, rows: usize, cols: usize| -> Result<ParamId> {
                let id = store
                    .id(name)
                    .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
                let t = store.get(id);
                if t.rows() != rows || t.cols() != cols {
                    return Err(dim_err("Mlp::bind", format!("{name}: {rows}x{cols}"), format!("{}x{}", t.rows(), t.cols())));
                }
                Ok(id)
            };
            weights.push(find(&format!("{prefix}.w{l}"), pair[0], pair[1])?);
            biases.push(find(&format!("{prefix}.b{l}"), 1, pair[1])?);
        }
        Ok(Self { spec, weights, biases })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weight_ids(&self) -> &[ParamId] {
        &self.weights
    }

    pub fn bias_ids(&self) -> &[ParamId] {
        &self.biases
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let cols = tape.dims(x).1;
        if cols != self.spec.input_size() {
            return Err(dim_err("mlp_forward", format!("{} input features", self.spec.input_size()), format!("{cols}")));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut h = x;
        for (l, act) in self.spec.activations.iter().enumerate() {
            let w = tape.param(self.weights[l]);
            let b = tape.param(self.biases[l]);
            let pre = tape.matmul(h, w)?;
            let pre = tape.add_row(pre, b)?;
            h = match act {
                Activation::LeakyRelu(s) => tape.leaky_relu(pre, *s),
                Activation::Identity => pre,
            };
        }
        Ok(h)
    }

    /// Forward pass that also carries a directional derivative.
    ///
    /// `tangent` has the shape of `x`; the second output is the derivative of
    /// the network output along it. The activation masks enter as constants,
    /// so the tangent itself stays differentiable in the weights.
    pub fn forward_with_tangent(&self, tape: &mut Tape, x: Var, tangent: Var) -> Result<(Var, Var)> {
        self.check_input(tape, x)?;
        if tape.dims(x) != tape.dims(tangent) {
            return Err(dim_err("forward_with_tangent", "tangent shaped like the input", "mismatched tangent"));
        }
        let w0 = tape.param(self.weights[0]);
        let t0 = tape.matmul(tangent, w0)?;
        self.propagate(tape, x, t0)
    }

    /// [`Mlp::forward_with_tangent`] along the unit direction of input `col`.
    pub fn forward_with_unit_tangent(&self, tape: &mut Tape, x: Var, col: usize) -> Result<(Var, Var)> {
        self.check_input(tape, x)?;
        if col >= self.spec.input_size() {
            return Err(dim_err("forward_with_unit_tangent", format!("column < {}", self.spec.input_size()), format!("{col}")));
        }
        let rows = tape.dims(x).0;
        let w0 = tape.param(self.weights[0]);
        let w_row = tape.select_rows(w0, &[col])?;
        let t0 = tape.broadcast_rows(w_row, rows)?;
        self.propagate(tape, x, t0)
    }

    fn propagate(&self, tape: &mut Tape, x: Var, first_tangent: Var) -> Result<(Var, Var)> {
        let mut h = x;
        let mut t = first_tangent;
        for (l, act) in self.spec.activations.iter().enumerate() {
            let w = tape.param(self.weights[l]);
            let b = tape.param(self.biases[l]);
            if l > 0 {
                t = tape.matmul(t, w)?;
            }
            let pre = tape.matmul(h, w)?;
            let pre = tape.add_row(pre, b)?;
            h = match act {
                Activation::LeakyRelu(s) => {
                    let (r, c) = tape.dims(pre);
                    let slope = act.slope();
                    let mask: Vec<f64> = tape
                        .value(pre)
                        .data()
                        .iter()
                        .map(|&v| if v > 0.0 { 1.0 } else { slope })
                        .collect();
                    let mask = tape.constant(Tensor::raw(r, c, mask));
                    t = tape.mul(t, mask)?;
                    tape.leaky_relu(pre, *s)
                }
                Activation::Identity => pre,
            };
        }
        Ok((h, t))
    }
}

/// Evaluates `mlp` on `input` (one example per row).
pub fn mlp_forward(mlp: &Mlp, params: &ParamStore, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new(params);
    let x = tape.constant(input.clone());
    let y = mlp.forward(&mut tape, x)?;
    Ok(tape.value(y).clone())
}
