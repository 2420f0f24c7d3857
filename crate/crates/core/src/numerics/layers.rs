use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::SeededRng;
use super::tape::{Gradients, Tape, Var};
use crate::{DfaError, Result};

/// Anything owning trainable matrices in a fixed visiting order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }
}

/// Affine map applied per row: `y = W x + b`, `W` is `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Matrix,
    /// `1 × out`.
    pub bias: Matrix,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(DfaError::shape(
                "LinearLayer::new",
                format!("bias of length {} for {} outputs", bias.len(), weight.rows()),
            ));
        }
        Ok(LinearLayer {
            weight,
            bias: Matrix::row_vector(bias),
        })
    }

    /// Uniform `(-1/√in, 1/√in)` initialisation for weight and bias.
    pub fn init(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.uniform_in(-bound, bound)).collect() };
        let weight = Matrix::from_vec(output, input, draw(output * input)).expect("sized");
        let bias = Matrix::row_vector(draw(output));
        LinearLayer { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        LinearLayer {
            weight: Matrix::zeros(output, input),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(DfaError::shape(
                "linear_forward",
                format!(
                    "input has {} columns, layer expects {}",
                    input.cols(),
                    self.input_dim()
                ),
            ));
        }
        let mut out = input.matmul_nt(&self.weight)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(self.bias.as_slice()) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }
}

impl Parameterized for LinearLayer {
    fn params(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let h = tape.matmul_nt(input, self.weight)?;
        tape.add_row_bias(h, self.bias)
    }

    pub fn grads(&self, tape: &Tape, grads: &Gradients, out: &mut Vec<Matrix>) {
        for v in [self.weight, self.bias] {
            out.push(grads.get_or_zeros(v, tape.value(v).shape()));
        }
    }
}

/// Stack of linear layers with `tanh` between consecutive layers (none after
/// the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn init(dims: &[usize], rng: &mut SeededRng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Mlp {
            layers: dims
                .windows(2)
                .map(|w| LinearLayer::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DfaError::shape("Mlp", "no layers"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(DfaError::shape(
                    "Mlp",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        pair[0].output_dim(),
                        i + 1,
                        pair[1].input_dim()
                    ),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.map(f64::tanh);
            }
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }

    /// Sets every parameter to zero.
    pub fn zero_out(&mut self) {
        for p in self.params_mut() {
            p.as_mut_slice().fill(0.0);
        }
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<BoundLinear>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn grads(&self, tape: &Tape, grads: &Gradients, out: &mut Vec<Matrix>) {
        for l in &self.layers {
            l.grads(tape, grads, out);
        }
    }
}
