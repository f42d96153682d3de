use rand::Rng;

use crate::error::Result;
use crate::numeric::params::join;
use crate::numeric::{Parameterized, Tape, Tensor, Var};

/// How a module's tensors are bound onto a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Respect each tensor's own `requires_grad`.
    Param,
    /// Bind as constants; nothing upstream receives gradient.
    Frozen,
}

impl Binding {
    pub fn bind(self, tape: &mut Tape, t: &Tensor) -> Var {
        match self {
            Binding::Param => tape.param(t),
            Binding::Frozen => tape.frozen(t),
        }
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[input, output], bound, rng).trainable(),
            bias: Tensor::zeros(&[output]).trainable(),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[input, output]).trainable(),
            bias: Tensor::zeros(&[output]).trainable(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, binding: Binding) -> Result<Var> {
        let w = binding.bind(tape, &self.weight);
        let b = binding.bind(tape, &self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

impl Parameterized for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Two affine layers with `tanh` between them. Serves as projector,
/// predictor, classifier and transfer projection.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub first: Linear,
    pub second: Linear,
}

impl MlpHead {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        MlpHead {
            first: Linear::new(input, hidden, rng),
            second: Linear::new(hidden, output, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        MlpHead {
            first: Linear::zeros(input, hidden),
            second: Linear::zeros(hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.first.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.second.output_dim()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, binding: Binding) -> Result<Var> {
        let h = self.first.forward(tape, x, binding)?;
        let h = tape.tanh(h);
        self.second.forward(tape, h, binding)
    }
}

impl Parameterized for MlpHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}

/// Parameters of one LSTM direction. Gate order `[i | f | g | o]`.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    pub wx: Tensor,
    pub wh: Tensor,
    pub bias: Tensor,
}

impl LstmDirection {
    fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmDirection {
            wx: Tensor::uniform(&[input, 4 * hidden], bound, rng).trainable(),
            wh: Tensor::uniform(&[hidden, 4 * hidden], bound, rng).trainable(),
            bias: Tensor::uniform(&[4 * hidden], bound, rng).trainable(),
        }
    }

    fn zeros(input: usize, hidden: usize) -> Self {
        LstmDirection {
            wx: Tensor::zeros(&[input, 4 * hidden]).trainable(),
            wh: Tensor::zeros(&[hidden, 4 * hidden]).trainable(),
            bias: Tensor::zeros(&[4 * hidden]).trainable(),
        }
    }

    fn run(&self, tape: &mut Tape, x: Var, reverse: bool, binding: Binding) -> Result<Var> {
        let wx = binding.bind(tape, &self.wx);
        let wh = binding.bind(tape, &self.wh);
        let b = binding.bind(tape, &self.bias);
        tape.lstm(x, wx, wh, b, reverse)
    }
}

impl Parameterized for LstmDirection {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "wx"), &self.wx);
        f(join(prefix, "wh"), &self.wh);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "wx"), &mut self.wx);
        f(join(prefix, "wh"), &mut self.wh);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// One-layer bidirectional LSTM; per-token output is `[forward; backward]`.
#[derive(Debug, Clone)]
pub struct BiLstmEncoder {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl BiLstmEncoder {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstmEncoder {
            forward: LstmDirection::new(input, hidden, rng),
            backward: LstmDirection::new(input, hidden, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        BiLstmEncoder {
            forward: LstmDirection::zeros(input, hidden),
            backward: LstmDirection::zeros(input, hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward.wx.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.forward.wh.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden()
    }

    /// `emb: [len, d_in] -> [len, 2h]`.
    pub fn encode(&self, tape: &mut Tape, emb: Var, binding: Binding) -> Result<Var> {
        let f = self.forward.run(tape, emb, false, binding)?;
        let b = self.backward.run(tape, emb, true, binding)?;
        tape.concat_cols(f, b)
    }
}

impl Parameterized for BiLstmEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.forward.visit(&join(prefix, "fwd"), f);
        self.backward.visit(&join(prefix, "bwd"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.forward.visit_mut(&join(prefix, "fwd"), f);
        self.backward.visit_mut(&join(prefix, "bwd"), f);
    }
}
