//! Fully connected networks on bit inputs with hand-written backpropagation.
//!
//! Parameters live in one flat buffer so optimizers and finite-difference
//! checks can treat them as a single vector. Each weight matrix is stored
//! input-major (`w[i * outputs + j]` connects input `i` to unit `j`), which
//! turns the first layer's forward pass on a bit row into a sum of the rows
//! selected by the set bits.

use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gf2::{BitMatrix, BitVector};

/// Floating-point type the network computes in.
pub trait Real: Float + AddAssign + SubAssign + MulAssign + Sum + Default + fmt::Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Cosine,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval<F: Real>(self, x: F) -> F {
        match self {
            Activation::Relu => x.max(F::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Cosine => x.cos(),
            Activation::Identity => x,
        }
    }

    /// Derivative at `x`; `relu'(0) = 0`.
    #[inline]
    pub fn grad<F: Real>(self, x: F) -> F {
        match self {
            Activation::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (F::one() - s)
            }
            Activation::Cosine => -x.sin(),
            Activation::Identity => F::one(),
        }
    }

    /// `out[i] = act(z[i])`.
    #[inline]
    pub fn eval_slice<F: Real>(self, z: &[F], out: &mut [F]) {
        match self {
            Activation::Relu => {
                for (h, &x) in out.iter_mut().zip(z) {
                    *h = if x > F::zero() { x } else { F::zero() };
                }
            }
            Activation::Identity => out.copy_from_slice(z),
            _ => {
                for (h, &x) in out.iter_mut().zip(z) {
                    *h = self.eval(x);
                }
            }
        }
    }

    /// `out[i] = scale * w[i] * act'(z[i])`.
    #[inline]
    fn scaled_grad_slice<F: Real>(self, scale: F, w: &[F], z: &[F], out: &mut [F]) {
        match self {
            Activation::Relu => {
                for ((o, &wi), &x) in out.iter_mut().zip(w).zip(z) {
                    *o = if x > F::zero() { scale * wi } else { F::zero() };
                }
            }
            Activation::Identity => {
                for (o, &wi) in out.iter_mut().zip(w) {
                    *o = scale * wi;
                }
            }
            _ => {
                for ((o, &wi), &x) in out.iter_mut().zip(w).zip(z) {
                    *o = scale * wi * self.grad(x);
                }
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Cosine => 2,
            Activation::Identity => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Relu,
            1 => Activation::Sigmoid,
            2 => Activation::Cosine,
            3 => Activation::Identity,
            t => return Err(Error::Format(format!("unknown activation tag {t}"))),
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Cosine => "cosine",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "cosine" | "cos" => Ok(Activation::Cosine),
            "identity" | "linear" => Ok(Activation::Identity),
            _ => Err(Error::Config(format!("unknown activation '{s}'"))),
        }
    }
}

pub fn activation_eval(act: Activation, x: f64) -> f64 {
    act.eval(x)
}

pub fn activation_grad(act: Activation, x: f64) -> f64 {
    act.grad(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// Evaluation only.
    ZeroOne,
    Logistic,
    Mae,
    Mse,
}

impl Loss {
    fn name(self) -> &'static str {
        match self {
            Loss::ZeroOne => "zero-one",
            Loss::Logistic => "logistic",
            Loss::Mae => "mae",
            Loss::Mse => "mse",
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Loss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-one" | "01" => Ok(Loss::ZeroOne),
            "logistic" | "bce" => Ok(Loss::Logistic),
            "mae" => Ok(Loss::Mae),
            "mse" => Ok(Loss::Mse),
            _ => Err(Error::Config(format!("unknown loss '{s}'"))),
        }
    }
}

/// Rounds a prediction to a bit; exactly 0.5 rounds to 0.
#[inline]
pub fn round_prediction(p: f64) -> bool {
    p > 0.5
}

#[inline]
fn label_value(y: bool) -> f64 {
    if y {
        1.0
    } else {
        0.0
    }
}

/// Loss of prediction `p` against label `y`.
pub fn loss_eval(loss: Loss, p: f64, y: bool) -> Result<f64> {
    let t = label_value(y);
    match loss {
        Loss::ZeroOne => Ok(if round_prediction(p) == y { 0.0 } else { 1.0 }),
        Loss::Logistic => {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::LossDomain(format!("logistic loss needs 0 < p < 1, got {p}")));
            }
            Ok(-t * p.ln() - (1.0 - t) * (1.0 - p).ln())
        }
        Loss::Mae => Ok((p - t).abs()),
        Loss::Mse => Ok((p - t) * (p - t)),
    }
}

/// Derivative of [`loss_eval`] with respect to `p`.
pub fn loss_grad(loss: Loss, p: f64, y: bool) -> Result<f64> {
    let t = label_value(y);
    match loss {
        Loss::ZeroOne => Err(Error::UnsupportedLoss("zero-one")),
        Loss::Logistic => {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::LossDomain(format!("logistic loss needs 0 < p < 1, got {p}")));
            }
            Ok(-t / p + (1.0 - t) / (1.0 - p))
        }
        Loss::Mae => Ok(sign(p - t)),
        Loss::Mse => Ok(2.0 * (p - t)),
    }
}

/// Logistic loss of `sigmoid(z)` against `y`, computed from the logit.
#[inline]
pub fn logistic_from_logit(z: f64, y: bool) -> f64 {
    softplus(z) - label_value(y) * z
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "lambda")]
pub enum Regularizer {
    None,
    /// `lambda * sum |w|`
    L1(f64),
    /// `lambda / 2 * sum w^2`
    L2(f64),
}

impl Regularizer {
    pub fn lambda(self) -> f64 {
        match self {
            Regularizer::None => 0.0,
            Regularizer::L1(l) | Regularizer::L2(l) => l,
        }
    }

    fn is_active(self) -> bool {
        self.lambda() != 0.0
    }

    pub fn validate(self) -> Result<()> {
        let l = self.lambda();
        if l >= 0.0 && l.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("regularization factor {l} must be finite and >= 0")))
        }
    }
}

/// Penalty over every weight and bias of the model.
pub fn regularizer_eval<F: Real>(reg: Regularizer, model: &Mlp<F>) -> f64 {
    regularizer_eval_params(reg, model.params())
}

pub fn regularizer_eval_params<F: Real>(reg: Regularizer, params: &[F]) -> f64 {
    match reg {
        Regularizer::None => 0.0,
        Regularizer::L1(l) => l * params.iter().map(|w| w.as_f64().abs()).sum::<f64>(),
        Regularizer::L2(l) => 0.5 * l * params.iter().map(|w| w.as_f64() * w.as_f64()).sum::<f64>(),
    }
}

/// Shape of one affine layer followed by its activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.outputs
    }

    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.weight_len()
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.weight_len();
        start..start + self.outputs
    }
}

/// Multilayer perceptron with a single output unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F> {
    layers: Vec<LayerShape>,
    params: Vec<F>,
}

impl<F: Real> Mlp<F> {
    /// Zero-initialized network. `widths` lists layer sizes from input to
    /// output; `activations` has one entry per layer.
    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(Error::InvalidParameter("need one activation per layer and at least one layer".into()));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidParameter("layer widths must be positive".into()));
        }
        let mut layers = Vec::with_capacity(activations.len());
        let mut offset = 0;
        for (pair, &activation) in widths.windows(2).zip(activations) {
            let shape = LayerShape { inputs: pair[0], outputs: pair[1], activation, offset };
            offset += shape.param_len();
            layers.push(shape);
        }
        Ok(Self { layers, params: vec![F::zero(); offset] })
    }

    /// Kaiming-uniform initialization: every weight and bias of a layer with
    /// fan-in `k` is drawn from `U(-sqrt(6/k), sqrt(6/k))`.
    pub fn kaiming<R: Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(widths, activations)?;
        for l in 0..m.layers.len() {
            let shape = m.layers[l];
            let bound = (6.0 / shape.inputs as f64).sqrt();
            let range = shape.offset..shape.offset + shape.param_len();
            for p in &mut m.params[range] {
                *p = F::of(rng.random_range(-bound..bound));
            }
        }
        Ok(m)
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    /// Weight matrix of layer `l`, input-major.
    pub fn weights(&self, l: usize) -> &[F] {
        &self.params[self.layers[l].weight_range()]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [F] {
        let r = self.layers[l].weight_range();
        &mut self.params[r]
    }

    pub fn bias(&self, l: usize) -> &[F] {
        &self.params[self.layers[l].bias_range()]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [F] {
        let r = self.layers[l].bias_range();
        &mut self.params[r]
    }

    /// Weight from input `i` to unit `j` of layer `l`.
    pub fn weight(&self, l: usize, j: usize, i: usize) -> F {
        self.weights(l)[i * self.layers[l].outputs + j]
    }

    pub fn set_weight(&mut self, l: usize, j: usize, i: usize, value: F) {
        let outputs = self.layers[l].outputs;
        self.weights_mut(l)[i * outputs + j] = value;
    }

    pub fn set_activation(&mut self, l: usize, act: Activation) {
        self.layers[l].activation = act;
    }

    pub fn cast<G: Real>(&self) -> Mlp<G> {
        Mlp { layers: self.layers.clone(), params: self.params.iter().map(|p| G::of(p.as_f64())).collect() }
    }

    fn scratch(&self) -> Scratch<F> {
        Scratch::new(&self.layers)
    }

    fn check_width(&self, n: usize) -> Result<()> {
        if n != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: n });
        }
        Ok(())
    }

    /// Output of the network on a real-valued input.
    pub fn forward_dense(&self, x: &[F]) -> Result<F> {
        self.check_width(x.len())?;
        let mut s = self.scratch();
        let first = self.layers[0];
        let z = &mut s.pre[0];
        z.copy_from_slice(self.bias(0));
        let w = self.weights(0);
        for (i, &xi) in x.iter().enumerate() {
            if xi != F::zero() {
                axpy(z, xi, &w[i * first.outputs..(i + 1) * first.outputs]);
            }
        }
        self.finish_forward(&mut s);
        Ok(s.output())
    }

    /// Output on a packed bit row of length `input_dim()`.
    #[inline]
    pub fn forward_bits(&self, row: &[u64]) -> F {
        let mut s = self.scratch();
        self.forward_bits_with(row, &mut s);
        s.output()
    }

    fn forward_bits_with(&self, row: &[u64], s: &mut Scratch<F>) {
        let first = self.layers[0];
        let w = self.weights(0);
        let z = &mut s.pre[0];
        z.copy_from_slice(self.bias(0));
        for_each_one(row, |i| add_assign(z, &w[i * first.outputs..(i + 1) * first.outputs]));
        self.finish_forward(s);
    }

    fn finish_forward(&self, s: &mut Scratch<F>) {
        for l in 0..self.layers.len() {
            let shape = self.layers[l];
            if l > 0 {
                let input = &s.post[l - 1];
                let z = &mut s.pre[l];
                z.copy_from_slice(self.bias(l));
                let w = self.weights(l);
                if shape.outputs == 1 {
                    z[0] += dot(input, w);
                } else {
                    for (i, &h) in input.iter().enumerate() {
                        if h != F::zero() {
                            axpy(z, h, &w[i * shape.outputs..(i + 1) * shape.outputs]);
                        }
                    }
                }
            }
            shape.activation.eval_slice(&s.pre[l], &mut s.post[l]);
        }
    }

    /// Outputs for every row of `inputs`.
    pub fn forward(&self, inputs: &BitMatrix) -> Result<Vec<F>> {
        self.check_width(inputs.cols())?;
        let mut s = self.scratch();
        Ok((0..inputs.rows())
            .map(|r| {
                self.forward_bits_with(inputs.row(r), &mut s);
                s.output()
            })
            .collect())
    }

    /// Rounded outputs (ties to 0).
    pub fn predict(&self, inputs: &BitMatrix) -> Result<BitVector> {
        Ok(BitVector::from_bools(self.forward(inputs)?.into_iter().map(|p| round_prediction(p.as_f64()))))
    }

    pub fn predict_bits(&self, row: &[u64]) -> bool {
        round_prediction(self.forward_bits(row).as_f64())
    }

    /// Number of rows whose rounded output equals the label.
    pub fn count_correct(&self, inputs: &BitMatrix, labels: &BitVector) -> Result<usize> {
        self.check_width(inputs.cols())?;
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: inputs.rows(), found: labels.len() });
        }
        let mut s = self.scratch();
        let mut correct = 0;
        for r in 0..inputs.rows() {
            self.forward_bits_with(inputs.row(r), &mut s);
            if round_prediction(s.output().as_f64()) == labels.get(r) {
                correct += 1;
            }
        }
        Ok(correct)
    }

    /// Mean loss over a batch plus the regularization penalty, and its
    /// gradient with respect to every parameter.
    ///
    /// Per-row gradients are summed in `F` over chunks of rows and the chunk
    /// sums are accumulated in `f64`.
    pub fn backward(
        &self,
        inputs: &BitMatrix,
        labels: &BitVector,
        loss: Loss,
        reg: Regularizer,
    ) -> Result<Gradient<F>> {
        const CHUNK: usize = 256;
        self.check_width(inputs.cols())?;
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: inputs.rows(), found: labels.len() });
        }
        if loss == Loss::ZeroOne {
            return Err(Error::UnsupportedLoss("zero-one"));
        }
        if inputs.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let batch = inputs.rows();
        let mut s = self.scratch();
        let mut chunk = vec![F::zero(); self.params.len()];
        let mut total = vec![0.0f64; self.params.len()];
        let mut loss_sum = 0.0f64;
        let mut correct = 0;
        let last = self.layers.len() - 1;
        let out_act = self.layers[last].activation;
        for start in (0..batch).step_by(CHUNK) {
            let end = (start + CHUNK).min(batch);
            for r in start..end {
                let row = inputs.row(r);
                self.forward_bits_with(row, &mut s);
                let y = labels.get(r);
                let z = s.pre[last][0].as_f64();
                let (l, dz) = output_delta(loss, out_act, z, y)?;
                loss_sum += l;
                if round_prediction(s.output().as_f64()) == y {
                    correct += 1;
                }
                s.delta[last][0] = F::of(dz);
                self.backprop_row(row, &mut s, &mut chunk);
            }
            for (t, c) in total.iter_mut().zip(chunk.iter_mut()) {
                *t += c.as_f64();
                *c = F::zero();
            }
        }
        let inv = 1.0 / batch as f64;
        let mut values: Vec<F> = total.iter().map(|&t| F::of(t * inv)).collect();
        let mut loss_value = loss_sum * inv;
        if reg.is_active() {
            reg.validate()?;
            loss_value += regularizer_eval(reg, self);
            add_regularizer_grad(reg, &self.params, &mut values);
        }
        Ok(Gradient { values, loss: loss_value, correct })
    }

    fn backprop_row(&self, row: &[u64], s: &mut Scratch<F>, grad: &mut [F]) {
        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let (wr, br) = (shape.weight_range(), shape.bias_range());
            let delta = &s.delta[l];
            add_assign(&mut grad[br], delta);
            if l == 0 {
                let g = &mut grad[wr];
                for_each_one(row, |i| add_assign(&mut g[i * shape.outputs..(i + 1) * shape.outputs], delta));
                break;
            }
            let input = &s.post[l - 1];
            let g = &mut grad[wr.clone()];
            let w = &self.params[wr];
            let prev = self.layers[l - 1];
            let (lower, upper) = s.delta.split_at_mut(l);
            let delta = &upper[0];
            let prev_delta = &mut lower[l - 1];
            let prev_pre = &s.pre[l - 1];
            if shape.outputs == 1 {
                let d = delta[0];
                axpy(g, d, input);
                prev.activation.scaled_grad_slice(d, w, prev_pre, prev_delta);
            } else {
                for (i, &h) in input.iter().enumerate() {
                    let wrow = &w[i * shape.outputs..(i + 1) * shape.outputs];
                    if h != F::zero() {
                        axpy(&mut g[i * shape.outputs..(i + 1) * shape.outputs], h, delta);
                    }
                    prev_delta[i] = dot(wrow, delta) * prev.activation.grad(prev_pre[i]);
                }
            }
        }
    }

    /// Mean loss over a labeled set, without regularization.
    pub fn mean_loss(&self, inputs: &BitMatrix, labels: &BitVector, loss: Loss) -> Result<f64> {
        self.check_width(inputs.cols())?;
        if inputs.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let last = self.layers.len() - 1;
        let out_act = self.layers[last].activation;
        let mut s = self.scratch();
        let mut sum = 0.0;
        for r in 0..inputs.rows() {
            self.forward_bits_with(inputs.row(r), &mut s);
            let y = labels.get(r);
            sum += if loss == Loss::Logistic && out_act == Activation::Sigmoid {
                logistic_from_logit(s.pre[last][0].as_f64(), y)
            } else {
                loss_eval(loss, s.output().as_f64(), y)?
            };
        }
        Ok(sum / inputs.rows() as f64)
    }

    /// Writes the `MLP1` checkpoint: per layer `(outputs, inputs)`, activation
    /// tag, then `W` row-major as `outputs x inputs` and `b`, all `f32` LE.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"MLP1")?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for (l, shape) in self.layers.iter().enumerate() {
            w.write_all(&(shape.outputs as u32).to_le_bytes())?;
            w.write_all(&(shape.inputs as u32).to_le_bytes())?;
            w.write_all(&[shape.activation.tag()])?;
            for j in 0..shape.outputs {
                for i in 0..shape.inputs {
                    w.write_all(&(self.weight(l, j, i).as_f64() as f32).to_le_bytes())?;
                }
            }
            for b in self.bias(l) {
                w.write_all(&(b.as_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"MLP1" {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let count = read_u32(&mut r)? as usize;
        if count == 0 {
            return Err(Error::Format("checkpoint has no layers".into()));
        }
        let mut widths = Vec::new();
        let mut acts = Vec::new();
        let mut blocks = Vec::new();
        for l in 0..count {
            let outputs = read_u32(&mut r)? as usize;
            let inputs = read_u32(&mut r)? as usize;
            if l == 0 {
                widths.push(inputs);
            } else if widths[l] != inputs {
                return Err(Error::Format(format!("layer {l} input width {inputs} does not chain")));
            }
            widths.push(outputs);
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            acts.push(Activation::from_tag(tag[0])?);
            let mut vals = vec![0f32; outputs * inputs + outputs];
            let mut b4 = [0u8; 4];
            for v in vals.iter_mut() {
                r.read_exact(&mut b4)?;
                *v = f32::from_le_bytes(b4);
            }
            blocks.push(vals);
        }
        let mut m = Self::zeros(&widths, &acts)?;
        for (l, vals) in blocks.iter().enumerate() {
            let shape = m.layers[l];
            for j in 0..shape.outputs {
                for i in 0..shape.inputs {
                    m.set_weight(l, j, i, F::of(vals[j * shape.inputs + i] as f64));
                }
            }
            for (b, &v) in m.bias_mut(l).iter_mut().zip(&vals[shape.weight_len()..]) {
                *b = F::of(v as f64);
            }
        }
        Ok(m)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// `(loss, dloss/dz)` at the output pre-activation `z`.
#[inline]
fn output_delta(loss: Loss, act: Activation, z: f64, y: bool) -> Result<(f64, f64)> {
    if loss == Loss::Logistic && act == Activation::Sigmoid {
        return Ok((logistic_from_logit(z, y), sigmoid(z) - label_value(y)));
    }
    let p = act.eval(z);
    Ok((loss_eval(loss, p, y)?, loss_grad(loss, p, y)? * act.grad(z)))
}

fn add_regularizer_grad<F: Real>(reg: Regularizer, params: &[F], grad: &mut [F]) {
    match reg {
        Regularizer::None => {}
        Regularizer::L1(l) => {
            for (g, w) in grad.iter_mut().zip(params) {
                *g += F::of(l * sign(w.as_f64()));
            }
        }
        Regularizer::L2(l) => {
            let l = F::of(l);
            for (g, &w) in grad.iter_mut().zip(params) {
                *g += l * w;
            }
        }
    }
}

/// Mean-loss gradient in the model's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient<F> {
    pub values: Vec<F>,
    /// Mean loss plus regularization penalty at the evaluated point.
    pub loss: f64,
    /// Rows whose rounded output matched the label.
    pub correct: usize,
}

struct Scratch<F> {
    pre: Vec<Vec<F>>,
    post: Vec<Vec<F>>,
    delta: Vec<Vec<F>>,
}

impl<F: Real> Scratch<F> {
    fn new(layers: &[LayerShape]) -> Self {
        let bufs = || layers.iter().map(|l| vec![F::zero(); l.outputs]).collect::<Vec<_>>();
        Self { pre: bufs(), post: bufs(), delta: bufs() }
    }

    fn output(&self) -> F {
        self.post.last().expect("model has layers")[0]
    }
}

#[inline]
fn for_each_one(row: &[u64], mut f: impl FnMut(usize)) {
    for (k, &word) in row.iter().enumerate() {
        let mut w = word;
        while w != 0 {
            f(k * 64 + w.trailing_zeros() as usize);
            w &= w - 1;
        }
    }
}

#[inline]
fn add_assign<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn axpy<F: Real>(dst: &mut [F], a: F, src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    // eight partial sums so the reduction vectorizes
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for k in 0..8 {
            acc[k] += a[c * 8 + k] * b[c * 8 + k];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len().min(b.len()) {
        tail += a[i] * b[i];
    }
    acc.iter().copied().fold(F::zero(), |x, y| x + y) + tail
}

/// Depth-1 network: `n -> d` with ReLU, then `d -> 1` with sigmoid,
/// Kaiming-uniform initialized.
pub fn build_base_model<F: Real, R: Rng + ?Sized>(n: usize, width: usize, rng: &mut R) -> Result<Mlp<F>> {
    Mlp::kaiming(&[n, width, 1], &[Activation::Relu, Activation::Sigmoid], rng)
}

/// Network with hidden layers of the given widths (depth = `hidden.len()`,
/// at most 3), a shared hidden activation and a sigmoid output.
pub fn build_mlp<F: Real, R: Rng + ?Sized>(
    n: usize,
    hidden: &[usize],
    activation: Activation,
    rng: &mut R,
) -> Result<Mlp<F>> {
    if hidden.is_empty() || hidden.len() > 3 {
        return Err(Error::InvalidParameter(format!("depth must be 1..=3, got {}", hidden.len())));
    }
    let mut widths = vec![n];
    widths.extend_from_slice(hidden);
    widths.push(1);
    let mut acts = vec![activation; hidden.len()];
    acts.push(Activation::Sigmoid);
    Mlp::kaiming(&widths, &acts, rng)
}

/// Output weights of the exact parity network: `w_1 = 1` and
/// `w_i = (i mod 2) - sum_{j<i} w_j (i - j + 1)` for `i = 2..=n`.
pub fn parity_output_weights(n: usize) -> Vec<i64> {
    let mut w: Vec<i64> = Vec::with_capacity(n);
    for i in 1..=n as i64 {
        if i == 1 {
            w.push(1);
            continue;
        }
        let s: i64 = w.iter().enumerate().map(|(j, &wj)| wj * (i - (j as i64 + 1) + 1)).sum();
        w.push(i % 2 - s);
    }
    w
}

/// Width-`n` ReLU network with identity output computing `<s, x> mod 2`
/// exactly on every `x` in `{0,1}^n`: hidden unit `j` is `relu(<s, x> - j)`.
pub fn build_parity_network<F: Real>(secret: &BitVector) -> Result<Mlp<F>> {
    let n = secret.len();
    if n == 0 {
        return Err(Error::InvalidParameter("secret must be nonempty".into()));
    }
    let mut m = Mlp::zeros(&[n, n, 1], &[Activation::Relu, Activation::Identity])?;
    for j in 0..n {
        for i in secret.ones() {
            m.set_weight(0, j, i, F::one());
        }
        m.bias_mut(0)[j] = F::of(-(j as f64));
    }
    for (j, &w) in parity_output_weights(n).iter().enumerate() {
        m.set_weight(1, 0, j, F::of(w as f64));
    }
    Ok(m)
}
