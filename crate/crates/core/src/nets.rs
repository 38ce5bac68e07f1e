//! Parameter containers and forward passes: coordinate MLPs, the residual
//! convolutional encoder and the small convolutional blocks shared by the
//! tracker and the offset predictor.
//!
//! Every container stores plain [`Tensor`]s. To differentiate, a container is
//! bound into a [`Graph`] with `bind`, which returns a mirror struct of
//! [`Var`]s whose `vars()` order matches the container's `tensors()` order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::{normal, seeded, Prng};
use crate::Result;

/// Uniform access to the tensors of a parameter container, in a fixed order.
pub trait Params {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// He-normal weights for a layer with `fan_in` inputs.
fn he(rng: &mut Prng, fan_in: usize, shape: Vec<usize>) -> Tensor {
    let std = libm::sqrtf(2.0 / fan_in.max(1) as f32);
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal(rng) * std).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Fully connected layer, `weight: [in, out]`, `bias: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn init(rng: &mut Prng, input: usize, output: usize) -> Self {
        Self { weight: he(rng, input, vec![input, output]), bias: Tensor::zeros([output]) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros([input, output]), bias: Tensor::zeros([output]) }
    }

    pub fn input(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// 3x3 convolution, `weight: [9 * in, out]`, `bias: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    pub fn init(rng: &mut Prng, input: usize, output: usize) -> Self {
        Self { weight: he(rng, 9 * input, vec![9 * input, output]), bias: Tensor::zeros([output]) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros([9 * input, output]), bias: Tensor::zeros([output]) }
    }

    pub fn input(&self) -> usize {
        self.weight.shape()[0] / 9
    }

    pub fn output(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// A `(weight, bias)` pair bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

fn bind_pair(g: &mut Graph, w: &Tensor, b: &Tensor, trainable: bool) -> LayerVars {
    LayerVars { weight: g.leaf(w.clone(), trainable), bias: g.leaf(b.clone(), trainable) }
}

/// Shape of an MLP: `layers` affine maps with ReLU between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub layers: usize,
}

impl MlpSpec {
    pub const DEFAULT_LAYERS: usize = 5;

    pub fn five_layer(input: usize, hidden: usize, output: usize) -> Self {
        Self { input, hidden, output, layers: Self::DEFAULT_LAYERS }
    }

    fn dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|i| {
                let a = if i == 0 { self.input } else { self.hidden };
                let b = if i + 1 == self.layers { self.output } else { self.hidden };
                (a, b)
            })
            .collect()
    }
}

/// Coordinate MLP: ReLU between layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<LayerVars>,
}

impl Mlp {
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        if spec.layers == 0 {
            return Err(shape_err!("an MLP needs at least one layer"));
        }
        let mut rng = seeded(seed);
        Ok(Self { layers: spec.dims().into_iter().map(|(a, b)| Dense::init(&mut rng, a, b)).collect() })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err!("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output() != pair[1].input() {
                return Err(shape_err!("layer dims do not chain: {} -> {}", pair[0].output(), pair[1].input()));
            }
        }
        Ok(Self { layers })
    }

    pub fn spec(&self) -> MlpSpec {
        let first = &self.layers[0];
        let last = &self.layers[self.layers.len() - 1];
        MlpSpec {
            input: first.input(),
            hidden: if self.layers.len() > 1 { first.output() } else { 0 },
            output: last.output(),
            layers: self.layers.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        MlpVars { layers: self.layers.iter().map(|l| bind_pair(g, &l.weight, &l.bias, trainable)).collect() }
    }

    /// Batched forward over the rows of `input: [B, in]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let y = vars.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Single-vector forward without a graph, accumulating in `f64`.
    pub fn forward_vec(&self, input: &[f32]) -> Result<Vec<f32>> {
        if input.len() != self.input_dim() {
            return Err(shape_err!("MLP expects {} inputs, got {}", self.input_dim(), input.len()));
        }
        let mut x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
        for (i, l) in self.layers.iter().enumerate() {
            let b = l.output();
            let w = l.weight.data();
            let mut y: Vec<f64> = l.bias.data().iter().map(|&v| v as f64).collect();
            for (k, &xk) in x.iter().enumerate() {
                for (yj, &wj) in y.iter_mut().zip(&w[k * b..(k + 1) * b]) {
                    *yj += xk * wj as f64;
                }
            }
            if i + 1 < self.layers.len() {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = y;
        }
        Ok(x.into_iter().map(|v| v as f32).collect())
    }
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = g.linear(x, l.weight, l.bias)?;
            if i + 1 < n {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

impl Params for Mlp {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// Residual convolutional feature extractor with no resampling anywhere:
/// the output has the input's spatial size.
/// Multiplier on each residual branch before it joins the trunk.
pub const RES_SCALE: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub channels: usize,
    pub blocks: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { channels: 32, blocks: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub head: Conv,
    pub blocks: Vec<(Conv, Conv)>,
    pub tail: Conv,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub head: LayerVars,
    pub blocks: Vec<(LayerVars, LayerVars)>,
    pub tail: LayerVars,
}

impl Encoder {
    pub fn init(spec: EncoderSpec, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let c = spec.channels;
        Self {
            head: Conv::init(&mut rng, 3, c),
            blocks: (0..spec.blocks).map(|_| (Conv::init(&mut rng, c, c), Conv::init(&mut rng, c, c))).collect(),
            tail: Conv::init(&mut rng, c, c),
        }
    }

    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec { channels: self.head.output(), blocks: self.blocks.len() }
    }

    pub fn channels(&self) -> usize {
        self.head.output()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        EncoderVars {
            head: bind_pair(g, &self.head.weight, &self.head.bias, trainable),
            blocks: self
                .blocks
                .iter()
                .map(|(a, b)| {
                    (bind_pair(g, &a.weight, &a.bias, trainable), bind_pair(g, &b.weight, &b.bias, trainable))
                })
                .collect(),
            tail: bind_pair(g, &self.tail.weight, &self.tail.bias, trainable),
        }
    }

    /// Features `[H, W, C]` of one `[H, W, 3]` frame.
    pub fn forward(&self, frame: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(frame.clone());
        let y = vars.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

impl EncoderVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, _, c) = g.value(x).dims3()?;
        if c != 3 {
            return Err(shape_err!("encoder expects 3 input channels, got {}", c));
        }
        let head = g.conv2d(x, self.head.weight, self.head.bias)?;
        let mut r = head;
        for (a, b) in &self.blocks {
            let t = g.conv2d(r, a.weight, a.bias)?;
            let t = g.relu(t)?;
            let t = g.conv2d(t, b.weight, b.bias)?;
            let t = g.scale(t, RES_SCALE)?;
            r = g.add(r, t)?;
        }
        let t = g.conv2d(r, self.tail.weight, self.tail.bias)?;
        g.add(t, head)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.head.weight, self.head.bias];
        for (a, b) in &self.blocks {
            v.extend_from_slice(&[a.weight, a.bias, b.weight, b.bias]);
        }
        v.extend_from_slice(&[self.tail.weight, self.tail.bias]);
        v
    }
}

impl Params for Encoder {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.head.weight, &self.head.bias];
        for (a, b) in &self.blocks {
            v.extend_from_slice(&[&a.weight, &a.bias, &b.weight, &b.bias]);
        }
        v.extend_from_slice(&[&self.tail.weight, &self.tail.bias]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.head.weight, &mut self.head.bias];
        for (a, b) in &mut self.blocks {
            v.push(&mut a.weight);
            v.push(&mut a.bias);
            v.push(&mut b.weight);
            v.push(&mut b.bias);
        }
        v.push(&mut self.tail.weight);
        v.push(&mut self.tail.bias);
        v
    }
}

/// A plain stack of 3x3 convolutions with ReLU between them and a linear
/// last layer. Used by the tracker backbone and the offset predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<Conv>,
}

#[derive(Clone, Debug)]
pub struct ConvStackVars {
    pub layers: Vec<LayerVars>,
}

impl ConvStack {
    /// `widths = [in, h1, ..., out]`.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(shape_err!("conv stack needs at least input and output widths"));
        }
        let mut rng = seeded(seed);
        Ok(Self { layers: widths.windows(2).map(|w| Conv::init(&mut rng, w[0], w[1])).collect() })
    }

    pub fn input(&self) -> usize {
        self.layers[0].input()
    }

    pub fn output(&self) -> usize {
        self.layers[self.layers.len() - 1].output()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input()];
        w.extend(self.layers.iter().map(|l| l.output()));
        w
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ConvStackVars {
        ConvStackVars { layers: self.layers.iter().map(|l| bind_pair(g, &l.weight, &l.bias, trainable)).collect() }
    }
}

impl ConvStackVars {
    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = g.conv2d(x, l.weight, l.bias)?;
            if i + 1 < n {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

impl Params for ConvStack {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::new([h, w, 3], (0..h * w * 3).map(|_| crate::rng::uniform(&mut rng, 0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut mlp = Mlp::init(MlpSpec::five_layer(4, 8, 3), 1).unwrap();
        for l in &mut mlp.layers {
            l.weight.data_mut().fill(0.0);
        }
        mlp.layers[4].bias = Tensor::new([3], vec![0.1, -0.2, 0.3]).unwrap();
        let out = mlp.forward(&Tensor::new([2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 9.0]).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.1, -0.2, 0.3, 0.1, -0.2, 0.3]);
    }

    #[test]
    fn single_identity_layer_passes_through() {
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let mlp = Mlp::from_layers(vec![Dense { weight: Tensor::new([3, 3], eye).unwrap(), bias: Tensor::zeros([3]) }])
            .unwrap();
        let x = Tensor::new([1, 3], vec![0.3, -2.0, 5.0]).unwrap();
        assert_eq!(mlp.forward(&x).unwrap(), x);
    }

    #[test]
    fn batch_equals_loop() {
        let mlp = Mlp::init(MlpSpec::five_layer(5, 16, 4), 9).unwrap();
        let x = Tensor::new([2, 5], (0..10).map(|i| (i as f32 * 0.7).sin()).collect()).unwrap();
        let batch = mlp.forward(&x).unwrap();
        for r in 0..2 {
            let single = mlp.forward_vec(&x.data()[r * 5..(r + 1) * 5]).unwrap();
            for (a, b) in single.iter().zip(&batch.data()[r * 4..(r + 1) * 4]) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let mlp = Mlp::init(MlpSpec::five_layer(5, 8, 2), 0).unwrap();
        assert!(matches!(mlp.forward(&Tensor::zeros([3, 4])), Err(crate::Error::Shape(_))));
        assert!(Mlp::from_layers(vec![Dense::zeros(2, 3), Dense::zeros(4, 1)]).is_err());
    }

    #[test]
    fn encoder_keeps_spatial_size() {
        let enc = Encoder::init(EncoderSpec { channels: 8, blocks: 2 }, 3);
        for (h, w) in [(8, 8), (13, 9), (32, 17)] {
            let out = enc.forward(&frame(h, w, 1)).unwrap();
            assert_eq!(out.shape(), &[h, w, 8]);
        }
    }

    #[test]
    fn encoder_zero_frame_zero_features() {
        let mut enc = Encoder::init(EncoderSpec::default(), 5);
        enc.tail = Conv::zeros(32, 32);
        let out = enc.forward(&Tensor::zeros([6, 7, 3])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_is_shift_equivariant_in_interior() {
        let enc = Encoder::init(EncoderSpec { channels: 4, blocks: 1 }, 2);
        let f = frame(20, 20, 4);
        let shifted = crate::image::translate(&f, 0, 1).unwrap();
        let (a, b) = (enc.forward(&f).unwrap(), enc.forward(&shifted).unwrap());
        // receptive field radius is 4 (four 3x3 convs); stay away from borders
        for r in 5..15 {
            for c in 5..14 {
                for k in 0..4 {
                    let va = a.data()[(r * 20 + c) * 4 + k];
                    let vb = b.data()[(r * 20 + c + 1) * 4 + k];
                    assert!((va - vb).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Mlp::init(MlpSpec::five_layer(3, 8, 3), 11).unwrap();
        assert_eq!(a, Mlp::init(MlpSpec::five_layer(3, 8, 3), 11).unwrap());
        assert_ne!(a, Mlp::init(MlpSpec::five_layer(3, 8, 3), 12).unwrap());
        assert!(a.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn he_std_matches_fan_in() {
        let conv = Conv::init(&mut seeded(3), 40, 30); // 10.8k weights, fan_in 360
        let d = conv.weight.data();
        let mean = d.iter().sum::<f32>() / d.len() as f32;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d.len() as f32;
        let want = libm::sqrtf(2.0 / 360.0);
        let got = libm::sqrtf(var);
        assert!(got < want * 1.5 && got > want / 1.5, "std {} vs {}", got, want);
    }
}
