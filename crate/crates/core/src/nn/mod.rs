//! Small trainable MLP engine: forward pass over row batches, hand-derived
//! backpropagation for the fixed layer vocabulary, sinusoidal input encoding
//! and Adam. Serves both the scene-flow and rendering networks.

mod adam;
pub mod checkpoint;
mod encoding;
mod mat;

pub use adam::{adam_step, cosine_lr, AdamError, AdamState};
pub use encoding::EncodingConfig;
pub use mat::Mat;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("batch width {got} does not match layer input width {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("cache does not match this network (layer {layer}: {what})")]
    StaleCache { layer: usize, what: &'static str },
    #[error("adjacent layer widths do not chain at layer {0}")]
    BadChain(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::None => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative_from_pre(self, z: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
        }
    }
}

/// One affine layer `y = act(x W + b)`, weight stored input-major
/// (rows = input width, cols = output width).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_width(&self) -> usize {
        self.weight.rows
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols
    }
}

/// Parameter bundle for a fully connected network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Uniform fan-in initialization `U(-1/sqrt(in), 1/sqrt(in))`, zero bias.
    pub fn init(widths: &[usize], activations: &[Activation], seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least one layer");
        assert_eq!(widths.len() - 1, activations.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (input, output) = (w[0], w[1]);
                let bound = 1.0 / (input as f64).sqrt();
                Layer {
                    weight: Mat::from_fn(input, output, |_, _| rng.gen_range(-bound..bound)),
                    bias: vec![0.0; output],
                    activation,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(NnError::BadChain(i + 1));
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().output_width()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data.len() + l.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut o = 0;
        for l in &mut self.layers {
            let wn = l.weight.data.len();
            l.weight.data.copy_from_slice(&flat[o..o + wn]);
            o += wn;
            let bn = l.bias.len();
            l.bias.copy_from_slice(&flat[o..o + bn]);
            o += bn;
        }
    }

    /// Affine + activation chain over a row batch, caching what exact
    /// backprop needs.
    pub fn forward(&self, batch: &Mat) -> Result<(Mat, MlpCache), NnError> {
        if batch.cols != self.input_width() {
            return Err(NnError::WidthMismatch { got: batch.cols, want: self.input_width() });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            inputs.push(x.clone());
            let mut z = x.matmul(&layer.weight);
            for r in 0..z.rows {
                let row = z.row_mut(r);
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            preacts.push(z.clone());
            for v in z.data.iter_mut() {
                *v = layer.activation.apply(*v);
            }
            x = z;
        }
        Ok((x, MlpCache { inputs, preacts }))
    }

    /// Reverse-mode gradients of the forward map. Returns parameter gradients
    /// and the gradient w.r.t. the input batch.
    pub fn backward(&self, cache: &MlpCache, upstream: &Mat) -> Result<(MlpGrads, Mat), NnError> {
        if cache.inputs.len() != self.layers.len() {
            return Err(NnError::StaleCache { layer: 0, what: "layer count" });
        }
        let last = self.layers.len() - 1;
        if upstream.cols != self.layers[last].output_width() || upstream.rows != cache.inputs[0].rows {
            return Err(NnError::StaleCache { layer: last, what: "upstream shape" });
        }
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        let mut da = upstream.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.preacts[li];
            if z.rows != da.rows || z.cols != da.cols {
                return Err(NnError::StaleCache { layer: li, what: "preactivation shape" });
            }
            // dZ = dA .* act'(Z)
            let mut dz = da;
            for (v, &zz) in dz.data.iter_mut().zip(&z.data) {
                *v *= layer.activation.derivative_from_pre(zz);
            }
            let x = &cache.inputs[li];
            let dw = x.t_matmul(&dz);
            let mut db = vec![0.0; layer.output_width()];
            for r in 0..dz.rows {
                for (bi, v) in db.iter_mut().enumerate() {
                    *v += dz.get(r, bi);
                }
            }
            da = dz.matmul_t(&layer.weight);
            grads.push(LayerGrads { weight: dw, bias: db });
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, da))
    }
}

/// Activations cached by [`MlpParams::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Mat>,
    preacts: Vec<Mat>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Mat::zeros(l.weight.rows, l.weight.cols),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weight.data);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data.iter_mut().zip(&b.weight.data) {
                *x += *y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for v in l.weight.data.iter_mut() {
                *v *= s;
            }
            for v in l.bias.iter_mut() {
                *v *= s;
            }
        }
    }
}
