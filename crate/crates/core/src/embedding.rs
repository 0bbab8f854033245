//! Trainable map from input features to a unit-norm embedding.
//!
//! Parameters live in one flat vector in declared layer order (weights
//! row-major, then bias, per layer), which is also the checkpoint layout and
//! the layout of [`GradientBuffer`].

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::check_len;
use crate::linalg::{add_outer, affine, dot, matvec_t, norm};
use crate::{Error, Result};

/// Pre-normalization norms below this are rejected as degenerate.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Linear,
    OneHiddenTanh { hidden: usize },
}

/// Location of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    fn end(&self) -> usize {
        self.bias_offset + self.rows
    }
}

fn layer_shapes(arch: Arch, input_dim: usize, embed_dim: usize) -> Vec<LayerShape> {
    let dims: Vec<(usize, usize)> = match arch {
        Arch::Linear => vec![(embed_dim, input_dim)],
        Arch::OneHiddenTanh { hidden } => vec![(hidden, input_dim), (embed_dim, hidden)],
    };
    let mut offset = 0;
    dims.into_iter()
        .map(|(rows, cols)| {
            let shape = LayerShape {
                rows,
                cols,
                weight_offset: offset,
                bias_offset: offset + rows * cols,
            };
            offset = shape.end();
            shape
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    arch: Arch,
    input_dim: usize,
    embed_dim: usize,
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

/// Activations kept from [`EmbeddingModel::forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    input: Vec<f64>,
    /// Post-tanh hidden activations; empty for the linear arch.
    hidden: Vec<f64>,
    norm: f64,
    output: Vec<f64>,
}

impl ForwardCache {
    /// The unit-norm embedding.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn into_output(self) -> Vec<f64> {
        self.output
    }
}

/// Accumulated gradient, congruent with the model's parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer(pub Vec<f64>);

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn zero(&mut self) {
        self.0.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl EmbeddingModel {
    /// Weights drawn from `Gaussian(0, 1/sqrt(fan_in))`, biases zero.
    pub fn new<R: Rng + ?Sized>(
        arch: Arch,
        input_dim: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeros(arch, input_dim, embed_dim)?;
        for layer in model.layers.clone() {
            let dist = Normal::new(0.0, 1.0 / libm::sqrt(layer.cols as f64))
                .map_err(|_| Error::Config("bad init scale".into()))?;
            for w in &mut model.params[layer.weight_offset..layer.bias_offset] {
                *w = dist.sample(rng);
            }
        }
        Ok(model)
    }

    pub fn zeros(arch: Arch, input_dim: usize, embed_dim: usize) -> Result<Self> {
        if input_dim == 0 || embed_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if let Arch::OneHiddenTanh { hidden: 0 } = arch {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        let layers = layer_shapes(arch, input_dim, embed_dim);
        let n = layers.last().map_or(0, LayerShape::end);
        Ok(Self {
            arch,
            input_dim,
            embed_dim,
            layers,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(
        arch: Arch,
        input_dim: usize,
        embed_dim: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut model = Self::zeros(arch, input_dim, embed_dim)?;
        check_len(model.params.len(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        model.params = params;
        Ok(model)
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grads(&self) -> GradientBuffer {
        GradientBuffer::zeros(self.params.len())
    }

    fn weight(&self, l: &LayerShape) -> &[f64] {
        &self.params[l.weight_offset..l.bias_offset]
    }

    fn bias(&self, l: &LayerShape) -> &[f64] {
        &self.params[l.bias_offset..l.end()]
    }

    pub fn forward(&self, features: &[f64]) -> Result<ForwardCache> {
        check_len(self.input_dim, features.len())?;
        let mut z = vec![0.0; self.embed_dim];
        let hidden = match self.arch {
            Arch::Linear => {
                let l = &self.layers[0];
                affine(self.weight(l), self.bias(l), features, &mut z);
                Vec::new()
            }
            Arch::OneHiddenTanh { hidden } => {
                let (l1, l2) = (&self.layers[0], &self.layers[1]);
                let mut a = vec![0.0; hidden];
                affine(self.weight(l1), self.bias(l1), features, &mut a);
                a.iter_mut().for_each(|x| *x = libm::tanh(*x));
                affine(self.weight(l2), self.bias(l2), &a, &mut z);
                a
            }
        };
        let n = norm(&z);
        if !(n >= MIN_EMBEDDING_NORM) || n.is_infinite() {
            if !n.is_finite() {
                return Err(Error::NonFinite("embedding"));
            }
            return Err(Error::DegenerateEmbedding { norm: n });
        }
        z.iter_mut().for_each(|x| *x /= n);
        Ok(ForwardCache {
            input: features.to_vec(),
            hidden,
            norm: n,
            output: z,
        })
    }

    /// The unit-norm embedding of `features`, without the cache.
    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.forward(features).map(ForwardCache::into_output)
    }

    /// Gradient of `output . grad_output` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64]) -> Result<GradientBuffer> {
        let mut grads = self.zero_grads();
        self.accumulate_backward(cache, grad_output, &mut grads)?;
        Ok(grads)
    }

    /// Like [`EmbeddingModel::backward`] but adds into an existing buffer.
    pub fn accumulate_backward(
        &self,
        cache: &ForwardCache,
        grad_output: &[f64],
        grads: &mut GradientBuffer,
    ) -> Result<()> {
        check_len(self.embed_dim, grad_output.len())?;
        check_len(self.embed_dim, cache.output.len())?;
        check_len(self.input_dim, cache.input.len())?;
        check_len(self.params.len(), grads.0.len())?;

        // d(z/|z|)/dz = (I - y y^T) / |z|
        let y = &cache.output;
        let radial = dot(y, grad_output);
        let dz: Vec<f64> = grad_output
            .iter()
            .zip(y)
            .map(|(g, yi)| (g - yi * radial) / cache.norm)
            .collect();

        let g = &mut grads.0;
        match self.arch {
            Arch::Linear => {
                let l = self.layers[0];
                add_outer(&mut g[l.weight_offset..l.bias_offset], &dz, &cache.input);
                add_into(&mut g[l.bias_offset..l.end()], &dz);
            }
            Arch::OneHiddenTanh { hidden } => {
                let (l1, l2) = (self.layers[0], self.layers[1]);
                check_len(hidden, cache.hidden.len())?;
                add_outer(&mut g[l2.weight_offset..l2.bias_offset], &dz, &cache.hidden);
                add_into(&mut g[l2.bias_offset..l2.end()], &dz);
                let mut da = vec![0.0; hidden];
                matvec_t(self.weight(&l2), &dz, &mut da);
                for (d, a) in da.iter_mut().zip(&cache.hidden) {
                    *d *= 1.0 - a * a;
                }
                add_outer(&mut g[l1.weight_offset..l1.bias_offset], &da, &cache.input);
                add_into(&mut g[l1.bias_offset..l1.end()], &da);
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
