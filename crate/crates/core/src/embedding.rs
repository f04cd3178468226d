//! Trainable embedding function: a multilayer perceptron with exact analytic
//! gradients and a versioned text checkpoint format.
//!
//! Hidden layers apply the configured activation; the output layer is affine
//! only, so prototypes live in an unconstrained space. All dot products
//! accumulate left to right starting from zero, then add the bias.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &str = "protopad-ckpt v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// ReLU uses a zero subgradient at the kink.
    fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - a * a,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl EmbeddingConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        EmbeddingConfig {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidSpec(
                "embedding layer widths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Widths from input to output, e.g. `[d, h1, .., e]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden_dims);
        w.push(self.output_dim);
        w
    }
}

/// One affine layer; `weights` is row-major `fan_out × fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            fan_in,
            fan_out,
            weights: vec![T::zero(); fan_in * fan_out],
            bias: vec![T::zero(); fan_out],
        }
    }

    pub fn weight(&self, row: usize, col: usize) -> T {
        self.weights[row * self.fan_in + col]
    }

    fn affine(&self, x: &[T]) -> Vec<T> {
        self.weights
            .chunks_exact(self.fan_in)
            .zip(&self.bias)
            .map(|(row, &b)| {
                let mut acc = T::zero();
                for (&w, &xi) in row.iter().zip(x) {
                    acc = acc + w * xi;
                }
                acc + b
            })
            .collect()
    }
}

/// Parameters of the embedder. The same shape doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParameters<T> {
    pub activation: Activation,
    pub layers: Vec<Layer<T>>,
}

/// Pre-activations and activations retained from one forward pass.
/// `activations[0]` is the input and `activations[L]` the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<T> {
    pub pre_activations: Vec<Vec<T>>,
    pub activations: Vec<Vec<T>>,
}

impl<T: Scalar> MlpParameters<T> {
    /// Zero-mean Gaussian weights with standard deviation `sqrt(2/fan_in)` for
    /// ReLU and `sqrt(1/fan_in)` for tanh; zero biases.
    pub fn init(cfg: &EmbeddingConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gain = match cfg.activation {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        };
        let widths = cfg.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = (gain / fan_in as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::lit(z * scale)
                    })
                    .collect();
                Layer {
                    fan_in,
                    fan_out,
                    weights,
                    bias: vec![T::zero(); fan_out],
                }
            })
            .collect();
        Ok(MlpParameters {
            activation: cfg.activation,
            layers,
        })
    }

    /// All-zero parameters with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        MlpParameters {
            activation: self.activation,
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in, l.fan_out))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.fan_in == b.fan_in && a.fan_out == b.fan_out)
    }

    /// Flat views of every parameter buffer in a fixed order (per layer: weights, bias).
    pub fn buffers(&self) -> impl Iterator<Item = &[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }

    /// Reads the parameter at flat index `i` (in `buffers` order).
    pub fn get_flat(&self, mut i: usize) -> T {
        for b in self.buffers() {
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn set_flat(&mut self, mut i: usize, value: T) {
        for b in self.buffers_mut() {
            if i < b.len() {
                b[i] = value;
                return;
            }
            i -= b.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, ForwardCache<T>)> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut cache = ForwardCache {
            pre_activations: Vec::with_capacity(self.layers.len()),
            activations: Vec::with_capacity(self.layers.len() + 1),
        };
        cache.activations.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(cache.activations.last().expect("input pushed"));
            let a = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            cache.pre_activations.push(z);
            cache.activations.push(a);
        }
        let out = cache.activations.last().expect("nonempty").clone();
        Ok((out, cache))
    }

    /// Forward pass without retaining intermediates.
    pub fn embed(&self, x: &[T]) -> Result<Vec<T>> {
        self.forward(x).map(|(e, _)| e)
    }

    /// Gradients of a scalar objective given its gradient w.r.t. the embedding.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_embedding: &[T]) -> Result<Self> {
        let mut grads = self.zeros_like();
        self.backward_accumulate(cache, grad_embedding, &mut grads)?;
        Ok(grads)
    }

    /// Adds this sample's parameter gradients into `grads`.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache<T>,
        grad_embedding: &[T],
        grads: &mut Self,
    ) -> Result<()> {
        let n = self.layers.len();
        if cache.pre_activations.len() != n
            || cache.activations.len() != n + 1
            || !grads.same_shape(self)
        {
            return Err(Error::InvalidSpec(
                "forward cache or gradient buffer does not match the parameter shapes".into(),
            ));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if cache.pre_activations[l].len() != layer.fan_out
                || cache.activations[l].len() != layer.fan_in
            {
                return Err(Error::InvalidSpec(format!(
                    "forward cache layer {l} does not match parameter shapes"
                )));
            }
        }
        if grad_embedding.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                found: grad_embedding.len(),
            });
        }
        let mut delta = grad_embedding.to_vec();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let input = &cache.activations[l];
            let g = &mut grads.layers[l];
            for (i, &d) in delta.iter().enumerate() {
                g.bias[i] = g.bias[i] + d;
                let row = &mut g.weights[i * layer.fan_in..(i + 1) * layer.fan_in];
                for (gw, &xj) in row.iter_mut().zip(input) {
                    *gw = *gw + d * xj;
                }
            }
            if l > 0 {
                let z = &cache.pre_activations[l - 1];
                let a = &cache.activations[l];
                let mut prev = vec![T::zero(); layer.fan_in];
                for (i, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[i * layer.fan_in..(i + 1) * layer.fan_in];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p = *p + w * d;
                    }
                }
                for ((p, &zj), &aj) in prev.iter_mut().zip(z).zip(a) {
                    *p = *p * self.activation.derivative(zj, aj);
                }
                delta = prev;
            }
        }
        Ok(())
    }

    /// Recovers the configuration implied by the parameter shapes.
    pub fn config(&self, seed: u64) -> EmbeddingConfig {
        EmbeddingConfig {
            input_dim: self.input_dim(),
            hidden_dims: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.fan_out)
                .collect(),
            output_dim: self.output_dim(),
            activation: self.activation,
            seed,
        }
    }
}

/// Serializes parameters and config into the `protopad-ckpt v1` text format.
pub fn checkpoint_to_string<T: Scalar>(params: &MlpParameters<T>, cfg: &EmbeddingConfig) -> String {
    let mut out = String::new();
    let join = |v: &[T]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let hidden = cfg
        .hidden_dims
        .iter()
        .map(|h| h.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(out, "[config]");
    let _ = writeln!(out, "input_dim {}", cfg.input_dim);
    let _ = writeln!(out, "hidden_dims {hidden}");
    let _ = writeln!(out, "output_dim {}", cfg.output_dim);
    let _ = writeln!(out, "activation {}", cfg.activation.name());
    let _ = writeln!(out, "seed {}", cfg.seed);
    for (l, layer) in params.layers.iter().enumerate() {
        let _ = writeln!(out, "[layer {l}]");
        let _ = writeln!(out, "shape {} {}", layer.fan_out, layer.fan_in);
        for row in layer.weights.chunks_exact(layer.fan_in) {
            let _ = writeln!(out, "w {}", join(row));
        }
        let _ = writeln!(out, "b {}", join(&layer.bias));
    }
    let _ = writeln!(out, "[end]");
    out
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, section: &str) -> Result<&'a str> {
        self.inner
            .next()
            .ok_or_else(|| Error::checkpoint(section, "file ends before the section is complete"))
    }

    fn keyed(&mut self, section: &str, key: &str) -> Result<&'a str> {
        let line = self.next(section)?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            None if line == key => Ok(""),
            _ => Err(Error::checkpoint(
                section,
                format!("expected `{key}`, found `{line}`"),
            )),
        }
    }

    fn header(&mut self, expected: &str) -> Result<()> {
        match self.inner.next() {
            Some(line) if line == format!("[{expected}]") => Ok(()),
            Some(line) => Err(Error::checkpoint(
                expected,
                format!("expected section header, found `{line}`"),
            )),
            None => Err(Error::checkpoint(
                expected,
                "section is missing (file truncated)",
            )),
        }
    }
}

fn parse_usize(section: &str, s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::checkpoint(section, format!("`{s}` is not a non-negative integer")))
}

fn parse_values<T: Scalar>(section: &str, s: &str, expected: usize) -> Result<Vec<T>> {
    let values = s
        .split_whitespace()
        .map(|v| match v.parse::<T>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(Error::checkpoint(
                section,
                format!("`{v}` is not a finite number"),
            )),
        })
        .collect::<Result<Vec<T>>>()?;
    if values.len() != expected {
        return Err(Error::checkpoint(
            section,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

pub fn checkpoint_from_str<T: Scalar>(text: &str) -> Result<(MlpParameters<T>, EmbeddingConfig)> {
    let mut lines = Lines {
        inner: text.lines().peekable(),
    };
    match lines.inner.next() {
        Some(CHECKPOINT_MAGIC) => {}
        Some(other) => {
            return Err(Error::checkpoint(
                "version",
                format!("expected `{CHECKPOINT_MAGIC}`, found `{other}`"),
            ))
        }
        None => return Err(Error::checkpoint("version", "file is empty")),
    }
    lines.header("config")?;
    let sec = "config";
    let input_dim = parse_usize(sec, lines.keyed(sec, "input_dim")?)?;
    let hidden_dims = lines
        .keyed(sec, "hidden_dims")?
        .split_whitespace()
        .map(|h| parse_usize(sec, h))
        .collect::<Result<Vec<_>>>()?;
    let output_dim = parse_usize(sec, lines.keyed(sec, "output_dim")?)?;
    let act = lines.keyed(sec, "activation")?;
    let activation = Activation::parse(act)
        .ok_or_else(|| Error::checkpoint(sec, format!("unknown activation `{act}`")))?;
    let seed = lines
        .keyed(sec, "seed")?
        .trim()
        .parse()
        .map_err(|_| Error::checkpoint(sec, "seed is not an integer"))?;
    let cfg = EmbeddingConfig {
        input_dim,
        hidden_dims,
        output_dim,
        activation,
        seed,
    };
    cfg.validate()
        .map_err(|e| Error::checkpoint(sec, e.to_string()))?;

    let mut layers = Vec::new();
    for (l, w) in cfg.widths().windows(2).enumerate() {
        let sec = format!("layer {l}");
        lines.header(&sec)?;
        let shape = lines.keyed(&sec, "shape")?;
        let dims: Vec<usize> = shape
            .split_whitespace()
            .map(|s| parse_usize(&sec, s))
            .collect::<Result<_>>()?;
        if dims != [w[1], w[0]] {
            return Err(Error::checkpoint(
                &sec,
                format!(
                    "shape {dims:?} does not match config widths {} x {}",
                    w[1], w[0]
                ),
            ));
        }
        let mut layer = Layer::zeros(w[0], w[1]);
        layer.weights.clear();
        for _ in 0..w[1] {
            let row = lines.keyed(&sec, "w")?;
            layer.weights.extend(parse_values::<T>(&sec, row, w[0])?);
        }
        layer.bias = parse_values(&sec, lines.keyed(&sec, "b")?, w[1])?;
        layers.push(layer);
    }
    lines.header("end")?;
    Ok((MlpParameters { activation, layers }, cfg))
}

pub fn save_checkpoint<T: Scalar>(
    params: &MlpParameters<T>,
    cfg: &EmbeddingConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_string(params, cfg)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(MlpParameters<T>, EmbeddingConfig)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
