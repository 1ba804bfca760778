//! Multi-layer perceptron classifier.
//!
//! The model maps an `n × d` batch to `n × k` class probabilities through
//! affine layers with ReLU between them and a softmax at the end. Parameters
//! live in [`MlpParams`]; to differentiate, bind them to a [`Graph`] with
//! [`MlpParams::bind`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ndgrad::{GradientMap, Graph, Tensor, Var};
use crate::rngs::{stream_rng, Stream};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"NTPM";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input dimension, hidden widths, class count.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(widths: Vec<usize>, seed: u64) -> Self {
        Self {
            widths,
            activation: Activation::Relu,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(format!(
                "model needs at least input and output widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("zero layer width in {:?}", self.widths)));
        }
        Ok(())
    }
}

/// Weights `(width[l], width[l+1])` and biases `(width[l+1])` per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// He-initialised parameters drawn from the stream derived from `config.seed`.
pub fn init_params(config: &ModelConfig) -> Result<MlpParams> {
    init_params_with(config, &mut stream_rng(config.seed, Stream::Init))
}

/// He-initialised weights (std `sqrt(2 / fan_in)`) with zero biases.
pub fn init_params_with<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<MlpParams> {
    config.validate()?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in config.widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        weights.push(Tensor::matrix(fan_in, fan_out, data)?);
        biases.push(Tensor::zeros(&[fan_out]));
    }
    Ok(MlpParams { weights, biases })
}

impl MlpParams {
    pub fn from_parts(weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::dim(
                "mlp",
                format!("{} weight matrices vs {} biases", weights.len(), biases.len()),
            ));
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.shape().len() != 2 || b.shape() != [w.shape()[1]] {
                return Err(Error::dim(
                    "mlp",
                    format!("layer {l}: weight {:?} with bias {:?}", w.shape(), b.shape()),
                ));
            }
            if l > 0 && weights[l - 1].shape()[1] != w.shape()[0] {
                return Err(Error::dim(
                    "mlp",
                    format!(
                        "layer {l} input {} does not follow {:?}",
                        w.shape()[0],
                        weights[l - 1].shape()
                    ),
                ));
            }
        }
        Ok(Self { weights, biases })
    }

    /// All-zero parameters for the given widths.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        ModelConfig::new(widths.to_vec(), 0).validate()?;
        let weights = widths.windows(2).map(|w| Tensor::zeros(&[w[0], w[1]])).collect();
        let biases = widths.windows(2).map(|w| Tensor::zeros(&[w[1]])).collect();
        Ok(Self { weights, biases })
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].shape()[0]];
        w.extend(self.weights.iter().map(|t| t.shape()[1]));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.biases.last().map(|b| b.len()).unwrap_or(0)
    }

    /// Every tensor, weights then biases for each layer in order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.tensors().zip(other.tensors()).all(|(a, b)| a.shape() == b.shape()) && self.layers() == other.layers()
    }

    /// Parameters as gradient-tracking leaves.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundMlp<'_, 'g> {
        self.bind_with(graph, true)
    }

    /// Parameters as constants; gradients never flow into them.
    pub fn bind_const<'g>(&self, graph: &'g Graph) -> BoundMlp<'_, 'g> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&self, graph: &'g Graph, track: bool) -> BoundMlp<'_, 'g> {
        let leaf = |t: &Tensor| {
            if track {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        BoundMlp {
            params: self,
            graph,
            weights: self.weights.iter().map(leaf).collect(),
            biases: self.biases.iter().map(leaf).collect(),
        }
    }

    /// Flat little-endian parameter file.
    ///
    /// Layout: `NTPM`, format version (u32), layer count (u32), the
    /// `layers + 1` widths (u32), then for each layer its weights row-major
    /// followed by its biases, all f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers() as u32).to_le_bytes())?;
        for width in self.widths() {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
        for t in self.tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let layers = read_u32(&mut r)? as usize;
        if layers == 0 || layers > 1024 {
            return Err(Error::Format(format!("implausible layer count {layers}")));
        }
        let widths = (0..=layers)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if widths.contains(&0) {
            return Err(Error::Format(format!("zero width in {widths:?}")));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for pair in widths.windows(2) {
            weights.push(Tensor::matrix(pair[0], pair[1], read_f64s(&mut r, pair[0] * pair[1])?)?);
            biases.push(Tensor::vector(read_f64s(&mut r, pair[1])?)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        Self::from_parts(weights, biases)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated parameter file: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(r, &mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

/// [`MlpParams`] attached to one graph.
pub struct BoundMlp<'p, 'g> {
    params: &'p MlpParams,
    graph: &'g Graph,
    weights: Vec<Var<'g>>,
    biases: Vec<Var<'g>>,
}

impl<'p, 'g> BoundMlp<'p, 'g> {
    pub fn params(&self) -> &'p MlpParams {
        self.params
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Leaves in [`MlpParams::tensors`] order.
    pub fn leaves(&self) -> Vec<Var<'g>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }

    fn check_input(&self, x: &Var<'g>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.params.input_dim() {
            return Err(Error::dim(
                "predict",
                format!("input {shape:?} for model with input width {}", self.params.input_dim()),
            ));
        }
        Ok(())
    }

    /// Activations after `layer` affine maps; ReLU is applied except after
    /// the final layer, whose output is the logits. `layer == 0` is the input.
    pub fn activation(&self, x: Var<'g>, layer: usize) -> Result<Var<'g>> {
        self.check_input(&x)?;
        if layer > self.weights.len() {
            return Err(Error::Config(format!(
                "layer {layer} out of range for {} layers",
                self.weights.len()
            )));
        }
        let mut h = x;
        for l in 0..layer {
            h = h.matmul(self.weights[l])?.add_row(self.biases[l])?;
            if l + 1 < self.weights.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn logits(&self, x: Var<'g>) -> Result<Var<'g>> {
        self.activation(x, self.weights.len())
    }

    pub fn probs(&self, x: Var<'g>) -> Result<Var<'g>> {
        self.logits(x)?.softmax()
    }

    /// Collects the gradients of the bound leaves into parameter layout.
    pub fn gradients(&self, grads: &GradientMap) -> Result<MlpParams> {
        let pick = |v: &Var<'g>| grads.of(v).cloned().ok_or(Error::MissingLeaf(v.id().0));
        MlpParams::from_parts(
            self.weights.iter().map(pick).collect::<Result<_>>()?,
            self.biases.iter().map(pick).collect::<Result<_>>()?,
        )
    }
}

/// Class probabilities for each row of `x`.
pub fn predict_proba(params: &MlpParams, x: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let model = params.bind_const(&g);
    let p = model.probs(g.constant(x.clone()))?;
    Ok((*p.value()).clone())
}

/// Activations at `layer` for each row of `x`; see [`BoundMlp::activation`].
pub fn activations(params: &MlpParams, x: &Tensor, layer: usize) -> Result<Tensor> {
    let g = Graph::new();
    let model = params.bind_const(&g);
    let h = model.activation(g.constant(x.clone()), layer)?;
    Ok((*h.value()).clone())
}

/// `teacher' = decay · teacher + (1 − decay) · student`, elementwise.
pub fn ema_update(teacher: &MlpParams, student: &MlpParams, decay: f64) -> Result<MlpParams> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Config(format!("EMA decay {decay} outside [0, 1]")));
    }
    if !teacher.same_shape(student) {
        return Err(Error::dim(
            "ema_update",
            format!("teacher {:?} vs student {:?}", teacher.widths(), student.widths()),
        ));
    }
    let mut out = teacher.clone();
    for (t, s) in out.tensors_mut().zip(student.tensors()) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
    Ok(out)
}
