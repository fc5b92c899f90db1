//! MLP classifier: ReLU feature extractor followed by a linear latent
//! mapper into `ℝᴰ`, decided by `argmax_i z_i`.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_loss, TargetModel};

pub const DEFAULT_KEEP_PROB: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer, `y = x·W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    widths: Vec<usize>,
    layers: Vec<Dense>,
    keep_prob: f64,
    mode: Mode,
}

/// Layer parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub layers: Vec<(Var, Var)>,
}

impl BoundParams {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl MlpClassifier {
    /// Uniform `±1/√fan_in` weights, zero biases, from `seed`.
    pub fn new(widths: &[usize], keep_prob: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_init(widths, keep_prob, |fan_in, _| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.gen_range(-bound..=bound)
        })
    }

    pub fn zeros(widths: &[usize], keep_prob: f64) -> Result<Self> {
        Self::with_init(widths, keep_prob, |_, _| 0.0)
    }

    fn with_init(
        widths: &[usize],
        keep_prob: f64,
        mut init: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("an MLP needs at least an input and an output width"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config(format!("layer widths must be positive: {widths:?}")));
        }
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::config(format!("keep probability must be in (0, 1], got {keep_prob}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let data = (0..fan_in * fan_out).map(|_| init(fan_in, fan_out)).collect();
                Ok(Dense {
                    weight: Tensor::matrix(fan_in, fan_out, data)?,
                    bias: Tensor::zeros(&[fan_out]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            keep_prob,
            mode: Mode::Eval,
        })
    }

    pub fn from_layers(layers: Vec<Dense>, keep_prob: f64) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::config("an MLP needs at least one layer"))?;
        let mut widths = vec![first.fan_in()];
        for layer in &layers {
            if layer.fan_in() != *widths.last().expect("non-empty")
                || layer.bias.shape() != [layer.fan_out()]
            {
                return Err(Error::Dimension {
                    op: "layer chain",
                    lhs: widths.clone(),
                    rhs: layer.weight.shape().to_vec(),
                });
            }
            widths.push(layer.fan_out());
        }
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::config(format!("keep probability must be in (0, 1], got {keep_prob}")));
        }
        Ok(Self {
            widths,
            layers,
            keep_prob,
            mode: Mode::Eval,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn latent_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Records all weights and biases on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone(), trainable),
                        tape.leaf(l.bias.clone(), trainable),
                    )
                })
                .collect(),
        }
    }

    /// Latent batch `Z = H(X)`. Dropout (inverted, keep probability
    /// `keep_prob`) is applied after every hidden ReLU only in train mode,
    /// which requires `rng`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let dropout = self.mode == Mode::Train && self.keep_prob < 1.0;
        self.forward_impl(tape, params, x, rng, dropout)
    }

    /// Eval-mode forward pass (no dropout) regardless of `mode`.
    pub fn forward_eval(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        self.forward_impl(tape, params, x, None, false)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
        dropout: bool,
    ) -> Result<Var> {
        let xt = tape.value(x);
        if xt.rank() != 2 || xt.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "forward input width",
                lhs: xt.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        if dropout && rng.is_none() {
            return Err(Error::config("train-mode forward with dropout needs an rng"));
        }
        let last = params.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in params.layers.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add_row(lin, b)?;
            if i < last {
                h = tape.relu(h);
                if dropout {
                    let rng = rng.as_deref_mut().expect("checked above");
                    let shape = tape.value(h).shape().to_vec();
                    let scale = 1.0 / self.keep_prob;
                    let n: usize = shape.iter().product();
                    let mask: Vec<f64> = (0..n)
                        .map(|_| if rng.gen::<f64>() < self.keep_prob { scale } else { 0.0 })
                        .collect();
                    let mask = tape.constant(Tensor::new(shape, mask)?);
                    h = tape.mul(h, mask)?;
                }
            }
        }
        Ok(h)
    }

    /// Eval-mode latent outputs without recording gradients, in chunks of
    /// `chunk` rows.
    pub fn latent(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * self.latent_dim());
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < rows {
            let end = (start + chunk).min(rows);
            let idx: Vec<usize> = (start..end).collect();
            let mut tape = Tape::new();
            let params = self.bind(&mut tape, false);
            let xv = tape.constant(x.select_rows(&idx));
            let z = self.forward_impl(&mut tape, &params, xv, None, false)?;
            out.extend_from_slice(tape.value(z).data());
            start = end;
        }
        Tensor::matrix(rows, self.latent_dim(), out)
    }
}

/// Decision rule: `ŷ = argmax_i z_i` per row, lowest index on ties.
pub fn predict(z: &Tensor) -> Vec<usize> {
    if z.rank() == 1 {
        return z.max_index(0).unwrap_or_default();
    }
    z.max_index(1).unwrap_or_default()
}

/// Loss a white-box attack differentiates through the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateKind {
    /// Mean squared distance to the label's simplex centroid.
    Distance,
    /// Softmax cross-entropy with `z` as logits.
    #[default]
    LogitCe,
}

impl FromStr for SurrogateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(Self::Distance),
            "logit-ce" | "ce" => Ok(Self::LogitCe),
            other => Err(Error::config(format!(
                "unknown attack surrogate '{other}' (expected distance | logit-ce)"
            ))),
        }
    }
}

impl std::fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Distance => "distance",
            Self::LogitCe => "logit-ce",
        })
    }
}

/// Scalar loss of `z` against `labels` used to craft attacks.
pub fn attack_surrogate_loss(
    tape: &mut Tape,
    z: Var,
    labels: &[usize],
    kind: SurrogateKind,
    target: &TargetModel,
) -> Result<Var> {
    match kind {
        SurrogateKind::LogitCe => cross_entropy_loss(tape, z, labels),
        SurrogateKind::Distance => {
            let zt = tape.value(z);
            if zt.rank() != 2 || zt.rows() != labels.len() || zt.cols() != target.classes {
                return Err(Error::Dimension {
                    op: "distance surrogate",
                    lhs: zt.shape().to_vec(),
                    rhs: vec![labels.len(), target.classes],
                });
            }
            let mut centroids = Vec::with_capacity(labels.len() * target.classes);
            for &y in labels {
                if y >= target.classes {
                    return Err(Error::Data(format!("label {y} out of range")));
                }
                centroids.extend(target.centroid(y));
            }
            let c = tape.constant(Tensor::matrix(labels.len(), target.classes, centroids)?);
            let diff = tape.sub(z, c)?;
            let sq = tape.square(diff);
            let per_row = tape.sum(sq, 1)?;
            tape.mean(per_row, 0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Gccs,
    CrossEntropy,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gccs" => Ok(Self::Gccs),
            "cross-entropy" | "ce" => Ok(Self::CrossEntropy),
            other => Err(Error::config(format!(
                "unknown loss '{other}' (expected gccs | cross-entropy)"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gccs => "gccs",
            Self::CrossEntropy => "cross-entropy",
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GCCSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Persisted model state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpClassifier,
    pub target: TargetModel,
    pub epoch: usize,
    pub loss: LossKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    widths: Vec<usize>,
    keep_prob: f64,
    target: TargetModel,
    epoch: usize,
    loss: LossKind,
    /// One entry per stored array, in payload order.
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Container layout: 8-byte magic, `u32` LE format version, `u64` LE
    /// header length, UTF-8 JSON header, then every array as `f64` LE in
    /// header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        for (i, l) in self.model.layers.iter().enumerate() {
            arrays.push(ArrayEntry {
                name: format!("layer{i}.weight"),
                shape: l.weight.shape().to_vec(),
            });
            arrays.push(ArrayEntry {
                name: format!("layer{i}.bias"),
                shape: l.bias.shape().to_vec(),
            });
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            widths: self.model.widths.clone(),
            keep_prob: self.model.keep_prob,
            target: self.target,
            epoch: self.epoch,
            loss: self.loss,
            arrays,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for l in &self.model.layers {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: &str| Error::Parse {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(parse(0, "not a GCCS checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(parse(8, &format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse(12, "header length exceeds file size"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..hend])
            .map_err(|e| parse(20, &format!("invalid header: {e}")))?;
        let mut offset = hend;
        let mut read_array = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > bytes.len() {
                return Err(parse(offset, "truncated array payload"));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset = end;
            Tensor::new(shape.to_vec(), data)
        };
        if header.arrays.len() != 2 * (header.widths.len().saturating_sub(1)) {
            return Err(parse(20, "array table does not match layer widths"));
        }
        let mut layers = Vec::new();
        for pair in header.arrays.chunks(2) {
            let weight = read_array(&pair[0].shape)?;
            let bias = read_array(&pair[1].shape)?;
            layers.push(Dense { weight, bias });
        }
        if offset != bytes.len() {
            return Err(parse(offset, "trailing bytes after payload"));
        }
        let model = MlpClassifier::from_layers(layers, header.keep_prob)?;
        if model.widths != header.widths {
            return Err(parse(20, "array shapes disagree with layer widths"));
        }
        Ok(Self {
            model,
            target: header.target,
            epoch: header.epoch,
            loss: header.loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
