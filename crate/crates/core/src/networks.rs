//! Fully connected networks with an optional scalar time input.
//!
//! Both the generator `rho(z, t)` and the potential `phi(x, t)` are plain
//! tanh MLPs: `t` is appended as the last input column, every hidden layer
//! is `tanh(h W + b)`, and the last layer is affine (or squashed through a
//! sigmoid for pixel data). Tanh keeps input-gradients smooth, which the
//! loss needs because it differentiates `phi` with respect to its inputs.

use std::fs;
use std::io::Write;
use std::path::Path;

use mfgan_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CheckpointError, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFGGAN1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputHead {
    #[default]
    Affine,
    /// `sigmoid(a) = (tanh(a/2) + 1)/2`, mapping into (0, 1).
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    /// When set the network sees `input_dim + 1` columns, `t` last.
    pub time_augmented: bool,
    pub head: OutputHead,
}

impl MlpSpec {
    /// `rho(z, t)`: noise of the data dimension in, a data point out.
    pub fn generator(data_dim: usize, hidden_dims: Vec<usize>) -> Self {
        Self {
            input_dim: data_dim,
            hidden_dims,
            output_dim: data_dim,
            time_augmented: true,
            head: OutputHead::Affine,
        }
    }

    /// `phi(x, t)`: a scalar potential over space-time.
    pub fn discriminator(data_dim: usize, hidden_dims: Vec<usize>) -> Self {
        Self {
            input_dim: data_dim,
            hidden_dims,
            output_dim: 1,
            time_augmented: true,
            head: OutputHead::Affine,
        }
    }

    pub fn with_head(mut self, head: OutputHead) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidSpec("input and output dims must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidSpec("at least one hidden layer is required".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidSpec("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Columns actually fed to the first layer.
    pub fn effective_input(&self) -> usize {
        self.input_dim + usize::from(self.time_augmented)
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.effective_input();
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// The checkpoint header form, `dims=in,h1,..,out;time=0|1`.
    pub fn describe(&self) -> String {
        let dims: Vec<String> = std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .map(|d| d.to_string())
            .collect();
        format!(
            "dims={};time={}",
            dims.join(","),
            u8::from(self.time_augmented)
        )
    }
}

/// Weights and biases in layer order: `W0, b0, W1, b1, ...`.
///
/// `W` is `fan_in x fan_out`, `b` is `1 x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    /// Xavier-uniform weights, zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            tensors.push(Tensor::matrix(fan_in, fan_out, w)?);
            tensors.push(Tensor::zeros(vec![1, fan_out]));
        }
        Ok(Self { tensors })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let tensors = spec
            .layer_dims()
            .into_iter()
            .flat_map(|(i, o)| [Tensor::zeros(vec![i, o]), Tensor::zeros(vec![1, o])])
            .collect();
        Ok(Self { tensors })
    }

    pub fn from_tensors(spec: &MlpSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let expected = Self::zeros(spec)?;
        if expected.tensors.len() != tensors.len()
            || expected
                .tensors
                .iter()
                .zip(&tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidSpec(
                "parameter tensors do not match the network layout".into(),
            ));
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn layers(&self) -> usize {
        self.tensors.len() / 2
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer + 1]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.tensors[2 * layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.tensors[2 * layer + 1]
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(spec: &MlpSpec, flat: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        if flat.len() != params.len() {
            return Err(Error::Dimension {
                context: "unflatten",
                expected: params.len(),
                found: flat.len(),
            });
        }
        let mut offset = 0;
        for t in &mut params.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bits_eq(b))
    }

    /// Places the parameters on a tape. Trainable ones become marked
    /// variables; the rest are constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

/// A network whose parameters live on a particular tape.
#[derive(Debug, Clone)]
pub struct Mlp<'a> {
    pub spec: &'a MlpSpec,
    pub params: Vec<Var>,
}

impl<'a> Mlp<'a> {
    pub fn on_tape(spec: &'a MlpSpec, params: &ParamSet, tape: &mut Tape, trainable: bool) -> Self {
        Self {
            spec,
            params: params.register(tape, trainable),
        }
    }

    /// Evaluates the network on a batch `x` (`n x input_dim`) with times
    /// `t` (`n x 1`, required iff the spec is time-augmented).
    pub fn forward(&self, tape: &mut Tape, x: Var, t: Option<Var>) -> Result<Var> {
        let spec = self.spec;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::Precondition(format!(
                "network input must be a batch matrix, got shape {xs:?}"
            )));
        }
        if xs[1] != spec.input_dim {
            return Err(Error::Dimension {
                context: "network input",
                expected: spec.input_dim,
                found: xs[1],
            });
        }
        let n = xs[0];
        let input = match (spec.time_augmented, t) {
            (true, Some(t)) => {
                let ts = tape.shape(t).to_vec();
                if ts != [n, 1] {
                    return Err(Error::Precondition(format!(
                        "time input must be {n}x1, got {ts:?}"
                    )));
                }
                if let Some(bad) = tape.value(t).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::Precondition(format!("time {bad} outside [0, 1]")));
                }
                tape.concat_last(&[x, t])?
            }
            (true, None) => {
                return Err(Error::Precondition("time-augmented network needs t".into()))
            }
            (false, Some(_)) => {
                return Err(Error::Precondition("network takes no time input".into()))
            }
            (false, None) => x,
        };

        let layers = self.params.len() / 2;
        let ones = tape.constant(Tensor::ones(vec![n, 1]));
        let mut h = input;
        for layer in 0..layers {
            let w = self.params[2 * layer];
            let b = self.params[2 * layer + 1];
            let a = tape.matmul(h, w)?;
            let bias = tape.matmul(ones, b)?;
            h = tape.add(a, bias)?;
            if layer + 1 < layers {
                h = tape.tanh(h)?;
            }
        }
        if spec.head == OutputHead::Sigmoid {
            let half = tape.scale(h, 0.5)?;
            let th = tape.tanh(half)?;
            let th = tape.scale(th, 0.5)?;
            let shift = tape.scalar(0.5);
            h = tape.add(th, shift)?;
        }
        Ok(h)
    }
}

/// Runs a network on plain tensors without keeping a graph.
pub fn evaluate(spec: &MlpSpec, params: &ParamSet, x: &Tensor, t: Option<&Tensor>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let net = Mlp::on_tape(spec, params, &mut tape, false);
    let xv = tape.constant(x.clone());
    let tv = t.map(|t| tape.constant(t.clone()));
    let out = net.forward(&mut tape, xv, tv)?;
    Ok(tape.value(out).clone())
}

/// Writes `MFGGAN1\0`, a `dims=..;time=..;count=..` header line, then the
/// flattened parameters as little-endian `f64`.
pub fn save_checkpoint(spec: &MlpSpec, params: &ParamSet, path: &Path) -> Result<()> {
    let flat = params.flatten();
    if flat.len() != spec.param_count() {
        return Err(Error::Dimension {
            context: "checkpoint parameters",
            expected: spec.param_count(),
            found: flat.len(),
        });
    }
    let mut bytes = Vec::with_capacity(64 + 8 * flat.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    writeln!(bytes, "{};count={}", spec.describe(), flat.len()).expect("write to Vec");
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, returning the network shape it declares (with an
/// affine head) and its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(MlpSpec, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

/// Like [`load_checkpoint`] but insists the file matches `spec`.
pub fn load_checkpoint_for(spec: &MlpSpec, path: &Path) -> Result<ParamSet> {
    let (found, params) = load_checkpoint(path)?;
    if found.describe() != spec.describe() {
        return Err(CheckpointError::SpecMismatch {
            expected: spec.describe(),
            found: found.describe(),
        }
        .into());
    }
    Ok(params)
}

fn parse_checkpoint(bytes: &[u8]) -> Result<(MlpSpec, ParamSet)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::MalformedHeader("no header line".into()))?;
    let header = std::str::from_utf8(&rest[..newline])
        .map_err(|_| CheckpointError::MalformedHeader("header is not UTF-8".into()))?;
    let (spec, count) = parse_header(header)?;
    let payload = &rest[newline + 1..];
    if payload.len() != 8 * count {
        return Err(CheckpointError::Truncated {
            expected: 8 * count,
            found: payload.len(),
        }
        .into());
    }
    if count != spec.param_count() {
        return Err(CheckpointError::SpecMismatch {
            expected: format!("{} parameters for {}", spec.param_count(), spec.describe()),
            found: format!("count={count}"),
        }
        .into());
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = ParamSet::unflatten(&spec, &flat)?;
    Ok((spec, params))
}

fn parse_header(header: &str) -> std::result::Result<(MlpSpec, usize), CheckpointError> {
    let bad = |msg: &str| CheckpointError::MalformedHeader(format!("{msg}: `{header}`"));
    let mut dims = None;
    let mut time = None;
    let mut count = None;
    for field in header.split(';') {
        let (key, value) = field.split_once('=').ok_or_else(|| bad("field without `=`"))?;
        match key {
            "dims" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(str::parse).collect();
                dims = Some(parsed.map_err(|_| bad("bad dims"))?);
            }
            "time" => {
                time = Some(match value {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad("time must be 0 or 1")),
                })
            }
            "count" => count = Some(value.parse().map_err(|_| bad("bad count"))?),
            _ => return Err(bad("unknown field")),
        }
    }
    let (dims, time, count) = match (dims, time, count) {
        (Some(d), Some(t), Some(c)) => (d, t, c),
        _ => return Err(bad("missing field")),
    };
    if dims.len() < 3 {
        return Err(bad("need input, at least one hidden width, and output"));
    }
    let spec = MlpSpec {
        input_dim: dims[0],
        hidden_dims: dims[1..dims.len() - 1].to_vec(),
        output_dim: dims[dims.len() - 1],
        time_augmented: time,
        head: OutputHead::Affine,
    };
    spec.validate().map_err(|e| bad(&e.to_string()))?;
    Ok((spec, count))
}
