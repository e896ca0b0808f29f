//! MLP classifier exposing the three quantities the losses need: logits,
//! penultimate features, and the final fully connected weight rows.
//!
//! Architecture: `input -> [linear + relu]* -> features -> linear -> logits`.
//! Penultimate features are post-activation. Weight matrices are stored
//! `out x in`, so the final layer's rows are exactly the per-class weight
//! vectors `w_1..w_C`. The final bias exists for classification but is
//! excluded from every weight-based loss and metric, which only ever read
//! the rows of `W`.
//!
//! The feature dimension must strictly exceed the class count: the
//! orthogonality loss needs a nonempty orthogonal complement of
//! `span(w_1..w_C)` to push outlier features into.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{Rng, RngState};
use crate::tensor::{kernels, Tape, Tensor, TensorId, NORM_EPS};

/// Stream id for weight initialization draws (see [`Rng::with_stream`]).
pub const STREAM_INIT: u64 = 2;

const CHECKPOINT_MAGIC: &[u8; 8] = b"NCOODCP1";
const CHECKPOINT_VERSION: u32 = 1;

/// One dense layer, weight `out x in`, bias `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// MLP classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    dims: Vec<usize>,
    n_classes: usize,
    hidden: Vec<Linear>,
    fc: Linear,
}

impl Model {
    /// Fresh model with fan-in-scaled uniform weights
    /// (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))`) and zero biases, drawn
    /// deterministically from `seed` on the init stream.
    ///
    /// `layer_dims` lists the input width, the hidden widths, and the
    /// feature width last; the classification layer `d_feat -> n_classes`
    /// is appended implicitly.
    pub fn init(layer_dims: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "layer_dims needs at least input and feature widths, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive, got {layer_dims:?}"
            )));
        }
        if n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        let d_feat = *layer_dims.last().expect("nonempty dims");
        if d_feat <= n_classes {
            return Err(Error::Config(format!(
                "feature dim {d_feat} must exceed class count {n_classes} so the \
                 class-weight span has a nonempty orthogonal complement"
            )));
        }
        let mut rng = Rng::with_stream(seed, STREAM_INIT);
        let mut layer = |fan_in: usize, fan_out: usize| -> Linear {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| (2.0 * rng.next_f64() - 1.0) * bound)
                .collect();
            Linear {
                weight: Tensor::matrix(fan_out, fan_in, data).expect("layer shape"),
                bias: Tensor::vector(vec![0.0; fan_out]),
            }
        };
        let hidden: Vec<Linear> = layer_dims
            .windows(2)
            .map(|w| layer(w[0], w[1]))
            .collect();
        let fc = layer(d_feat, n_classes);
        Ok(Model {
            dims: layer_dims.to_vec(),
            n_classes,
            hidden,
            fc,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.dims.last().expect("nonempty dims")
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    /// Final fully connected weight, one row per class.
    pub fn class_weights(&self) -> &Tensor {
        &self.fc.weight
    }

    /// Row-normalized class weights plus indices of degenerate (zero-norm)
    /// rows, which stay zero.
    pub fn normalized_class_weights(&self) -> (Tensor, Vec<usize>) {
        let w = &self.fc.weight;
        let (c, d) = (w.rows(), w.cols());
        let mut data = w.data().to_vec();
        let mut degenerate = Vec::new();
        for (i, row) in data.chunks_mut(d).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= NORM_EPS {
                degenerate.push(i);
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        (
            Tensor::matrix(c, d, data).expect("normalized weights"),
            degenerate,
        )
    }

    /// Plain forward pass: `(logits n x C, features n x d_feat)`.
    /// Bit-identical to the tape forward for the same input.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "forward: input width {} does not match model input dim {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let n = x.rows();
        let mut h = x.data().to_vec();
        let mut width = x.cols();
        for layer in &self.hidden {
            let out = layer.weight.rows();
            let mut z = kernels::matmul_nt(&h, layer.weight.data(), n, width, out);
            for row in z.chunks_mut(out) {
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    *v = (*v + b).max(0.0);
                }
            }
            h = z;
            width = out;
        }
        let features = Tensor::matrix(n, width, h.clone())?;
        let mut logits = kernels::matmul_nt(&h, self.fc.weight.data(), n, width, self.n_classes);
        for row in logits.chunks_mut(self.n_classes) {
            for (v, b) in row.iter_mut().zip(self.fc.bias.data()) {
                *v += b;
            }
        }
        Ok((Tensor::matrix(n, self.n_classes, logits)?, features))
    }

    /// Argmax class per row of a logits matrix.
    pub fn predict(logits: &Tensor) -> Vec<usize> {
        (0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Parameters in checkpoint order: each hidden layer's weight then
    /// bias, then the final layer's weight and bias.
    pub fn parameter_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * (self.hidden.len() + 1));
        for layer in &self.hidden {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
        out.push(self.fc.weight.clone());
        out.push(self.fc.bias.clone());
        out
    }

    /// Mutable views over the same parameters in the same order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * (self.hidden.len() + 1));
        for layer in &mut self.hidden {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameter_tensors().iter().map(Tensor::numel).sum()
    }

    /// Binds the current parameters onto `tape` as gradient leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let ids: Vec<TensorId> = self
            .parameter_tensors()
            .into_iter()
            .map(|t| tape.leaf(t.with_grad()))
            .collect();
        self.bind_params(tape, &ids).expect("own parameter list")
    }

    /// Binds from caller-inserted leaves (in `parameter_tensors` order).
    pub fn bind_params(&self, _tape: &Tape, ids: &[TensorId]) -> Result<BoundModel> {
        let expect = 2 * (self.hidden.len() + 1);
        if ids.len() != expect {
            return Err(Error::Shape(format!(
                "bind_params: {} ids for {expect} parameters",
                ids.len()
            )));
        }
        let layers: Vec<(TensorId, TensorId)> = ids[..ids.len() - 2]
            .chunks(2)
            .map(|p| (p[0], p[1]))
            .collect();
        Ok(BoundModel {
            layers,
            fc_weight: ids[ids.len() - 2],
            fc_bias: ids[ids.len() - 1],
            param_ids: ids.to_vec(),
        })
    }
}

/// A model's parameters as tape leaves, ready for a differentiable forward.
#[derive(Debug, Clone)]
pub struct BoundModel {
    layers: Vec<(TensorId, TensorId)>,
    pub fc_weight: TensorId,
    pub fc_bias: TensorId,
    param_ids: Vec<TensorId>,
}

impl BoundModel {
    /// Differentiable forward: `(logits, features)`.
    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<(TensorId, TensorId)> {
        let mut h = x;
        for &(w, b) in &self.layers {
            let wt = tape.transpose(w);
            let z = tape.matmul(h, wt)?;
            let zb = tape.add_bias(z, b)?;
            h = tape.relu(zb);
        }
        let features = h;
        let wt = tape.transpose(self.fc_weight);
        let z = tape.matmul(features, wt)?;
        let logits = tape.add_bias(z, self.fc_bias)?;
        Ok((logits, features))
    }

    /// Leaf ids in `parameter_tensors` order.
    pub fn param_ids(&self) -> &[TensorId] {
        &self.param_ids
    }
}

/// Training-progress metadata stored alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    /// 0 = not mid-training, 1/2 = stage at save time.
    pub stage: u8,
    /// Next epoch index to run.
    pub epoch: u64,
    /// Fingerprint of the training configuration that produced this file.
    pub config_hash: u64,
    pub rng: RngState,
    /// Optimizer velocity in parameter order; empty when not mid-training.
    pub velocity: Vec<f64>,
}

impl TrainMeta {
    /// Metadata for a model saved outside any training run.
    pub fn fresh() -> Self {
        TrainMeta {
            stage: 0,
            epoch: 0,
            config_hash: 0,
            rng: Rng::seed_from(0).state(),
            velocity: Vec::new(),
        }
    }
}

/// Serializes the model bit-exactly: magic, version, layer dims, class
/// count, stage marker, epoch, config hash, rng state, then the flat f64
/// little-endian parameter payload and optimizer velocity.
pub fn save_checkpoint(model: &Model, meta: &TrainMeta, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.dims.len() as u32).to_le_bytes());
    for &d in &model.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(model.n_classes as u32).to_le_bytes());
    buf.push(meta.stage);
    buf.extend_from_slice(&meta.epoch.to_le_bytes());
    buf.extend_from_slice(&meta.config_hash.to_le_bytes());
    buf.extend_from_slice(&meta.rng.seed);
    buf.extend_from_slice(&meta.rng.stream.to_le_bytes());
    buf.extend_from_slice(&meta.rng.word_pos.to_le_bytes());

    let params = model.parameter_tensors();
    let n_params: usize = params.iter().map(Tensor::numel).sum();
    buf.extend_from_slice(&(n_params as u64).to_le_bytes());
    for t in &params {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if !meta.velocity.is_empty() && meta.velocity.len() != n_params {
        return Err(Error::Checkpoint(format!(
            "velocity length {} does not match parameter count {n_params}",
            meta.velocity.len()
        )));
    }
    buf.extend_from_slice(&(meta.velocity.len() as u64).to_le_bytes());
    for v in &meta.velocity {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated payload: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainMeta)> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &raw, pos: 0 };

    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let n_dims = r.u32()? as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(Error::Checkpoint(format!("implausible dim count {n_dims}")));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(r.u32()? as usize);
    }
    let n_classes = r.u32()? as usize;
    let stage = r.u8()?;
    let epoch = r.u64()?;
    let config_hash = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;

    // Rebuild through init so every structural invariant is re-validated,
    // then overwrite the parameters with the stored payload.
    let mut model = Model::init(&dims, n_classes, 0)
        .map_err(|e| Error::Checkpoint(format!("invalid stored dims: {e}")))?;
    let expected: usize = model.param_count();
    let n_params = r.u64()? as usize;
    if n_params != expected {
        return Err(Error::Checkpoint(format!(
            "parameter count {n_params} does not match dims (expected {expected})"
        )));
    }
    let flat = r.f64s(n_params)?;
    let mut offset = 0;
    for t in model.parameters_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }

    let n_vel = r.u64()? as usize;
    if n_vel != 0 && n_vel != n_params {
        return Err(Error::Checkpoint(format!(
            "velocity count {n_vel} does not match parameter count {n_params}"
        )));
    }
    let velocity = r.f64s(n_vel)?;
    if r.pos != raw.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            raw.len() - r.pos
        )));
    }

    Ok((
        model,
        TrainMeta {
            stage,
            epoch,
            config_hash,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            velocity,
        },
    ))
}
