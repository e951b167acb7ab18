//! Small configurable networks: conv backbone + dense classifier head,
//! layer freezing, head reinitialization, checkpoint persistence, weight
//! ensembling, and gradient-weighted class activation maps.

use crate::autodiff::{
    conv2d_raw, global_avg_pool_raw, matmul_raw, relu_raw, AutodiffError, Tape, Tensor, TensorId,
};
use crate::rng::derive_seed;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const CHECKPOINT_MAGIC: &[u8; 8] = b"STCK0001";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("duplicate layer name: {0}")]
    DuplicateLayerName(String),
    #[error("unknown layer: {0}")]
    UnknownLayer(String),
    #[error("layer {0} has no parameters")]
    NotParametric(String),
    #[error("layer {layer}: {detail}")]
    BadShape { layer: String, detail: String },
    #[error("network spec has no parametric layers")]
    NoParametricLayers,
    #[error("final classifier fan-out {fan_out} does not match {classes} classes")]
    FinalFanOutMismatch { fan_out: usize, classes: usize },
    #[error("input shape {got:?} does not match network input {expected:?}")]
    InputShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("{name} is not a conv layer; conv layers are: {conv_layers:?}")]
    NonConvLayer { name: String, conv_layers: Vec<String> },
    #[error("unrecognized checkpoint: bad magic")]
    CheckpointMagic,
    #[error("malformed checkpoint: {0}")]
    CheckpointMalformed(String),
    #[error("checkpoint is missing layer {0}")]
    CheckpointMissingLayer(String),
    #[error("checkpoint has unknown layer {0}")]
    CheckpointUnknownLayer(String),
    #[error("layer {layer}: checkpoint shape {got:?} does not match network shape {expected:?}")]
    CheckpointShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("ensemble needs at least 2 checkpoints, got {0}")]
    EnsembleTooFew(usize),
    #[error("ensemble checkpoints disagree on layer {0}")]
    EnsembleLayerMismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Layer descriptor; parametric kinds are `Conv` and `Dense`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    Relu,
    GlobalAvgPool,
    Flatten,
    Dense { fan_in: usize, fan_out: usize },
}

impl LayerKind {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    /// Receiving-unit count used for init scaling, and the output width used
    /// for the final-classifier check.
    fn fan_in(&self) -> Option<usize> {
        match self {
            LayerKind::Conv {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => Some(in_channels * kernel_h * kernel_w),
            LayerKind::Dense { fan_in, .. } => Some(*fan_in),
            _ => None,
        }
    }

    fn fan_out(&self) -> Option<usize> {
        match self {
            LayerKind::Conv { out_channels, .. } => Some(*out_channels),
            LayerKind::Dense { fan_out, .. } => Some(*fan_out),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    /// Input shape (channels, height, width).
    pub input: (usize, usize, usize),
}

impl NetworkSpec {
    /// The default desk-scale architecture:
    /// conv(1->8, 3x3) -> relu -> conv(8->8, 3x3) -> relu -> gap -> dense("fc").
    pub fn default_desk(num_classes: usize, h: usize, w: usize) -> Self {
        let conv = |name: &str, cin: usize, cout: usize| LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv {
                in_channels: cin,
                out_channels: cout,
                kernel_h: 3,
                kernel_w: 3,
            },
        };
        NetworkSpec {
            layers: vec![
                conv("conv1", 1, 8),
                LayerSpec {
                    name: "relu1".into(),
                    kind: LayerKind::Relu,
                },
                conv("conv2", 8, 8),
                LayerSpec {
                    name: "relu2".into(),
                    kind: LayerKind::Relu,
                },
                LayerSpec {
                    name: "gap".into(),
                    kind: LayerKind::GlobalAvgPool,
                },
                LayerSpec {
                    name: "fc".into(),
                    kind: LayerKind::Dense {
                        fan_in: 8,
                        fan_out: num_classes,
                    },
                },
            ],
            num_classes,
            input: (1, h, w),
        }
    }

    /// Shape inference through all layers; errors on dangling shapes.
    /// Returns the output shape of each layer.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let mut names = std::collections::HashSet::new();
        for layer in &self.layers {
            if !names.insert(layer.name.as_str()) {
                return Err(ModelError::DuplicateLayerName(layer.name.clone()));
            }
        }
        let mut shape = vec![self.input.0, self.input.1, self.input.2];
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let bad = |detail: String| ModelError::BadShape {
                layer: layer.name.clone(),
                detail,
            };
            shape = match &layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => {
                    if shape.len() != 3 || shape[0] != *in_channels {
                        return Err(bad(format!(
                            "expects {in_channels} input channels, got shape {shape:?}"
                        )));
                    }
                    if *kernel_h > shape[1] || *kernel_w > shape[2] {
                        return Err(bad(format!(
                            "kernel {kernel_h}x{kernel_w} larger than input {}x{}",
                            shape[1], shape[2]
                        )));
                    }
                    vec![
                        *out_channels,
                        shape[1] - kernel_h + 1,
                        shape[2] - kernel_w + 1,
                    ]
                }
                LayerKind::Relu => shape,
                LayerKind::GlobalAvgPool => {
                    if shape.len() != 3 {
                        return Err(bad(format!("expects a [c,h,w] input, got {shape:?}")));
                    }
                    vec![shape[0]]
                }
                LayerKind::Flatten => vec![shape.iter().product()],
                LayerKind::Dense { fan_in, fan_out } => {
                    if shape.len() != 1 || shape[0] != *fan_in {
                        return Err(bad(format!(
                            "expects a rank-1 input of {fan_in}, got {shape:?}"
                        )));
                    }
                    vec![*fan_out]
                }
            };
            shapes.push(shape.clone());
        }
        let last = shapes.last().ok_or(ModelError::NoParametricLayers)?;
        if last != &vec![self.num_classes] {
            return Err(ModelError::BadShape {
                layer: "<output>".into(),
                detail: format!(
                    "network produces {last:?}, expected [{}] logits",
                    self.num_classes
                ),
            });
        }
        let final_idx = self
            .final_classifier_index()
            .ok_or(ModelError::NoParametricLayers)?;
        let fan_out = self.layers[final_idx].kind.fan_out().unwrap();
        if fan_out != self.num_classes {
            return Err(ModelError::FinalFanOutMismatch {
                fan_out,
                classes: self.num_classes,
            });
        }
        Ok(shapes)
    }

    /// Index of the designated final classifier: the last parametric layer.
    pub fn final_classifier_index(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.kind.is_parametric())
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn conv_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.name.clone())
            .collect()
    }

    /// Name of the last conv layer (the default Grad-CAM tap).
    pub fn last_conv_layer(&self) -> Option<String> {
        self.layers
            .iter()
            .rev()
            .find(|l| matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.name.clone())
    }
}

struct LayerState {
    params: Vec<Tensor>,
    trainable: bool,
}

/// A built network: spec plus parameter tensors and per-layer trainable flags.
pub struct Network {
    spec: NetworkSpec,
    states: Vec<LayerState>,
}

/// Fan-in-scaled Gaussian init: weights ~ N(0, 2/fan_in), biases zero.
fn init_layer_params(kind: &LayerKind, stream_seed: u64) -> Vec<Tensor> {
    let scale = (2.0 / kind.fan_in().expect("parametric layer") as f64).sqrt();
    match kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
        } => vec![
            Tensor::randn(
                vec![*out_channels, *in_channels, *kernel_h, *kernel_w],
                stream_seed,
                scale,
            )
            .expect("valid conv shape")
            .with_grad(),
            Tensor::zeros(vec![*out_channels]).unwrap().with_grad(),
        ],
        LayerKind::Dense { fan_in, fan_out } => vec![
            Tensor::randn(vec![*fan_in, *fan_out], stream_seed, scale)
                .expect("valid dense shape")
                .with_grad(),
            Tensor::zeros(vec![*fan_out]).unwrap().with_grad(),
        ],
        _ => unreachable!("init_layer_params on non-parametric layer"),
    }
}

/// Parameter bindings of one tape forward pass: one id per parameter tensor,
/// indexed like the network's layers (empty for non-parametric layers).
pub struct ParamBinding {
    pub ids: Vec<Vec<TensorId>>,
}

/// Outputs of one traced forward pass.
pub struct TraceOutputs {
    pub logits: TensorId,
    /// Output node of every layer, in layer order.
    pub layer_outputs: Vec<TensorId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGrad {
    /// Gradients only for layers currently marked trainable.
    Trainable,
    /// Gradients for every parameter (introspection passes).
    All,
}

impl Network {
    /// Builds and initializes a network. Layer `i` draws its parameters from
    /// the sub-seed `derive_seed(seed, i)`, so identical (spec, seed) pairs
    /// give bit-identical parameters.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self, ModelError> {
        spec.infer_shapes()?;
        let states = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| LayerState {
                params: if layer.kind.is_parametric() {
                    init_layer_params(&layer.kind, derive_seed(seed, i as u64))
                } else {
                    Vec::new()
                },
                trainable: true,
            })
            .collect();
        Ok(Network { spec, states })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.spec.input.0, self.spec.input.1, self.spec.input.2]
    }

    pub fn final_classifier_name(&self) -> &str {
        let idx = self
            .spec
            .final_classifier_index()
            .expect("validated spec has a parametric layer");
        &self.spec.layers[idx].name
    }

    pub fn layer_params(&self, name: &str) -> Option<&[Tensor]> {
        let idx = self.spec.layer_index(name)?;
        Some(&self.states[idx].params)
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        let idx = self.spec.layer_index(name)?;
        Some(self.states[idx].trainable)
    }

    fn parametric_index(&self, name: &str) -> Result<usize, ModelError> {
        let idx = self
            .spec
            .layer_index(name)
            .ok_or_else(|| ModelError::UnknownLayer(name.to_string()))?;
        if !self.spec.layers[idx].kind.is_parametric() {
            return Err(ModelError::NotParametric(name.to_string()));
        }
        Ok(idx)
    }

    /// Marks only `layer_name` trainable.
    pub fn freeze_all_except(&mut self, layer_name: &str) -> Result<(), ModelError> {
        let keep = self.parametric_index(layer_name)?;
        for (i, state) in self.states.iter_mut().enumerate() {
            state.trainable = i == keep;
        }
        Ok(())
    }

    pub fn set_all_trainable(&mut self) {
        for state in &mut self.states {
            state.trainable = true;
        }
    }

    /// Redraws one layer's parameters with the build-time init rule from the
    /// given seed. Other layers are untouched.
    pub fn reinit_layer(&mut self, layer_name: &str, seed: u64) -> Result<(), ModelError> {
        let idx = self.parametric_index(layer_name)?;
        self.states[idx].params = init_layer_params(&self.spec.layers[idx].kind, seed);
        Ok(())
    }

    /// Plain forward pass (no tape): returns the logits.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<f64>, ModelError> {
        if image.shape() != self.input_shape().as_slice() {
            return Err(ModelError::InputShapeMismatch {
                expected: self.input_shape(),
                got: image.shape().to_vec(),
            });
        }
        let mut values = image.values().to_vec();
        let mut shape = self.input_shape();
        for (layer, state) in self.spec.layers.iter().zip(&self.states) {
            match &layer.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => {
                    values = conv2d_raw(
                        &values,
                        *in_channels,
                        shape[1],
                        shape[2],
                        state.params[0].values(),
                        *out_channels,
                        *kernel_h,
                        *kernel_w,
                        state.params[1].values(),
                    );
                    shape = vec![
                        *out_channels,
                        shape[1] - kernel_h + 1,
                        shape[2] - kernel_w + 1,
                    ];
                }
                LayerKind::Relu => values = relu_raw(&values),
                LayerKind::GlobalAvgPool => {
                    values = global_avg_pool_raw(&values, shape[0], shape[1], shape[2]);
                    shape = vec![shape[0]];
                }
                LayerKind::Flatten => shape = vec![values.len()],
                LayerKind::Dense { fan_in, fan_out } => {
                    let mut out = matmul_raw(&values, state.params[0].values(), 1, *fan_in, *fan_out);
                    for (o, b) in out.iter_mut().zip(state.params[1].values()) {
                        *o += b;
                    }
                    values = out;
                    shape = vec![*fan_out];
                }
            }
        }
        Ok(values)
    }

    /// Predicted class: argmax of the logits, lowest index on ties.
    pub fn predict(&self, image: &Tensor) -> Result<usize, ModelError> {
        let logits = self.forward(image)?;
        Ok(argmax(&logits))
    }

    /// Inserts every parameter tensor as a tape leaf. Bind once per tape and
    /// share the binding across the samples of a batch so their gradient
    /// contributions accumulate on the same nodes.
    pub fn bind_params(&self, tape: &mut Tape, mode: ParamGrad) -> ParamBinding {
        let ids = self
            .states
            .iter()
            .map(|state| {
                state
                    .params
                    .iter()
                    .map(|p| {
                        let mut tensor = p.clone();
                        tensor.set_requires_grad(match mode {
                            ParamGrad::Trainable => state.trainable,
                            ParamGrad::All => true,
                        });
                        tape.leaf(tensor)
                    })
                    .collect()
            })
            .collect();
        ParamBinding { ids }
    }

    /// Traced forward pass against previously bound parameters.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        image: &Tensor,
    ) -> Result<TraceOutputs, ModelError> {
        if image.shape() != self.input_shape().as_slice() {
            return Err(ModelError::InputShapeMismatch {
                expected: self.input_shape(),
                got: image.shape().to_vec(),
            });
        }
        let mut current = tape.leaf(image.clone());
        let mut layer_outputs = Vec::with_capacity(self.spec.layers.len());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            current = match &layer.kind {
                LayerKind::Conv { .. } => {
                    tape.conv2d(current, binding.ids[i][0], binding.ids[i][1])?
                }
                LayerKind::Relu => tape.relu(current),
                LayerKind::GlobalAvgPool => tape.global_avg_pool(current)?,
                LayerKind::Flatten => tape.flatten(current),
                LayerKind::Dense { .. } => {
                    let prod = tape.matmul(current, binding.ids[i][0])?;
                    tape.add(prod, binding.ids[i][1])?
                }
            };
            layer_outputs.push(current);
        }
        Ok(TraceOutputs {
            logits: current,
            layer_outputs,
        })
    }

    /// Writes updated parameter values back from plain buffers (the training
    /// loop owns the update rule).
    pub fn set_layer_param_values(
        &mut self,
        layer_index: usize,
        tensor_index: usize,
        values: &[f64],
    ) {
        self.states[layer_index].params[tensor_index]
            .values_mut()
            .copy_from_slice(values);
    }

    pub fn param_values_mut(&mut self, layer_index: usize, tensor_index: usize) -> &mut [f64] {
        self.states[layer_index].params[tensor_index].values_mut()
    }

    pub fn trainable_layer_indices(&self) -> Vec<usize> {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| s.trainable && !s.params.is_empty())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn params_at(&self, layer_index: usize) -> &[Tensor] {
        &self.states[layer_index].params
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---- checkpoints -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(stage: &str, seed: u64, epoch: usize, val_loss: Option<f64>) -> Self {
        CheckpointMeta {
            stage: stage.to_string(),
            seed,
            epoch,
            val_loss,
        }
    }
}

/// Parameter snapshot: every parametric layer of the network it was taken
/// from, in layer order, plus run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Vec<Tensor>)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_network(net: &Network, meta: CheckpointMeta) -> Self {
        let entries = net
            .spec
            .layers
            .iter()
            .zip(&net.states)
            .filter(|(layer, _)| layer.kind.is_parametric())
            .map(|(layer, state)| (layer.name.clone(), state.params.clone()))
            .collect();
        Checkpoint { entries, meta }
    }

    pub fn layer(&self, name: &str) -> Option<&[Tensor]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
    }

    /// Overwrites the parameters of matching layers. Every parametric layer
    /// of the network must be present, and every checkpoint entry must name a
    /// parametric network layer of the same shape.
    pub fn apply(&self, net: &mut Network) -> Result<(), ModelError> {
        for (name, _) in &self.entries {
            let idx = net
                .spec
                .layer_index(name)
                .ok_or_else(|| ModelError::CheckpointUnknownLayer(name.clone()))?;
            if !net.spec.layers[idx].kind.is_parametric() {
                return Err(ModelError::CheckpointUnknownLayer(name.clone()));
            }
        }
        for (layer, _) in net
            .spec
            .layers
            .iter()
            .zip(&net.states)
            .filter(|(l, _)| l.kind.is_parametric())
        {
            if self.layer(&layer.name).is_none() {
                return Err(ModelError::CheckpointMissingLayer(layer.name.clone()));
            }
        }
        for (name, tensors) in &self.entries {
            let idx = net.spec.layer_index(name).unwrap();
            let current = &net.states[idx].params;
            if current.len() != tensors.len() {
                return Err(ModelError::CheckpointShapeMismatch {
                    layer: name.clone(),
                    expected: vec![current.len()],
                    got: vec![tensors.len()],
                });
            }
            for (cur, new) in current.iter().zip(tensors) {
                if cur.shape() != new.shape() {
                    return Err(ModelError::CheckpointShapeMismatch {
                        layer: name.clone(),
                        expected: cur.shape().to_vec(),
                        got: new.shape().to_vec(),
                    });
                }
            }
            for (t, new) in (0..tensors.len()).zip(tensors) {
                let preserve_flag = net.states[idx].params[t].requires_grad();
                let mut tensor = new.clone();
                tensor.set_requires_grad(preserve_flag);
                tensor.zero_grad();
                net.states[idx].params[t] = tensor;
            }
        }
        Ok(())
    }

    /// Binary format: magic "STCK0001"; u32 layer count; per layer
    /// (u16 name length, UTF-8 name, u8 tensor count, per tensor u8 rank +
    /// u32 dims + little-endian f64 values); trailing UTF-8 JSON metadata.
    /// All integers little-endian.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensors) in &self.entries {
            let name_bytes = name.as_bytes();
            out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            out.write_all(name_bytes)?;
            out.write_all(&[tensors.len() as u8])?;
            for t in tensors {
                out.write_all(&[t.shape().len() as u8])?;
                for &d in t.shape() {
                    out.write_all(&(d as u32).to_le_bytes())?;
                }
                for v in t.values() {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| ModelError::CheckpointMalformed(e.to_string()))?;
        out.write_all(&meta)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut file = BufReader::new(std::fs::File::open(path)?);
        let truncated = |_| ModelError::CheckpointMalformed("truncated".into());

        let mut magic = [0u8; 8];
        file.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::CheckpointMagic);
        }
        let mut b4 = [0u8; 4];
        file.read_exact(&mut b4).map_err(truncated)?;
        let layer_count = u32::from_le_bytes(b4) as usize;

        let mut entries = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let mut b2 = [0u8; 2];
            file.read_exact(&mut b2).map_err(truncated)?;
            let name_len = u16::from_le_bytes(b2) as usize;
            let mut name_buf = vec![0u8; name_len];
            file.read_exact(&mut name_buf).map_err(truncated)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| ModelError::CheckpointMalformed("layer name is not UTF-8".into()))?;
            let mut b1 = [0u8; 1];
            file.read_exact(&mut b1).map_err(truncated)?;
            let tensor_count = b1[0] as usize;
            let mut tensors = Vec::with_capacity(tensor_count);
            for _ in 0..tensor_count {
                file.read_exact(&mut b1).map_err(truncated)?;
                let rank = b1[0] as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    file.read_exact(&mut b4).map_err(truncated)?;
                    shape.push(u32::from_le_bytes(b4) as usize);
                }
                let numel: usize = shape.iter().product();
                let mut values = vec![0.0f64; numel];
                let mut buf = vec![0u8; numel * 8];
                file.read_exact(&mut buf).map_err(truncated)?;
                for (v, c) in values.iter_mut().zip(buf.chunks_exact(8)) {
                    *v = f64::from_le_bytes(c.try_into().unwrap());
                }
                tensors.push(
                    Tensor::new(shape, values)
                        .map_err(|e| ModelError::CheckpointMalformed(e.to_string()))?,
                );
            }
            entries.push((name, tensors));
        }
        let mut meta_buf = Vec::new();
        file.read_to_end(&mut meta_buf)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)
            .map_err(|e| ModelError::CheckpointMalformed(format!("metadata: {e}")))?;
        Ok(Checkpoint { entries, meta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    Sum,
    Average,
}

impl std::fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnsembleMode::Sum => write!(f, "sum"),
            EnsembleMode::Average => write!(f, "average"),
        }
    }
}

/// Per-parameter elementwise sum or mean over checkpoints with identical
/// layer names and shapes.
pub fn ensemble_checkpoints(
    ckpts: &[Checkpoint],
    mode: EnsembleMode,
) -> Result<Checkpoint, ModelError> {
    if ckpts.len() < 2 {
        return Err(ModelError::EnsembleTooFew(ckpts.len()));
    }
    let first = &ckpts[0];
    let mut entries = Vec::with_capacity(first.entries.len());
    for (name, tensors) in &first.entries {
        let mut combined: Vec<Tensor> = tensors.clone();
        for other in &ckpts[1..] {
            let other_tensors = other
                .layer(name)
                .ok_or_else(|| ModelError::EnsembleLayerMismatch(name.clone()))?;
            if other_tensors.len() != combined.len() {
                return Err(ModelError::EnsembleLayerMismatch(name.clone()));
            }
            for (acc, t) in combined.iter_mut().zip(other_tensors) {
                if acc.shape() != t.shape() {
                    return Err(ModelError::CheckpointShapeMismatch {
                        layer: name.clone(),
                        expected: acc.shape().to_vec(),
                        got: t.shape().to_vec(),
                    });
                }
                for (a, b) in acc.values_mut().iter_mut().zip(t.values()) {
                    *a += b;
                }
            }
        }
        if mode == EnsembleMode::Average {
            let inv = 1.0 / ckpts.len() as f64;
            for t in &mut combined {
                for v in t.values_mut() {
                    *v *= inv;
                }
            }
        }
        // other checkpoints must not carry extra layers either
        for other in &ckpts[1..] {
            for (other_name, _) in &other.entries {
                if first.layer(other_name).is_none() {
                    return Err(ModelError::EnsembleLayerMismatch(other_name.clone()));
                }
            }
        }
        entries.push((name.clone(), combined));
    }
    Ok(Checkpoint {
        entries,
        meta: CheckpointMeta::new(&format!("ensemble-{mode}"), 0, 0, None),
    })
}

// ---- saliency ----------------------------------------------------------------

/// Nonnegative class activation map over a conv layer's spatial grid,
/// normalized to [0, 1] unless identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub h: usize,
    pub w: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.w + x]
    }

    /// Binary PGM (P5), 8-bit, values round(255 * map).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(self.values.iter().map(|&v| (255.0 * v).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), std::io::Error> {
        std::fs::write(path, self.to_pgm())
    }
}

/// Gradient-weighted class activation map: per-channel weights are the
/// spatial mean of d(logit_class)/d(activation); the map is
/// relu(sum_c weight_c * activation_c), divided by its max when positive.
pub fn grad_cam(
    net: &Network,
    input: &Tensor,
    class_index: usize,
    conv_layer_name: &str,
) -> Result<SaliencyMap, ModelError> {
    if class_index >= net.num_classes() {
        return Err(ModelError::ClassOutOfRange {
            index: class_index,
            classes: net.num_classes(),
        });
    }
    let layer_idx = net
        .spec
        .layer_index(conv_layer_name)
        .ok_or_else(|| ModelError::NonConvLayer {
            name: conv_layer_name.to_string(),
            conv_layers: net.spec.conv_layer_names(),
        })?;
    if !matches!(net.spec.layers[layer_idx].kind, LayerKind::Conv { .. }) {
        return Err(ModelError::NonConvLayer {
            name: conv_layer_name.to_string(),
            conv_layers: net.spec.conv_layer_names(),
        });
    }

    let mut tape = Tape::new();
    let binding = net.bind_params(&mut tape, ParamGrad::All);
    let trace = net.forward_bound(&mut tape, &binding, input)?;
    let class_logit = tape.select(trace.logits, class_index)?;
    tape.backward(class_logit)?;

    let activation_id = trace.layer_outputs[layer_idx];
    let shape = tape.shape(activation_id).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let activations = tape.values(activation_id).to_vec();
    let grads = tape
        .grad(activation_id)
        .expect("conv activation receives a gradient under ParamGrad::All")
        .to_vec();

    let area = (h * w) as f64;
    let channel_weights: Vec<f64> = (0..c)
        .map(|ch| grads[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / area)
        .collect();

    let mut map = vec![0.0; h * w];
    for (ch, &cw) in channel_weights.iter().enumerate() {
        for (i, m) in map.iter_mut().enumerate() {
            *m += cw * activations[ch * h * w + i];
        }
    }
    for m in &mut map {
        if *m < 0.0 {
            *m = 0.0;
        }
    }
    let max = map.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for m in &mut map {
            *m /= max;
        }
    }
    Ok(SaliencyMap { h, w, values: map })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_net(seed: u64) -> Network {
        Network::build(NetworkSpec::default_desk(5, 16, 16), seed).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = desk_net(3);
        let b = desk_net(3);
        for name in ["conv1", "conv2", "fc"] {
            let (pa, pb) = (a.layer_params(name).unwrap(), b.layer_params(name).unwrap());
            for (x, y) in pa.iter().zip(pb) {
                assert_eq!(x.values(), y.values());
            }
        }
        let c = desk_net(4);
        assert_ne!(
            a.layer_params("conv1").unwrap()[0].values(),
            c.layer_params("conv1").unwrap()[0].values()
        );
    }

    #[test]
    fn dense_init_scale_is_sqrt_two_over_fan_in() {
        // fan_in 4 -> scale sqrt(0.5); check against a direct redraw
        let kind = LayerKind::Dense { fan_in: 4, fan_out: 2 };
        let params = init_layer_params(&kind, 77);
        let expected = Tensor::randn(vec![4, 2], 77, (2.0f64 / 4.0).sqrt()).unwrap();
        assert_eq!(params[0].values(), expected.values());
        assert_eq!(params[1].values(), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut spec = NetworkSpec::default_desk(5, 16, 16);
        spec.layers[1].name = "conv1".into();
        assert!(matches!(
            Network::build(spec, 0),
            Err(ModelError::DuplicateLayerName(_))
        ));
    }

    #[test]
    fn dangling_shapes_rejected() {
        let mut spec = NetworkSpec::default_desk(5, 16, 16);
        if let LayerKind::Dense { fan_in, .. } = &mut spec.layers[5].kind {
            *fan_in = 9; // gap produces 8 channels
        }
        assert!(matches!(
            Network::build(spec, 0),
            Err(ModelError::BadShape { .. })
        ));
    }

    #[test]
    fn final_classifier_is_last_parametric_layer() {
        let net = desk_net(0);
        assert_eq!(net.final_classifier_name(), "fc");
    }

    #[test]
    fn zero_input_logits_equal_biases() {
        let mut net = desk_net(5);
        let zero = Tensor::zeros(vec![1, 16, 16]).unwrap();
        assert_eq!(net.forward(&zero).unwrap(), vec![0.0; 5]);

        // make the fc bias visible
        let fc_idx = net.spec().layer_index("fc").unwrap();
        net.set_layer_param_values(fc_idx, 1, &[0.1, -0.2, 0.3, 0.0, 2.0]);
        assert_eq!(net.forward(&zero).unwrap(), vec![0.1, -0.2, 0.3, 0.0, 2.0]);
    }

    #[test]
    fn freeze_all_except_targets_one_layer() {
        let mut net = desk_net(1);
        net.freeze_all_except("fc").unwrap();
        assert_eq!(net.is_trainable("conv1"), Some(false));
        assert_eq!(net.is_trainable("conv2"), Some(false));
        assert_eq!(net.is_trainable("fc"), Some(true));
        assert!(matches!(
            net.freeze_all_except("nope"),
            Err(ModelError::UnknownLayer(_))
        ));
        assert!(matches!(
            net.freeze_all_except("relu1"),
            Err(ModelError::NotParametric(_))
        ));
    }

    #[test]
    fn reinit_layer_is_seeded_and_local() {
        let mut net = desk_net(2);
        let conv1_before = net.layer_params("conv1").unwrap()[0].values().to_vec();
        let fc_before = net.layer_params("fc").unwrap()[0].values().to_vec();

        let probe = Tensor::randn(vec![1, 16, 16], 99, 1.0).unwrap();
        let logits_before = net.forward(&probe).unwrap();

        net.reinit_layer("fc", 1234).unwrap();
        let fc_after = net.layer_params("fc").unwrap()[0].values().to_vec();
        assert_ne!(fc_before, fc_after);
        assert_eq!(
            net.layer_params("conv1").unwrap()[0].values(),
            conv1_before.as_slice()
        );
        assert_ne!(net.forward(&probe).unwrap(), logits_before);

        let mut net2 = desk_net(2);
        net2.reinit_layer("fc", 1234).unwrap();
        assert_eq!(
            net2.layer_params("fc").unwrap()[0].values(),
            fc_after.as_slice()
        );
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = desk_net(7);
        let meta = CheckpointMeta::new("stage-a", 7, 3, Some(0.25));
        let ckpt = Checkpoint::from_network(&net, meta.clone());
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta, meta);
        for (name, tensors) in &ckpt.entries {
            let other = loaded.layer(name).unwrap();
            for (a, b) in tensors.iter().zip(other) {
                assert_eq!(a.shape(), b.shape());
                let bits_a: Vec<u64> = a.values().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.values().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b);
            }
        }

        let mut other_net = desk_net(8);
        let probe = Tensor::randn(vec![1, 16, 16], 5, 1.0).unwrap();
        loaded.apply(&mut other_net).unwrap();
        let a = net.forward(&probe).unwrap();
        let b = other_net.forward(&probe).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn truncated_checkpoint_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = desk_net(7);
        Checkpoint::from_network(&net, CheckpointMeta::new("s", 0, 0, None))
            .save(&path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..200]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(ModelError::CheckpointMalformed(_))
        ));
    }

    #[test]
    fn wrong_magic_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        std::fs::write(&path, b"WRONG001xxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(ModelError::CheckpointMagic)
        ));
    }

    #[test]
    fn unknown_layer_in_checkpoint_names_it() {
        let net = desk_net(1);
        let mut ckpt = Checkpoint::from_network(&net, CheckpointMeta::new("s", 0, 0, None));
        ckpt.entries
            .push(("mystery".into(), vec![Tensor::zeros(vec![2]).unwrap()]));
        let mut target = desk_net(2);
        match ckpt.apply(&mut target) {
            Err(ModelError::CheckpointUnknownLayer(name)) => assert_eq!(name, "mystery"),
            other => panic!("expected unknown-layer error, got {other:?}"),
        }
    }

    #[test]
    fn missing_layer_in_checkpoint_is_distinct() {
        let net = desk_net(1);
        let mut ckpt = Checkpoint::from_network(&net, CheckpointMeta::new("s", 0, 0, None));
        ckpt.entries.retain(|(n, _)| n != "fc");
        let mut target = desk_net(2);
        assert!(matches!(
            ckpt.apply(&mut target),
            Err(ModelError::CheckpointMissingLayer(name)) if name == "fc"
        ));
    }

    #[test]
    fn shape_mismatch_on_apply_names_both_shapes() {
        let net = desk_net(1);
        let mut ckpt = Checkpoint::from_network(&net, CheckpointMeta::new("s", 0, 0, None));
        let fc = ckpt.entries.iter_mut().find(|(n, _)| n == "fc").unwrap();
        fc.1[1] = Tensor::zeros(vec![7]).unwrap();
        let mut target = desk_net(2);
        match ckpt.apply(&mut target) {
            Err(ModelError::CheckpointShapeMismatch { layer, expected, got }) => {
                assert_eq!(layer, "fc");
                assert_eq!(expected, vec![5]);
                assert_eq!(got, vec![7]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn ensemble_average_of_identical_is_identity() {
        let net = desk_net(4);
        let ckpt = Checkpoint::from_network(&net, CheckpointMeta::new("s", 0, 0, None));
        let avg =
            ensemble_checkpoints(&[ckpt.clone(), ckpt.clone(), ckpt.clone()], EnsembleMode::Average)
                .unwrap();
        for (name, tensors) in &ckpt.entries {
            for (a, b) in tensors.iter().zip(avg.layer(name).unwrap()) {
                for (x, y) in a.values().iter().zip(b.values()) {
                    assert!((x - y).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn ensemble_sum_of_identical_scales_by_k() {
        let net = desk_net(4);
        let ckpt = Checkpoint::from_network(&net, CheckpointMeta::new("s", 0, 0, None));
        let sum = ensemble_checkpoints(&[ckpt.clone(), ckpt.clone()], EnsembleMode::Sum).unwrap();
        for (name, tensors) in &ckpt.entries {
            for (a, b) in tensors.iter().zip(sum.layer(name).unwrap()) {
                for (x, y) in a.values().iter().zip(b.values()) {
                    assert!((2.0 * x - y).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn ensemble_average_of_zero_and_two_is_one() {
        let net = desk_net(4);
        let mut zero = Checkpoint::from_network(&net, CheckpointMeta::new("z", 0, 0, None));
        let mut two = zero.clone();
        for (_, tensors) in &mut zero.entries {
            for t in tensors {
                t.values_mut().fill(0.0);
            }
        }
        for (_, tensors) in &mut two.entries {
            for t in tensors {
                t.values_mut().fill(2.0);
            }
        }
        let avg = ensemble_checkpoints(&[zero, two], EnsembleMode::Average).unwrap();
        for (_, tensors) in &avg.entries {
            for t in tensors {
                for v in t.values() {
                    assert_eq!(*v, 1.0);
                }
            }
        }
    }

    #[test]
    fn ensemble_average_commutes_with_order() {
        let a = Checkpoint::from_network(&desk_net(10), CheckpointMeta::new("a", 0, 0, None));
        let b = Checkpoint::from_network(&desk_net(11), CheckpointMeta::new("b", 0, 0, None));
        let c = Checkpoint::from_network(&desk_net(12), CheckpointMeta::new("c", 0, 0, None));
        let fwd = ensemble_checkpoints(&[a.clone(), b.clone(), c.clone()], EnsembleMode::Average)
            .unwrap();
        let rev = ensemble_checkpoints(&[c, b, a], EnsembleMode::Average).unwrap();
        for (name, tensors) in &fwd.entries {
            for (x, y) in tensors.iter().zip(rev.layer(name).unwrap()) {
                for (u, v) in x.values().iter().zip(y.values()) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ensemble_rejects_single_checkpoint() {
        let ckpt = Checkpoint::from_network(&desk_net(1), CheckpointMeta::new("s", 0, 0, None));
        assert!(matches!(
            ensemble_checkpoints(&[ckpt], EnsembleMode::Sum),
            Err(ModelError::EnsembleTooFew(1))
        ));
    }

    #[test]
    fn grad_cam_is_nonnegative_normalized_and_shaped() {
        let net = desk_net(21);
        let input = Tensor::randn(vec![1, 16, 16], 33, 1.0).unwrap();
        let map = grad_cam(&net, &input, 2, "conv2").unwrap();
        // conv2 output is 12x12 for a 16x16 input
        assert_eq!((map.h, map.w), (12, 12));
        let max = map.values().iter().cloned().fold(0.0f64, f64::max);
        for &v in map.values() {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_cam_rejects_non_conv_layers() {
        let net = desk_net(21);
        let input = Tensor::zeros(vec![1, 16, 16]).unwrap();
        match grad_cam(&net, &input, 0, "gap") {
            Err(ModelError::NonConvLayer { conv_layers, .. }) => {
                assert_eq!(conv_layers, vec!["conv1".to_string(), "conv2".to_string()]);
            }
            other => panic!("expected NonConvLayer, got {other:?}"),
        }
    }

    #[test]
    fn grad_cam_single_channel_readout_matches_closed_form() {
        // dense weights read only channel 0 with a positive coefficient, so
        // the map must be relu(activation_0) normalized
        let mut net = desk_net(30);
        let fc_idx = net.spec().layer_index("fc").unwrap();
        let mut weights = vec![0.0; 8 * 5];
        weights[0 * 5 + 1] = 3.0; // channel 0 -> class 1
        net.set_layer_param_values(fc_idx, 0, &weights);
        net.set_layer_param_values(fc_idx, 1, &[0.0; 5]);

        let input = Tensor::randn(vec![1, 16, 16], 40, 1.0).unwrap();
        let map = grad_cam(&net, &input, 1, "conv2").unwrap();

        // recompute conv2's channel-0 activation by hand
        let conv1 = net.layer_params("conv1").unwrap();
        let conv2 = net.layer_params("conv2").unwrap();
        let a1 = conv2d_raw(
            input.values(),
            1,
            16,
            16,
            conv1[0].values(),
            8,
            3,
            3,
            conv1[1].values(),
        );
        let r1 = relu_raw(&a1);
        let a2 = conv2d_raw(&r1, 8, 14, 14, conv2[0].values(), 8, 3, 3, conv2[1].values());
        let chan0: Vec<f64> = a2[..144].iter().map(|&v| v.max(0.0)).collect();
        let max = chan0.iter().cloned().fold(0.0f64, f64::max);
        assert!(max > 0.0, "degenerate activation");
        for (m, c) in map.values().iter().zip(&chan0) {
            assert!((m - c / max).abs() < 1e-9);
        }
    }

    #[test]
    fn pgm_export_is_well_formed() {
        let map = SaliencyMap {
            h: 2,
            w: 3,
            values: vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1],
        };
        let pgm = map.to_pgm();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 6);
        assert_eq!(pgm[header.len()], 0);
        assert_eq!(pgm[header.len() + 2], 255);
    }
}
