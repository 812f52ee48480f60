//! Layer graphs, the anti-aliasing rewrite, model execution, checkpoints.
//!
//! A [`LayerGraph`] is an ordered list of [`LayerSpec`]s. Down-sampling
//! layers (max-pool, avg-pool, strided conv, blur pools, strided subsample)
//! are numbered with consecutive depth levels 1..M in order of appearance;
//! [`rewrite_antialias`] replaces each of them with its blur-pooled
//! equivalent and swaps activations, initializing sigma of depth level D to
//! D/2 and every AA-ReLU alpha to 6.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::BlurKernel;
use crate::rng::{stream, Domain};
use crate::tensor::{PadMode, Tape, Tensor, Var};

/// Default AA-ReLU roll-off initialization.
pub const ALPHA_INIT: f64 = 6.0;
/// Cap used for the C-ReLU baseline.
pub const C_RELU_CAP: f64 = 6.0;

/// Activation choice for a network variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    CRelu,
    AaRelu,
}

/// One layer of a network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    },
    Dense {
        out_features: usize,
    },
    Relu,
    CRelu {
        cap: f64,
    },
    AaRelu {
        alpha_init: f64,
    },
    MaxPool {
        k: usize,
        s: usize,
    },
    AvgPool {
        k: usize,
        s: usize,
    },
    DenseMax {
        k: usize,
    },
    DabPool {
        /// Blur kernel size (odd).
        m: usize,
        s: usize,
        /// Window of the pool this layer replaced; fixes the output count
        /// to `floor((H - window)/s) + 1` so stage shapes are preserved.
        window: usize,
        sigma_init: f64,
        depth_level: usize,
    },
    FixedBlurPool {
        kernel: BlurKernel,
        s: usize,
        window: usize,
    },
    Subsample {
        s: usize,
    },
    Flatten,
}

impl LayerSpec {
    /// Does this layer reduce spatial resolution? Depth levels are assigned
    /// to these, in order of appearance.
    pub fn is_downsampling(&self) -> bool {
        match self {
            LayerSpec::MaxPool { .. }
            | LayerSpec::AvgPool { .. }
            | LayerSpec::DabPool { .. }
            | LayerSpec::FixedBlurPool { .. } => true,
            LayerSpec::Conv { stride, .. } => *stride > 1,
            LayerSpec::Subsample { s } => *s > 1,
            _ => false,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        match self {
            LayerSpec::Conv { out_channels, k, stride, .. } => {
                if *out_channels == 0 || *k == 0 || *stride == 0 {
                    return bad(format!("conv: channels/kernel/stride must be positive: {self:?}"));
                }
            }
            LayerSpec::Dense { out_features } => {
                if *out_features == 0 {
                    return bad("dense: out_features must be positive".to_string());
                }
            }
            LayerSpec::CRelu { cap } => {
                if *cap <= 0.0 {
                    return bad(format!("c_relu: cap must be positive, got {cap}"));
                }
            }
            LayerSpec::AaRelu { alpha_init } => {
                if *alpha_init <= 0.0 {
                    return bad(format!("aa_relu: alpha_init must be positive, got {alpha_init}"));
                }
            }
            LayerSpec::MaxPool { k, s } | LayerSpec::AvgPool { k, s } => {
                if *k == 0 || *s == 0 {
                    return bad(format!("pool: kernel and stride must be positive: {self:?}"));
                }
            }
            LayerSpec::DenseMax { k } => {
                if *k == 0 {
                    return bad("dense_max: window must be positive".to_string());
                }
            }
            LayerSpec::DabPool { m, s, window, sigma_init, depth_level } => {
                if *m == 0 || *m % 2 == 0 {
                    return bad(format!("dab_pool: blur kernel must be odd, got {m}"));
                }
                if *s == 0 || *window == 0 {
                    return bad("dab_pool: stride and window must be positive".to_string());
                }
                if *sigma_init <= 0.0 {
                    return bad(format!("dab_pool: sigma_init must be positive, got {sigma_init}"));
                }
                if *depth_level == 0 {
                    return bad("dab_pool: depth level starts at 1".to_string());
                }
            }
            LayerSpec::FixedBlurPool { s, window, .. } => {
                if *s == 0 || *window == 0 {
                    return bad("fixed_blur_pool: stride and window must be positive".to_string());
                }
            }
            LayerSpec::Subsample { s } => {
                if *s == 0 {
                    return bad("subsample: stride must be positive".to_string());
                }
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
        Ok(())
    }
}

/// Ordered layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub layers: Vec<LayerSpec>,
}

/// Shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageShape {
    Map { c: usize, h: usize, w: usize },
    Flat { features: usize },
}

impl LayerGraph {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        for l in &layers {
            l.validate()?;
        }
        Ok(LayerGraph { layers })
    }

    /// Depth level (1-based) of each down-sampling layer, keyed by layer
    /// index.
    pub fn depth_levels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut d = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if l.is_downsampling() {
                d += 1;
                out.push((i, d));
            }
        }
        out
    }

    pub fn num_depth_levels(&self) -> usize {
        self.layers.iter().filter(|l| l.is_downsampling()).count()
    }

    /// Output shape after every layer for a `(c, h, w)` input.
    pub fn infer_shapes(&self, input: (usize, usize, usize)) -> Result<Vec<StageShape>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = StageShape::Map {
            c: input.0,
            h: input.1,
            w: input.2,
        };
        for (i, l) in self.layers.iter().enumerate() {
            let map = |cur: StageShape| -> Result<(usize, usize, usize)> {
                match cur {
                    StageShape::Map { c, h, w } => Ok((c, h, w)),
                    StageShape::Flat { .. } => Err(Error::shape(format!(
                        "layer {i} ({l:?}) needs a spatial input but the graph flattened earlier"
                    ))),
                }
            };
            let reduced = |h: usize, k: usize, s: usize| -> Result<usize> {
                if h < k {
                    return Err(Error::shape(format!(
                        "layer {i} ({l:?}): window {k} larger than input extent {h} \
                         (input smaller than the total down-sampling factor)"
                    )));
                }
                Ok((h - k) / s + 1)
            };
            cur = match l {
                LayerSpec::Conv { out_channels, k, stride, pad, .. } => {
                    let (_, h, w) = map(cur)?;
                    let hh = reduced(h + 2 * pad, *k, *stride)?;
                    let ww = reduced(w + 2 * pad, *k, *stride)?;
                    StageShape::Map { c: *out_channels, h: hh, w: ww }
                }
                LayerSpec::Dense { out_features } => match cur {
                    StageShape::Flat { .. } => StageShape::Flat { features: *out_features },
                    StageShape::Map { .. } => {
                        return Err(Error::shape(format!(
                            "layer {i}: dense requires a flattened input"
                        )))
                    }
                },
                LayerSpec::Relu | LayerSpec::CRelu { .. } | LayerSpec::AaRelu { .. } => cur,
                LayerSpec::MaxPool { k, s } | LayerSpec::AvgPool { k, s } => {
                    let (c, h, w) = map(cur)?;
                    StageShape::Map { c, h: reduced(h, *k, *s)?, w: reduced(w, *k, *s)? }
                }
                LayerSpec::DenseMax { k } => {
                    let (c, h, w) = map(cur)?;
                    if h < *k || w < *k {
                        return Err(Error::shape(format!(
                            "layer {i}: dense_max window {k} larger than input {h}x{w}"
                        )));
                    }
                    StageShape::Map { c, h, w }
                }
                LayerSpec::DabPool { m, s, window, .. } => {
                    let (c, h, w) = map(cur)?;
                    if h < *m || w < *m {
                        return Err(Error::shape(format!(
                            "layer {i}: blur kernel {m} larger than input {h}x{w}"
                        )));
                    }
                    StageShape::Map { c, h: reduced(h, *window, *s)?, w: reduced(w, *window, *s)? }
                }
                LayerSpec::FixedBlurPool { kernel, s, window } => {
                    let (c, h, w) = map(cur)?;
                    let m = kernel.size();
                    if h < m || w < m {
                        return Err(Error::shape(format!(
                            "layer {i}: blur kernel {m} larger than input {h}x{w}"
                        )));
                    }
                    StageShape::Map { c, h: reduced(h, *window, *s)?, w: reduced(w, *window, *s)? }
                }
                LayerSpec::Subsample { s } => {
                    let (c, h, w) = map(cur)?;
                    StageShape::Map { c, h: (h + s - 1) / s, w: (w + s - 1) / s }
                }
                LayerSpec::Flatten => {
                    let (c, h, w) = map(cur)?;
                    StageShape::Flat { features: c * h * w }
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }
}

/// Replace down-sampling layers with their anti-aliased equivalents and
/// substitute the activation:
///
/// * `max_pool(k,s)`  -> `dense_max(k)` then `dab_pool(s, window=k)`
/// * `conv(k, s>1)`   -> `conv(k, s=1)` then `dab_pool(s, window=1)`
/// * `avg_pool(k,s)`  -> `dab_pool(s, window=k)`
/// * every `relu`     -> `af`
///
/// Sigma of depth level D initializes to D/2, alpha to [`ALPHA_INIT`].
/// Already-rewritten layers (dab_pool, dense_max, fixed_blur_pool) pass
/// through untouched, so the rewrite is idempotent.
pub fn rewrite_antialias(graph: &LayerGraph, m: usize, af: Activation) -> Result<LayerGraph> {
    rewrite_antialias_with(graph, m, af, ALPHA_INIT, C_RELU_CAP)
}

pub fn rewrite_antialias_with(
    graph: &LayerGraph,
    m: usize,
    af: Activation,
    alpha_init: f64,
    c_relu_cap: f64,
) -> Result<LayerGraph> {
    if m % 2 == 0 || m == 0 {
        return Err(Error::invalid(format!("blur kernel size must be odd, got {m}")));
    }
    let mut out = Vec::with_capacity(graph.layers.len() + 4);
    let mut depth = 0usize;
    let dab = |depth: usize, s: usize, window: usize| LayerSpec::DabPool {
        m,
        s,
        window,
        sigma_init: depth as f64 / 2.0,
        depth_level: depth,
    };
    for l in &graph.layers {
        match l {
            LayerSpec::MaxPool { k, s } => {
                depth += 1;
                out.push(LayerSpec::DenseMax { k: *k });
                out.push(dab(depth, *s, *k));
            }
            LayerSpec::Conv { out_channels, k, stride, pad, pad_mode } if *stride > 1 => {
                depth += 1;
                out.push(LayerSpec::Conv {
                    out_channels: *out_channels,
                    k: *k,
                    stride: 1,
                    pad: *pad,
                    pad_mode: *pad_mode,
                });
                out.push(dab(depth, *stride, 1));
            }
            LayerSpec::AvgPool { k, s } => {
                depth += 1;
                out.push(dab(depth, *s, *k));
            }
            LayerSpec::Relu => out.push(match af {
                Activation::Relu => LayerSpec::Relu,
                Activation::CRelu => LayerSpec::CRelu { cap: c_relu_cap },
                Activation::AaRelu => LayerSpec::AaRelu { alpha_init },
            }),
            other => {
                if other.is_downsampling() {
                    depth += 1;
                }
                out.push(other.clone());
            }
        }
    }
    LayerGraph::new(out)
}

/// Configuration for the 3-block toy CNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCnnConfig {
    /// Input as (channels, height, width).
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    /// Swap the three max-pools for stride-2 convolutions.
    pub use_strided_conv: bool,
    /// Finish with a global average pool before the classifier head.
    pub use_gap_head: bool,
}

impl Default for ToyCnnConfig {
    fn default() -> Self {
        ToyCnnConfig {
            input: (1, 28, 28),
            num_classes: 10,
            use_strided_conv: false,
            use_gap_head: false,
        }
    }
}

/// Plain 3-block CNN: conv(3,16)-relu-pool, conv(3,32)-relu-pool,
/// conv(3,64)-relu-pool, flatten, dense. Three depth levels.
pub fn build_toy_cnn(cfg: &ToyCnnConfig) -> Result<LayerGraph> {
    let conv = |c: usize| LayerSpec::Conv {
        out_channels: c,
        k: 3,
        stride: 1,
        pad: 1,
        pad_mode: PadMode::Zero,
    };
    let mut layers = Vec::new();
    for &ch in &[16usize, 32, 64] {
        layers.push(conv(ch));
        layers.push(LayerSpec::Relu);
        if cfg.use_strided_conv {
            layers.push(LayerSpec::Conv {
                out_channels: ch,
                k: 3,
                stride: 2,
                pad: 1,
                pad_mode: PadMode::Zero,
            });
        } else {
            layers.push(LayerSpec::MaxPool { k: 2, s: 2 });
        }
    }
    if cfg.use_gap_head {
        // global average pool over whatever spatial extent remains
        let probe = LayerGraph::new(layers.clone())?;
        let shapes = probe.infer_shapes(cfg.input)?;
        if let Some(StageShape::Map { h, w, .. }) = shapes.last().copied() {
            let k = h.min(w);
            layers.push(LayerSpec::AvgPool { k, s: k });
        }
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense {
        out_features: cfg.num_classes,
    });
    let graph = LayerGraph::new(layers)?;
    // surfaces "input smaller than total down-sampling factor" early
    graph.infer_shapes(cfg.input)?;
    Ok(graph)
}

// ---------------------------------------------------------------------------
// Parameters and model execution
// ---------------------------------------------------------------------------

/// Which parameters a layer owns, in declaration order.
fn layer_param_shapes(l: &LayerSpec, in_shape: StageShape) -> Result<Vec<Vec<usize>>> {
    Ok(match l {
        LayerSpec::Conv { out_channels, k, .. } => {
            let c = match in_shape {
                StageShape::Map { c, .. } => c,
                _ => return Err(Error::shape("conv after flatten".to_string())),
            };
            vec![vec![*out_channels, c, *k, *k]]
        }
        LayerSpec::Dense { out_features } => {
            let f = match in_shape {
                StageShape::Flat { features } => features,
                _ => return Err(Error::shape("dense requires a flattened input".to_string())),
            };
            vec![vec![f, *out_features], vec![*out_features]]
        }
        LayerSpec::DabPool { .. } => vec![vec![1]],
        LayerSpec::AaRelu { .. } => vec![vec![1]],
        _ => Vec::new(),
    })
}

/// A graph plus its parameter tensors, in layer declaration order.
#[derive(Debug, Clone)]
pub struct Model {
    pub graph: LayerGraph,
    pub input_shape: (usize, usize, usize),
    pub params: Vec<Tensor>,
}

impl Model {
    /// Initialize parameters: He fan-in normals for conv/dense weights,
    /// zero biases, sigma and alpha from their layer specs.
    pub fn init(graph: LayerGraph, input_shape: (usize, usize, usize), seed: u64) -> Result<Model> {
        use rand_distr::{Distribution, StandardNormal};
        let shapes = graph.infer_shapes(input_shape)?;
        let mut params = Vec::new();
        let mut prev = StageShape::Map {
            c: input_shape.0,
            h: input_shape.1,
            w: input_shape.2,
        };
        for (i, l) in graph.layers.iter().enumerate() {
            for (j, pshape) in layer_param_shapes(l, prev)?.into_iter().enumerate() {
                let idx = params.len() as u64;
                let t = match l {
                    LayerSpec::Conv { k, .. } => {
                        let fan_in = (pshape[1] * k * k) as f64;
                        let std = (2.0 / fan_in).sqrt();
                        let mut rng = stream(seed, Domain::WeightInit, idx);
                        Tensor::from_fn(&pshape, |_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * std
                        })
                    }
                    LayerSpec::Dense { .. } if j == 0 => {
                        let fan_in = pshape[0] as f64;
                        let std = (2.0 / fan_in).sqrt();
                        let mut rng = stream(seed, Domain::WeightInit, idx);
                        Tensor::from_fn(&pshape, |_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * std
                        })
                    }
                    LayerSpec::Dense { .. } => Tensor::zeros(&pshape),
                    LayerSpec::DabPool { sigma_init, .. } => Tensor::scalar(*sigma_init),
                    LayerSpec::AaRelu { alpha_init } => Tensor::scalar(*alpha_init),
                    _ => unreachable!("only parameterized layers reach here"),
                };
                params.push(t.with_requires_grad());
            }
            prev = shapes[i];
        }
        Ok(Model {
            graph,
            input_shape,
            params,
        })
    }

    /// Param index ranges per layer, following declaration order.
    fn param_layout(&self) -> Result<Vec<(usize, usize)>> {
        let shapes = self.graph.infer_shapes(self.input_shape)?;
        let mut layout = Vec::with_capacity(self.graph.layers.len());
        let mut prev = StageShape::Map {
            c: self.input_shape.0,
            h: self.input_shape.1,
            w: self.input_shape.2,
        };
        let mut at = 0;
        for (i, l) in self.graph.layers.iter().enumerate() {
            let n = layer_param_shapes(l, prev)?.len();
            layout.push((at, n));
            at += n;
            prev = shapes[i];
        }
        if at != self.params.len() {
            return Err(Error::shape(format!(
                "graph declares {at} parameters but model holds {}",
                self.params.len()
            )));
        }
        Ok(layout)
    }

    /// Indices into `params` of each depth level's sigma, in depth order.
    pub fn sigma_param_indices(&self) -> Vec<usize> {
        self.param_indices_of(|l| matches!(l, LayerSpec::DabPool { .. }))
    }

    /// Indices into `params` of each AA-ReLU alpha, in layer order.
    pub fn alpha_param_indices(&self) -> Vec<usize> {
        self.param_indices_of(|l| matches!(l, LayerSpec::AaRelu { .. }))
    }

    fn param_indices_of(&self, pred: impl Fn(&LayerSpec) -> bool) -> Vec<usize> {
        let layout = self.param_layout().expect("model layout is consistent");
        self.graph
            .layers
            .iter()
            .zip(&layout)
            .filter(|(l, _)| pred(l))
            .map(|(_, (at, _))| *at)
            .collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.sigma_param_indices()
            .iter()
            .map(|&i| self.params[i].data()[0])
            .collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.alpha_param_indices()
            .iter()
            .map(|&i| self.params[i].data()[0])
            .collect()
    }

    /// Run the graph on a tape. Returns the logits var and the vars of every
    /// parameter (in declaration order). With `param_grads` false the
    /// parameters enter the tape frozen.
    ///
    /// `capture_depth` optionally records the value entering the
    /// down-sampling layer with that depth level.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        param_grads: bool,
        capture_depth: Option<usize>,
    ) -> Result<(Var, Vec<Var>, Option<Tensor>)> {
        let layout = self.param_layout()?;
        let pvars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                if !param_grads {
                    t = Tensor::new(t.shape(), t.data().to_vec()).expect("same shape");
                }
                tape.leaf(t)
            })
            .collect();
        let mut cur = x;
        let mut depth = 0usize;
        let mut captured = None;
        for (l, (at, _)) in self.graph.layers.iter().zip(&layout) {
            if l.is_downsampling() {
                depth += 1;
                if capture_depth == Some(depth) {
                    captured = Some(tape.value(cur).clone());
                }
            }
            cur = match l {
                LayerSpec::Conv { stride, pad, pad_mode, .. } => {
                    tape.conv2d(cur, pvars[*at], *stride, *pad, *pad_mode)?
                }
                LayerSpec::Dense { .. } => tape.dense(cur, pvars[*at], pvars[*at + 1])?,
                LayerSpec::Relu => tape.relu(cur),
                LayerSpec::CRelu { cap } => tape.c_relu(cur, *cap)?,
                LayerSpec::AaRelu { .. } => tape.aa_relu(cur, pvars[*at])?,
                LayerSpec::MaxPool { k, s } => tape.max_pool(cur, *k, *s)?,
                LayerSpec::AvgPool { k, s } => tape.avg_pool(cur, *k, *s)?,
                LayerSpec::DenseMax { k } => tape.dense_max(cur, *k)?,
                LayerSpec::DabPool { m, s, window, .. } => {
                    tape.dab_pool(cur, pvars[*at], *m, *s, *window)?
                }
                LayerSpec::FixedBlurPool { kernel, s, window } => {
                    tape.fixed_blur_pool(cur, *kernel, *s, *window)?
                }
                LayerSpec::Subsample { s } => tape.subsample(cur, *s)?,
                LayerSpec::Flatten => tape.flatten(cur)?,
            };
        }
        Ok((cur, pvars, captured))
    }

    /// Logits for an `[n, c, h, w]` batch, no gradients.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let (logits, _, _) = self.forward_on_tape(&mut tape, x, false, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Argmax class per row of the logits.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(images)?;
        Ok(argmax_rows(&logits))
    }

    /// Feature map entering the DS layer at `depth_level` for a batch.
    pub fn capture_depth_input(&self, images: &Tensor, depth_level: usize) -> Result<Tensor> {
        if depth_level == 0 || depth_level > self.graph.num_depth_levels() {
            return Err(Error::invalid(format!(
                "depth level {depth_level} out of range 1..={}",
                self.graph.num_depth_levels()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let (_, _, captured) = self.forward_on_tape(&mut tape, x, false, Some(depth_level))?;
        captured.ok_or_else(|| Error::invalid(format!("depth level {depth_level} never reached")))
    }
}

/// Row-wise argmax of a `[n, classes]` tensor. Ties break to the first.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (n, c) = logits.dims2().expect("logits are 2-D");
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * c..(i + 1) * c];
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

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"AAGD";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layer_specs: Vec<LayerSpec>,
    input_shape: (usize, usize, usize),
    param_shapes: Vec<Vec<usize>>,
    seed: u64,
    epoch: u64,
}

/// A model snapshot: graph, parameters, and training bookkeeping.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub epoch: u64,
}

/// Layout: magic `AAGD`, little-endian u32 version, little-endian u64 JSON
/// header length, the UTF-8 JSON header, then every parameter as
/// little-endian f64 in declaration order.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        layer_specs: ckpt.model.graph.layers.clone(),
        input_shape: ckpt.model.input_shape,
        param_shapes: ckpt.model.params.iter().map(|p| p.shape().to_vec()).collect(),
        seed: ckpt.seed,
        epoch: ckpt.epoch,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for p in &ckpt.model.params {
        for &v in p.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::format("checkpoint truncated before magic".to_string()))?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut v4 = [0u8; 4];
    f.read_exact(&mut v4)
        .map_err(|_| Error::format("checkpoint truncated before version".to_string()))?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version} not supported (expected {VERSION})"
        )));
    }
    let mut l8 = [0u8; 8];
    f.read_exact(&mut l8)
        .map_err(|_| Error::format("checkpoint truncated before header length".to_string()))?;
    let hlen = u64::from_le_bytes(l8) as usize;
    let mut hbytes = vec![0u8; hlen];
    f.read_exact(&mut hbytes)
        .map_err(|_| Error::format("checkpoint truncated inside header".to_string()))?;
    let header: CheckpointHeader = serde_json::from_slice(&hbytes)
        .map_err(|e| Error::format(format!("checkpoint header is not valid JSON: {e}")))?;
    let graph = LayerGraph::new(header.layer_specs)?;
    let mut params = Vec::with_capacity(header.param_shapes.len());
    for shape in &header.param_shapes {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            f.read_exact(&mut buf)
                .map_err(|_| Error::format("checkpoint truncated inside parameters".to_string()))?;
            data.push(f64::from_le_bytes(buf));
        }
        params.push(Tensor::new(shape, data)?.with_requires_grad());
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(Error::format("checkpoint has trailing bytes".to_string()));
    }
    let model = Model {
        graph,
        input_shape: header.input_shape,
        params,
    };
    model.param_layout()?; // consistency check
    Ok(Checkpoint {
        model,
        seed: header.seed,
        epoch: header.epoch,
    })
}
