//! The three collision-prediction architectures: event-only, RGB-only, and
//! dual-encoder fusion.
//!
//! Every variant is a six-layer convolutional encoder (2x2 max pools after
//! the first four layers take 80x80 inputs down to 5x5), whose feature map
//! is read as 25 spatial tokens, passed through single-head self-attention,
//! and regressed by a bias-carrying linear head to (x_mm, y_mm, t_ms) with
//! no output activation. The fusion variant concatenates the two encoders'
//! feature maps channel-wise before attention. Parameters live in a flat
//! named list; forward passes record onto a [`Graph`] and expose per-layer
//! hook points so quantization schemes can rewrite weights and activations
//! without touching this module.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::seed::derive_seed;
use crate::tensor::{Graph, Mode, NodeId, Tensor};
use crate::{Error, Result};

/// Input spatial size expected by the encoders.
pub const INPUT_HW: usize = 80;
/// Spatial size of the encoder output (after four 2x2 pools).
pub const FEAT_HW: usize = 5;
/// Number of attention tokens (encoder output positions).
pub const TOKENS: usize = FEAT_HW * FEAT_HW;
/// Default channel plan of the six encoder convolutions.
pub const DEFAULT_CONV_WIDTHS: [usize; 6] = [8, 16, 32, 64, 64, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Evs,
    Rgb,
    Fusion,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Evs => "evs",
            Modality::Rgb => "rgb",
            Modality::Fusion => "fusion",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "evs" => Ok(Modality::Evs),
            "rgb" => Ok(Modality::Rgb),
            "fusion" => Ok(Modality::Fusion),
            other => Err(format!("unknown modality `{other}`, expected evs|rgb|fusion")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub modality: Modality,
    /// Event-branch input channels: one difference frame per stacked window.
    pub in_channels_evs: usize,
    /// RGB-branch input channels: three per stacked window.
    pub in_channels_rgb: usize,
    pub conv_widths: [usize; 6],
    pub dropout_p: f32,
    /// Parameter-initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(modality: Modality, stack_k: u16, seed: u64) -> Self {
        ModelConfig {
            modality,
            in_channels_evs: stack_k as usize,
            in_channels_rgb: 3 * stack_k as usize,
            conv_widths: DEFAULT_CONV_WIDTHS,
            dropout_p: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("ModelConfig", format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if self.conv_widths.contains(&0) {
            return Err(Error::invalid("ModelConfig", "conv widths must be positive"));
        }
        if self.in_channels_evs == 0 || self.in_channels_rgb == 0 {
            return Err(Error::invalid("ModelConfig", "input channel counts must be positive"));
        }
        Ok(())
    }

    /// Channel depth entering self-attention: the last conv width, doubled
    /// by concatenation in the fusion variant.
    pub fn attention_dim(&self) -> usize {
        match self.modality {
            Modality::Fusion => 2 * self.conv_widths[5],
            _ => self.conv_widths[5],
        }
    }

    /// Encoder branches of this variant, with their names and input depths.
    pub(crate) fn branches(&self) -> Vec<(&'static str, usize)> {
        match self.modality {
            Modality::Evs => vec![("evs", self.in_channels_evs)],
            Modality::Rgb => vec![("rgb", self.in_channels_rgb)],
            Modality::Fusion => vec![("evs", self.in_channels_evs), ("rgb", self.in_channels_rgb)],
        }
    }
}

/// Model output, in the head's raw units. During training the head operates
/// in standardized label space; evaluation undoes the standardization before
/// reading these fields as millimeters and milliseconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollisionPrediction {
    pub x_mm: f32,
    pub y_mm: f32,
    pub t_ms: f32,
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Per-layer rewrite points used by quantization-aware training: `weight`
/// runs on each parameter node right before the conv/linear/projection that
/// consumes it, `activation` on each tensor right before it feeds such an
/// op. The default hooks are identity.
pub trait LayerHooks {
    fn weight(&mut self, g: &mut Graph, layer: &str, w: NodeId) -> Result<NodeId> {
        let _ = (g, layer);
        Ok(w)
    }
    fn activation(&mut self, g: &mut Graph, layer: &str, x: NodeId) -> Result<NodeId> {
        let _ = (g, layer);
        Ok(x)
    }
}

/// Identity hooks: the plain full-precision forward pass.
pub struct NoHooks;

impl LayerHooks for NoHooks {}

/// A forward pass recorded on a graph: the [3]-shaped output node plus the
/// graph node of every parameter, aligned with [`Model::params`] order.
pub struct ForwardPass {
    pub out: NodeId,
    pub param_nodes: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    /// Flat parameter list in a fixed layout: 12 tensors per encoder branch
    /// (conv0.w, conv0.b, .. conv5.b), then attn.q.w/attn.k.w/attn.v.w,
    /// then head.w/head.b.
    pub params: Vec<Param>,
}

/// Draws a tensor from U(-bound, bound).
fn uniform(shape: &[usize], bound: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("count matches shape")
}

/// Builds one encoder branch's parameters: six 3x3 convolutions with
/// Kaiming-uniform weights (ReLU gain, fan-in) and zero biases.
pub fn build_encoder(prefix: &str, in_channels: usize, conv_widths: &[usize; 6], rng: &mut ChaCha8Rng) -> Vec<Param> {
    let mut params = Vec::with_capacity(12);
    let mut cin = in_channels;
    for (i, &cout) in conv_widths.iter().enumerate() {
        let bound = (6.0 / (cin * 9) as f32).sqrt();
        params.push(Param {
            name: format!("{prefix}.conv{i}.w"),
            tensor: uniform(&[cout, cin, 3, 3], bound, rng),
        });
        params.push(Param { name: format!("{prefix}.conv{i}.b"), tensor: Tensor::zeros(&[cout]) });
        cin = cout;
    }
    params
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::new();
        for (prefix, in_ch) in cfg.branches() {
            params.extend(build_encoder(prefix, in_ch, &cfg.conv_widths, &mut rng));
        }
        let d = cfg.attention_dim();
        let proj_bound = (1.0 / d as f32).sqrt();
        for name in ["attn.q.w", "attn.k.w", "attn.v.w"] {
            params.push(Param { name: name.into(), tensor: uniform(&[d, d], proj_bound, &mut rng) });
        }
        let din = TOKENS * d;
        let head_bound = (1.0 / din as f32).sqrt();
        params.push(Param { name: "head.w".into(), tensor: uniform(&[3, din], head_bound, &mut rng) });
        params.push(Param { name: "head.b".into(), tensor: Tensor::zeros(&[3]) });
        Ok(Model { cfg, params })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn attn_base(&self) -> usize {
        12 * self.cfg.branches().len()
    }

    /// Looks up a parameter index by name.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    fn encoder_forward(
        &self,
        g: &mut Graph,
        hooks: &mut dyn LayerHooks,
        nodes: &[NodeId],
        branch: &str,
        base: usize,
        input: NodeId,
        mode: Mode,
        dropout_seed: u64,
        branch_ord: u64,
    ) -> Result<NodeId> {
        let mut x = input;
        for i in 0..6 {
            let name = format!("{branch}.conv{i}");
            let xin = hooks.activation(g, &name, x)?;
            let w = hooks.weight(g, &name, nodes[base + 2 * i])?;
            let pre = g.conv2d(xin, w, nodes[base + 2 * i + 1])?;
            x = g.relu(pre);
            if i < 4 {
                x = g.maxpool2(x)?;
                x = g.dropout(x, self.cfg.dropout_p, mode, derive_seed(dropout_seed, branch_ord, i as u64))?;
            }
        }
        Ok(x)
    }

    /// Records a full forward pass onto `g`. Inputs not used by the
    /// modality may be `None`; required ones are shape-checked against
    /// [channels, 80, 80]. `dropout_seed` fixes the dropout masks in train
    /// mode (ignored in eval).
    pub fn forward_pass(
        &self,
        g: &mut Graph,
        evs: Option<&Tensor>,
        rgb: Option<&Tensor>,
        mode: Mode,
        dropout_seed: u64,
        hooks: &mut dyn LayerHooks,
    ) -> Result<ForwardPass> {
        let nodes: Vec<NodeId> = self.params.iter().map(|p| g.param(p.tensor.clone())).collect();

        let mut feats = Vec::new();
        for (ord, (branch, in_ch)) in self.cfg.branches().into_iter().enumerate() {
            let input = match branch {
                "evs" => evs,
                _ => rgb,
            }
            .ok_or_else(|| Error::invalid("forward", format!("{} model requires a {branch} input", self.cfg.modality)))?;
            if input.shape != [in_ch, INPUT_HW, INPUT_HW] {
                return Err(Error::shape(
                    "forward",
                    format!("{branch} input must be [{in_ch}, {INPUT_HW}, {INPUT_HW}], got {:?}", input.shape),
                ));
            }
            let x = g.constant(input.clone());
            feats.push(self.encoder_forward(g, hooks, &nodes, branch, 12 * ord, x, mode, dropout_seed, ord as u64)?);
        }
        let merged = match feats[..] {
            [single] => single,
            [a, b] => g.concat_channels(a, b)?,
            _ => unreachable!("one or two branches"),
        };

        let d = self.cfg.attention_dim();
        let tokens = g.reshape(merged, &[d, TOKENS])?;
        let tokens = g.transpose2(tokens)?;
        let tokens = hooks.activation(g, "attn", tokens)?;
        let attn_base = self.attn_base();
        let wq = hooks.weight(g, "attn.q", nodes[attn_base])?;
        let wk = hooks.weight(g, "attn.k", nodes[attn_base + 1])?;
        let wv = hooks.weight(g, "attn.v", nodes[attn_base + 2])?;
        let attended = g.self_attention(tokens, wq, wk, wv)?;

        let flat = g.reshape(attended, &[1, TOKENS * d])?;
        let flat = hooks.activation(g, "head", flat)?;
        let hw = hooks.weight(g, "head", nodes[attn_base + 3])?;
        let out = g.linear(flat, hw, nodes[attn_base + 4])?;
        let out = g.reshape(out, &[3])?;
        Ok(ForwardPass { out, param_nodes: nodes })
    }

    fn predict(&self, evs: Option<&Tensor>, rgb: Option<&Tensor>, mode: Mode) -> Result<CollisionPrediction> {
        let mut g = Graph::new();
        let fp = self.forward_pass(&mut g, evs, rgb, mode, self.cfg.seed, &mut NoHooks)?;
        let out = g.data(fp.out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Other(format!("non-finite prediction {out:?}")));
        }
        Ok(CollisionPrediction { x_mm: out[0], y_mm: out[1], t_ms: out[2] })
    }

    /// Single-modality inference; the input is the modality's own frame.
    pub fn forward_single(&self, frame: &Tensor, mode: Mode) -> Result<CollisionPrediction> {
        match self.cfg.modality {
            Modality::Evs => self.predict(Some(frame), None, mode),
            Modality::Rgb => self.predict(None, Some(frame), mode),
            Modality::Fusion => Err(Error::invalid("forward_single", "fusion model requires both inputs")),
        }
    }

    /// Dual-modality inference.
    pub fn forward_fusion(&self, evs: &Tensor, rgb: &Tensor, mode: Mode) -> Result<CollisionPrediction> {
        if self.cfg.modality != Modality::Fusion {
            return Err(Error::invalid("forward_fusion", "not a fusion model"));
        }
        self.predict(Some(evs), Some(rgb), mode)
    }

    /// Ordered inference-time layer descriptors with the geometry needed for
    /// operation counting. ReLU and pool stages carry their conv block's
    /// name (`evs.conv3.relu`) so downstream accounting can attribute them.
    pub fn describe_layers(&self) -> Vec<LayerDesc> {
        let mut layers = Vec::new();
        for (branch, in_ch) in self.cfg.branches() {
            let mut cin = in_ch;
            let mut hw = INPUT_HW;
            for (i, &cout) in self.cfg.conv_widths.iter().enumerate() {
                let name = format!("{branch}.conv{i}");
                layers.push(LayerDesc { name: name.clone(), kind: LayerKind::Conv { cin, cout, h: hw, w: hw } });
                layers.push(LayerDesc { name: format!("{name}.relu"), kind: LayerKind::Relu { n: cout * hw * hw } });
                if i < 4 {
                    layers
                        .push(LayerDesc { name: format!("{name}.pool"), kind: LayerKind::Pool { c: cout, h: hw, w: hw } });
                    hw /= 2;
                }
                cin = cout;
            }
        }
        let d = self.cfg.attention_dim();
        layers.push(LayerDesc { name: "attn".into(), kind: LayerKind::Attention { tokens: TOKENS, dim: d } });
        layers.push(LayerDesc { name: "head".into(), kind: LayerKind::Linear { din: TOKENS * d, dout: 3 } });
        layers
    }
}

/// Inference-time layer geometry. Convolutions are 3x3 same-padding over
/// h x w; pools record their input geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { cin: usize, cout: usize, h: usize, w: usize },
    Relu { n: usize },
    Pool { c: usize, h: usize, w: usize },
    /// Single-head self-attention over `tokens` tokens of width `dim`.
    Attention { tokens: usize, dim: usize },
    Linear { din: usize, dout: usize },
}

/// A named stage from [`Model::describe_layers`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
}
