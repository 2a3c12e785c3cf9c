//! Quantization-aware training schemes and bit-packed inference.
//!
//! The step quantizer covers 2–8-bit weights and activations with learnable
//! per-channel steps (weights) and per-layer step/offset pairs
//! (activations). Four 1-bit schemes binarize the hidden convolutions:
//! plain sign·mean-magnitude with clipped straight-through gradients,
//! the standardized and non-standardized power-of-two-scale variants with a
//! progressive tanh backward, and the learnable-shift variant (RSign/RPReLU
//! plus a teacher-matching output loss). A wrapped model keeps latent
//! full-precision master weights and exports packed weights for the
//! XNOR-POPCNT kernel.
//!
//! Layer coverage: with `first_last_fp` (the default) the first convolution
//! of each branch and the output head stay full-precision. The 1-bit
//! schemes binarize convolutions only; the attention projections and head
//! remain full-precision because binarizing a softmax block feeding a
//! 3-value regression head collapses its output scale, while the
//! convolutions hold ~90% of the operations.

pub mod bitpack;
pub mod ops;
pub mod packed;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use bitpack::{binary_conv2d, pack_bits, pack_channels, pack_conv_weights, packed_dot, unpack, PackedBitTensor};
pub use ops::{
    distributional_loss, dorefa_binarize_weights, grid_bounds, irnet_binarize_weights, lsq_quantize, QuantParams,
};
pub use packed::PackedModel;

use crate::model::{CollisionPrediction, LayerHooks, Model, Param};
use crate::tensor::{Graph, Mode, NodeId, Tensor};
use crate::{Error, Result};

/// Numeric scheme of a trained network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantKind {
    Fp32,
    /// Learnable step/offset quantizer at 2–8 bits.
    LsqPlus { bits: u8 },
    /// 1-bit sign·mean(|W|) weights, clipped straight-through gradients.
    Dorefa,
    /// 1-bit standardized weights with power-of-two scales and the
    /// progressive tanh backward.
    Irnet,
    /// IRNET without weight standardization.
    IrnetStar,
    /// 1-bit with learnable activation shifts (RSign/RPReLU) and a
    /// teacher-matching output loss.
    Reactnet,
}

/// A quantization scheme plus the first/last-layer precision policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantScheme {
    pub kind: QuantKind,
    /// Keep the first convolution of each branch and the head at full
    /// precision (default true).
    pub first_last_fp: bool,
}

impl QuantScheme {
    pub fn new(kind: QuantKind) -> QuantScheme {
        QuantScheme { kind, first_last_fp: true }
    }

    pub fn fp32() -> QuantScheme {
        QuantScheme::new(QuantKind::Fp32)
    }

    pub fn validate(&self) -> Result<()> {
        if let QuantKind::LsqPlus { bits } = self.kind {
            if !(2..=8).contains(&bits) {
                return Err(Error::invalid("scheme", format!("step quantizer bits must be 2..=8, got {bits}")));
            }
        }
        Ok(())
    }

    /// True for the 1-bit schemes.
    pub fn is_binary(&self) -> bool {
        matches!(self.kind, QuantKind::Dorefa | QuantKind::Irnet | QuantKind::IrnetStar | QuantKind::Reactnet)
    }

    pub fn bits(&self) -> Option<u8> {
        match self.kind {
            QuantKind::LsqPlus { bits } => Some(bits),
            _ => None,
        }
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            QuantKind::Fp32 => write!(f, "fp32"),
            QuantKind::LsqPlus { bits } => write!(f, "lsq+:{bits}"),
            QuantKind::Dorefa => write!(f, "dorefa"),
            QuantKind::Irnet => write!(f, "irnet"),
            QuantKind::IrnetStar => write!(f, "irnet_star"),
            QuantKind::Reactnet => write!(f, "reactnet"),
        }
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<QuantScheme> {
        let kind = match s {
            "fp32" => QuantKind::Fp32,
            "dorefa" => QuantKind::Dorefa,
            "irnet" => QuantKind::Irnet,
            "irnet_star" => QuantKind::IrnetStar,
            "reactnet" => QuantKind::Reactnet,
            other => match other.strip_prefix("lsq+:") {
                Some(bits) => QuantKind::LsqPlus {
                    bits: bits.parse().map_err(|_| Error::invalid("scheme", format!("bad bit width {bits:?}")))?,
                },
                None => return Err(Error::invalid("scheme", format!("unknown scheme {s:?}"))),
            },
        };
        let scheme = QuantScheme::new(kind);
        scheme.validate()?;
        Ok(scheme)
    }
}

/// Per-channel RSign/RPReLU parameters of one binarized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ReActParams {
    pub alpha: Vec<f32>,
    pub gamma: Vec<f32>,
    pub zeta: Vec<f32>,
    pub beta: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
enum WRule {
    Lsq { s: usize, bits: u8 },
    Dorefa,
    PerChannel,
    Irnet { standardize: bool },
}

#[derive(Clone, Copy, Debug)]
enum ARule {
    Lsq { s: usize, beta: usize, bits: u8 },
    Clip05,
    Sign,
    React { alpha: usize, gamma: usize, zeta: usize, betap: usize },
}

/// One quantized layer site: conv layers carry both a weight and an
/// activation rule; attention/head carry them only under the step quantizer.
#[derive(Clone, Debug)]
struct SiteTable {
    weights: BTreeMap<String, WRule>,
    acts: BTreeMap<String, ARule>,
}

/// A model wrapped for quantization-aware training: latent full-precision
/// master weights plus the scheme's learnable quantizer parameters.
#[derive(Clone, Debug)]
pub struct QatModel {
    pub model: Model,
    pub scheme: QuantScheme,
    /// Learnable quantizer parameters (steps, offsets, activation shifts),
    /// updated by the optimizer alongside the master weights.
    pub qparams: Vec<Param>,
    sites: SiteTable,
    calibrated: bool,
    progress: f32,
    dorefa_grad_bits: Option<u8>,
}

/// The forward pass of a wrapped model: output node, master-parameter nodes
/// (aligned with `model.params`), and quantizer-parameter nodes (aligned
/// with `qparams`; `None` for parameters not touched by this pass).
pub struct QatForward {
    pub out: NodeId,
    pub param_nodes: Vec<NodeId>,
    pub qparam_nodes: Vec<Option<NodeId>>,
}

fn per_channel_std(data: &[f32], per_ch: usize) -> Vec<f32> {
    data.chunks(per_ch)
        .map(|c| {
            let n = c.len() as f32;
            let mean = c.iter().sum::<f32>() / n;
            (c.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n).sqrt()
        })
        .collect()
}

/// Wraps a built model for quantization-aware training under `scheme`.
pub fn qat_wrap(model: Model, scheme: QuantScheme) -> Result<QatModel> {
    QatModel::new(model, scheme)
}

impl QatModel {
    pub fn new(model: Model, scheme: QuantScheme) -> Result<QatModel> {
        scheme.validate()?;
        let mut qparams = Vec::new();
        let mut weights = BTreeMap::new();
        let mut acts = BTreeMap::new();

        // Conv sites: (hook name, in-channels) per branch, conv0 only when
        // the first/last policy is lifted.
        let mut conv_sites = Vec::new();
        for (branch, in_ch) in model.cfg.branches() {
            let mut cin = in_ch;
            for (i, &cout) in model.cfg.conv_widths.iter().enumerate() {
                if i > 0 || !scheme.first_last_fp {
                    conv_sites.push((format!("{branch}.conv{i}"), cin, cout));
                }
                cin = cout;
            }
        }

        match scheme.kind {
            QuantKind::Fp32 => {}
            QuantKind::LsqPlus { bits } => {
                let (_, qp_w) = ops::grid_bounds(bits, true)?;
                let d = model.cfg.attention_dim();
                let mut wsites = conv_sites.clone();
                wsites.extend([("attn.q".into(), d, d), ("attn.k".into(), d, d), ("attn.v".into(), d, d)]);
                if !scheme.first_last_fp {
                    wsites.push(("head".into(), crate::model::TOKENS * d, 3));
                }
                for (name, _, cout) in &wsites {
                    let w = &model.params[model
                        .param_index(&format!("{name}.w"))
                        .ok_or_else(|| Error::invalid("qat_wrap", format!("no parameter {name}.w")))?]
                    .tensor;
                    let steps: Vec<f32> = per_channel_std(&w.data, w.numel() / cout)
                        .iter()
                        .map(|std| (3.0 * std / qp_w.sqrt()).max(1e-6))
                        .collect();
                    weights.insert(name.clone(), WRule::Lsq { s: qparams.len(), bits });
                    qparams.push(Param { name: format!("{name}.wq.s"), tensor: Tensor::from_vec(&[*cout], steps)? });
                }
                let mut asites: Vec<String> = conv_sites.iter().map(|(n, _, _)| n.clone()).collect();
                asites.push("attn".into());
                if !scheme.first_last_fp {
                    asites.push("head".into());
                }
                for name in asites {
                    let (s, beta) = (qparams.len(), qparams.len() + 1);
                    qparams.push(Param { name: format!("{name}.aq.s"), tensor: Tensor::full(&[1], 1.0) });
                    qparams.push(Param { name: format!("{name}.aq.beta"), tensor: Tensor::zeros(&[1]) });
                    acts.insert(name, ARule::Lsq { s, beta, bits });
                }
            }
            QuantKind::Dorefa | QuantKind::Irnet | QuantKind::IrnetStar => {
                let (wrule, arule) = match scheme.kind {
                    QuantKind::Dorefa => (WRule::Dorefa, ARule::Clip05),
                    QuantKind::Irnet => (WRule::Irnet { standardize: true }, ARule::Sign),
                    _ => (WRule::Irnet { standardize: false }, ARule::Sign),
                };
                for (name, _, _) in &conv_sites {
                    weights.insert(name.clone(), wrule);
                    acts.insert(name.clone(), arule);
                }
            }
            QuantKind::Reactnet => {
                for (name, cin, _) in &conv_sites {
                    weights.insert(name.clone(), WRule::PerChannel);
                    let base = qparams.len();
                    for (suffix, init) in
                        [("rsign.alpha", 0.0), ("rprelu.gamma", 0.0), ("rprelu.zeta", 0.25), ("rprelu.beta", 0.0)]
                    {
                        qparams.push(Param { name: format!("{name}.{suffix}"), tensor: Tensor::full(&[*cin], init) });
                    }
                    acts.insert(
                        name.clone(),
                        ARule::React { alpha: base, gamma: base + 1, zeta: base + 2, betap: base + 3 },
                    );
                }
            }
        }

        Ok(QatModel {
            model,
            scheme,
            qparams,
            sites: SiteTable { weights, acts },
            calibrated: false,
            progress: 0.0,
            dorefa_grad_bits: None,
        })
    }

    /// Enables the stochastic k-bit gradient quantization variant of the
    /// sign·mean-magnitude scheme (off by default).
    pub fn with_stochastic_grad_bits(mut self, bits: u8) -> QatModel {
        self.dorefa_grad_bits = Some(bits);
        self
    }

    /// Updates the training-progress signal (0 at the first epoch, 1 at the
    /// last) driving the progressive sign backward's temperature.
    pub fn set_progress(&mut self, progress: f32) {
        self.progress = progress.clamp(0.0, 1.0);
    }

    pub fn progress(&self) -> f32 {
        self.progress
    }

    /// Marks the activation quantizers calibrated. Checkpoint loading
    /// restores learned quantizer parameters that a first-batch calibration
    /// would clobber.
    pub fn mark_calibrated(&mut self) {
        self.calibrated = true;
    }

    /// Step-quantized weight sites: parameter base name, index of the scale
    /// vector in `qparams`, and bit width. Empty for every other scheme.
    pub fn lsq_weight_sites(&self) -> Vec<(String, usize, u8)> {
        self.sites
            .weights
            .iter()
            .filter_map(|(name, rule)| match *rule {
                WRule::Lsq { s, bits } => Some((name.clone(), s, bits)),
                _ => None,
            })
            .collect()
    }

    /// Records a quantized forward pass. The first pass calibrates the
    /// activation quantizers' step/offset from the observed statistics.
    pub fn forward_pass(
        &mut self,
        g: &mut Graph,
        evs: Option<&Tensor>,
        rgb: Option<&Tensor>,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<QatForward> {
        let mut qnodes = vec![None; self.qparams.len()];
        let calibrate = !self.calibrated;
        let mut hooks = QuantHooks {
            sites: &self.sites,
            qparams: &mut self.qparams,
            qnodes: &mut qnodes,
            calibrate,
            progress: self.progress,
            dorefa_grad: self.dorefa_grad_bits.map(|b| (b, dropout_seed)),
            visit: 0,
        };
        let fp = self.model.forward_pass(g, evs, rgb, mode, dropout_seed, &mut hooks)?;
        self.calibrated = true;
        Ok(QatForward { out: fp.out, param_nodes: fp.param_nodes, qparam_nodes: qnodes })
    }

    /// Float-path inference from pre-assembled optional inputs; the wrapped
    /// model validates that the inputs match its modality.
    pub fn predict(&mut self, evs: Option<&Tensor>, rgb: Option<&Tensor>, mode: Mode) -> Result<CollisionPrediction> {
        let mut g = Graph::new();
        let seed = self.model.cfg.seed;
        let fp = self.forward_pass(&mut g, evs, rgb, mode, seed)?;
        let out = g.data(fp.out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Other(format!("non-finite quantized prediction {out:?}")));
        }
        Ok(CollisionPrediction { x_mm: out[0], y_mm: out[1], t_ms: out[2] })
    }

    /// Single-modality quantized inference on the float path.
    pub fn predict_single(&mut self, frame: &Tensor, mode: Mode) -> Result<CollisionPrediction> {
        match self.model.cfg.modality {
            crate::model::Modality::Evs => self.predict(Some(frame), None, mode),
            crate::model::Modality::Rgb => self.predict(None, Some(frame), mode),
            crate::model::Modality::Fusion => {
                Err(Error::invalid("predict_single", "fusion model requires both inputs"))
            }
        }
    }

    /// Fusion quantized inference on the float path.
    pub fn predict_fusion(&mut self, evs: &Tensor, rgb: &Tensor, mode: Mode) -> Result<CollisionPrediction> {
        if self.model.cfg.modality != crate::model::Modality::Fusion {
            return Err(Error::invalid("predict_fusion", "single-modality model takes one input"));
        }
        self.predict(Some(evs), Some(rgb), mode)
    }
}

struct QuantHooks<'a> {
    sites: &'a SiteTable,
    qparams: &'a mut Vec<Param>,
    qnodes: &'a mut Vec<Option<NodeId>>,
    calibrate: bool,
    progress: f32,
    dorefa_grad: Option<(u8, u64)>,
    visit: u64,
}

impl QuantHooks<'_> {
    fn qnode(&mut self, g: &mut Graph, idx: usize) -> NodeId {
        *self.qnodes[idx].get_or_insert_with(|| g.param(self.qparams[idx].tensor.clone()))
    }
}

impl LayerHooks for QuantHooks<'_> {
    fn weight(&mut self, g: &mut Graph, layer: &str, w: NodeId) -> Result<NodeId> {
        self.visit += 1;
        match self.sites.weights.get(layer) {
            None => Ok(w),
            Some(&WRule::Lsq { s, bits }) => {
                let s = self.qnode(g, s);
                ops::lsq_fake_quant(g, w, s, None, bits, true)
            }
            Some(&WRule::Dorefa) => {
                let grad = self.dorefa_grad.map(|(k, seed)| (k, crate::seed::derive_seed(seed, self.visit, 3)));
                ops::dorefa_weight_node(g, w, grad)
            }
            Some(&WRule::PerChannel) => ops::per_channel_weight_node(g, w),
            Some(&WRule::Irnet { standardize }) => ops::irnet_weight_node(g, w, standardize, self.progress),
        }
    }

    fn activation(&mut self, g: &mut Graph, layer: &str, x: NodeId) -> Result<NodeId> {
        match self.sites.acts.get(layer) {
            None => Ok(x),
            Some(&ARule::Lsq { s, beta, bits }) => {
                if self.calibrate {
                    // First-batch statistics: step from 3·std/sqrt(Qp),
                    // offset from the minimum, so the unsigned grid covers
                    // the observed range.
                    let data = g.data(x);
                    let n = data.len() as f32;
                    let mean = data.iter().sum::<f32>() / n;
                    let std = (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n).sqrt();
                    let min = data.iter().fold(f32::INFINITY, |a, &v| a.min(v));
                    let (_, qp) = ops::grid_bounds(bits, false)?;
                    self.qparams[s].tensor = Tensor::full(&[1], (3.0 * std / qp.sqrt()).max(1e-6));
                    self.qparams[beta].tensor = Tensor::full(&[1], if min.is_finite() { min } else { 0.0 });
                }
                let s = self.qnode(g, s);
                let beta = self.qnode(g, beta);
                ops::lsq_fake_quant(g, x, s, Some(beta), bits, false)
            }
            Some(&ARule::Clip05) => ops::dorefa_act_node(g, x),
            Some(&ARule::Sign) => ops::irnet_act_node(g, x, self.progress),
            Some(&ARule::React { alpha, gamma, zeta, betap }) => {
                let gamma = self.qnode(g, gamma);
                let zeta = self.qnode(g, zeta);
                let betap = self.qnode(g, betap);
                let alpha = self.qnode(g, alpha);
                let reshaped = ops::rprelu_node(g, x, gamma, zeta, betap)?;
                ops::rsign_node(g, reshaped, alpha)
            }
        }
    }
}

/// Bit-packed signed codes of a step-quantized weight tensor plus its
/// per-output-channel steps: the serialized form behind the 8× (4-bit) and
/// 32× (1-bit) compression guarantees.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedCodes {
    pub bits: u8,
    pub shape: Vec<usize>,
    /// Codes biased by −Qn, packed LSB-first at `bits` per value.
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
}

/// Projects weights onto the signed grid and packs the codes.
pub fn lsq_encode_weights(w: &Tensor, scales: &[f32], bits: u8) -> Result<QuantizedCodes> {
    let (qn, qp) = ops::grid_bounds(bits, true)?;
    if scales.is_empty() || w.numel() % scales.len() != 0 {
        return Err(Error::shape("lsq_encode", format!("{} scales for {} weights", scales.len(), w.numel())));
    }
    if let Some(bad) = scales.iter().find(|s| **s <= 0.0) {
        return Err(Error::invalid("lsq_encode", format!("step size must be positive, got {bad}")));
    }
    let per_ch = w.numel() / scales.len();
    let mut codes = vec![0u8; (w.numel() * bits as usize).div_ceil(8)];
    for (e, &v) in w.data.iter().enumerate() {
        let code = ((v / scales[e / per_ch]).round().clamp(qn, qp) - qn) as u32;
        let bit = e * bits as usize;
        codes[bit / 8] |= (code << (bit % 8)) as u8;
        if bit % 8 + bits as usize > 8 {
            codes[bit / 8 + 1] |= (code >> (8 - bit % 8)) as u8;
        }
    }
    Ok(QuantizedCodes { bits, shape: w.shape.clone(), codes, scales: scales.to_vec() })
}

/// Reconstructs the grid values encoded by [`lsq_encode_weights`].
pub fn lsq_decode_weights(q: &QuantizedCodes) -> Result<Tensor> {
    let (qn, _) = ops::grid_bounds(q.bits, true)?;
    let numel: usize = q.shape.iter().product();
    if q.codes.len() != (numel * q.bits as usize).div_ceil(8) {
        return Err(Error::shape("lsq_decode", format!("{} code bytes for {numel} values", q.codes.len())));
    }
    let per_ch = numel / q.scales.len().max(1);
    let mask = (1u32 << q.bits) - 1;
    let data = (0..numel)
        .map(|e| {
            let bit = e * q.bits as usize;
            let mut raw = u32::from(q.codes[bit / 8]) >> (bit % 8);
            if bit % 8 + q.bits as usize > 8 {
                raw |= u32::from(q.codes[bit / 8 + 1]) << (8 - bit % 8);
            }
            ((raw & mask) as f32 + qn) * q.scales[e / per_ch]
        })
        .collect();
    Tensor::from_vec(&q.shape, data)
}

#[cfg(test)]
mod tests {
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{Modality, ModelConfig};

    fn random_input(ch: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[ch, 80, 80], (0..ch * 6400).map(|_| rng.random_range(-1.0..1.0f32)).collect()).unwrap()
    }

    #[test]
    fn scheme_strings_round_trip_and_reject_bad_inputs() {
        for s in ["fp32", "lsq+:2", "lsq+:8", "dorefa", "irnet", "irnet_star", "reactnet"] {
            let scheme: QuantScheme = s.parse().unwrap();
            assert_eq!(scheme.to_string(), s);
            assert!(scheme.first_last_fp);
        }
        for bad in ["lsq+:1", "lsq+:9", "lsq+:x", "bnn", ""] {
            assert!(bad.parse::<QuantScheme>().is_err(), "{bad:?} must not parse");
        }
        assert!("lsq+:4".parse::<QuantScheme>().unwrap().bits() == Some(4));
        assert!("dorefa".parse::<QuantScheme>().unwrap().is_binary());
        assert!(!"fp32".parse::<QuantScheme>().unwrap().is_binary());
    }

    #[test]
    fn fp32_wrap_is_bit_identical_to_the_unwrapped_model() {
        let model = Model::new(ModelConfig::new(Modality::Evs, 1, 41)).unwrap();
        let frame = random_input(1, 1);
        let want = model.forward_single(&frame, Mode::Eval).unwrap();
        let mut qat = qat_wrap(model, QuantScheme::fp32()).unwrap();
        assert!(qat.qparams.is_empty());
        let got = qat.predict_single(&frame, Mode::Eval).unwrap();
        assert_eq!((got.x_mm, got.y_mm, got.t_ms), (want.x_mm, want.y_mm, want.t_ms));
    }

    #[test]
    fn lsq8_calibrates_activation_quantizers_on_the_first_pass_only() {
        let model = Model::new(ModelConfig::new(Modality::Evs, 1, 42)).unwrap();
        let mut qat = qat_wrap(model, "lsq+:8".parse().unwrap()).unwrap();
        let idx = qat.qparams.iter().position(|p| p.name == "evs.conv1.aq.s").unwrap();
        assert_eq!(qat.qparams[idx].tensor.data[0], 1.0, "pre-calibration placeholder step");
        let frame = random_input(1, 2);
        let pred = qat.predict_single(&frame, Mode::Eval).unwrap();
        for v in [pred.x_mm, pred.y_mm, pred.t_ms] {
            assert!(v.is_finite());
        }
        let after_first: Vec<Vec<f32>> = qat.qparams.iter().map(|p| p.tensor.data.clone()).collect();
        assert_ne!(qat.qparams[idx].tensor.data[0], 1.0, "calibration must set the step from statistics");
        for p in &qat.qparams {
            assert!(p.tensor.data.iter().all(|v| v.is_finite()), "{} not finite", p.name);
            if p.name.ends_with(".s") {
                assert!(p.tensor.data.iter().all(|v| *v > 0.0), "{} not positive", p.name);
            }
        }
        qat.predict_single(&frame, Mode::Eval).unwrap();
        let after_second: Vec<Vec<f32>> = qat.qparams.iter().map(|p| p.tensor.data.clone()).collect();
        assert_eq!(after_first, after_second, "later passes must not re-calibrate");
    }

    #[test]
    fn first_last_policy_controls_which_layers_get_quantizers() {
        let cfg = ModelConfig::new(Modality::Evs, 1, 43);
        let qat = qat_wrap(Model::new(cfg).unwrap(), "lsq+:4".parse().unwrap()).unwrap();
        let names: Vec<&str> = qat.qparams.iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"evs.conv1.wq.s"));
        assert!(names.contains(&"attn.q.wq.s"));
        assert!(names.contains(&"attn.aq.s"));
        assert!(!names.iter().any(|n| n.starts_with("evs.conv0.")), "first layer stays full-precision");
        assert!(!names.iter().any(|n| n.starts_with("head.")), "last layer stays full-precision");

        let mut scheme: QuantScheme = "lsq+:4".parse().unwrap();
        scheme.first_last_fp = false;
        let qat = qat_wrap(Model::new(cfg).unwrap(), scheme).unwrap();
        let names: Vec<&str> = qat.qparams.iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"evs.conv0.wq.s"));
        assert!(names.contains(&"head.wq.s"));
        assert!(names.contains(&"head.aq.s"));

        let qat = qat_wrap(Model::new(cfg).unwrap(), "reactnet".parse().unwrap()).unwrap();
        let names: Vec<&str> = qat.qparams.iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"evs.conv1.rsign.alpha"));
        assert!(names.contains(&"evs.conv5.rprelu.zeta"));
        assert!(!names.iter().any(|n| n.starts_with("evs.conv0.")));
        assert!(!names.iter().any(|n| n.starts_with("attn")), "attention is never binarized");
        let alpha = qat.qparams.iter().find(|p| p.name == "evs.conv2.rsign.alpha").unwrap();
        assert_eq!(alpha.tensor.shape, vec![16], "per-channel shift sized to the conv input");
    }

    #[test]
    fn qat_backward_reaches_master_weights_and_quantizer_parameters() {
        for scheme in ["lsq+:4", "dorefa", "irnet", "irnet_star", "reactnet"] {
            let mut cfg = ModelConfig::new(Modality::Evs, 1, 44);
            cfg.dropout_p = 0.0;
            let mut qat = qat_wrap(Model::new(cfg).unwrap(), scheme.parse().unwrap()).unwrap();
            let frame = random_input(1, 3);
            let mut g = Graph::new();
            let fp = qat.forward_pass(&mut g, Some(&frame), None, Mode::Train, 9).unwrap();
            let target = g.constant(Tensor::from_vec(&[3], vec![5.0, -3.0, 40.0]).unwrap());
            let loss = g.mse(fp.out, target).unwrap();
            g.backward(loss).unwrap();
            for (i, node) in fp.param_nodes.iter().enumerate() {
                assert!(g.grad(*node).is_some(), "{scheme}: master {} got no gradient", qat.model.params[i].name);
            }
            let mut any_nonzero = qat.qparams.is_empty();
            for (i, node) in fp.qparam_nodes.iter().enumerate() {
                let node = node.unwrap_or_else(|| panic!("{scheme}: {} unused in pass", qat.qparams[i].name));
                let grad = g.grad(node).unwrap_or_else(|| panic!("{scheme}: {} got no gradient", qat.qparams[i].name));
                any_nonzero |= grad.iter().any(|v| *v != 0.0);
            }
            assert!(any_nonzero, "{scheme}: all quantizer-parameter gradients vanished");
        }
    }

    #[test]
    fn quantized_predictions_stay_finite_across_schemes() {
        for scheme in ["lsq+:2", "lsq+:8", "dorefa", "irnet", "irnet_star", "reactnet"] {
            let model = Model::new(ModelConfig::new(Modality::Fusion, 1, 45)).unwrap();
            let mut qat = qat_wrap(model, scheme.parse().unwrap()).unwrap();
            let pred = qat.predict_fusion(&random_input(1, 4), &random_input(3, 5), Mode::Eval).unwrap();
            for v in [pred.x_mm, pred.y_mm, pred.t_ms] {
                assert!(v.is_finite(), "{scheme} produced {v}");
            }
        }
    }

    #[test]
    fn code_packing_round_trips_and_is_idempotent_on_grid_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for bits in [2u8, 3, 4, 5, 8] {
            let w = Tensor::from_vec(&[4, 25], (0..100).map(|_| rng.random_range(-1.0..1.0f32)).collect()).unwrap();
            let scales = vec![0.11, 0.2, 0.05, 0.4];
            let enc = lsq_encode_weights(&w, &scales, bits).unwrap();
            assert_eq!(enc.codes.len(), (100 * bits as usize).div_ceil(8));
            let dec = lsq_decode_weights(&enc).unwrap();
            assert_eq!(dec.shape, w.shape);
            let re = lsq_encode_weights(&dec, &scales, bits).unwrap();
            assert_eq!(re, enc, "re-encoding decoded grid values must be exact at {bits} bits");
        }
    }

    /// The serialized quantized payloads against their full-precision sizes:
    /// 4-bit codes within 1/8 plus per-tensor scale/header overhead, 1-bit
    /// sign payloads within 1/32 plus row padding.
    #[test]
    fn serialized_payloads_meet_the_compression_targets() {
        let model = Model::new(ModelConfig::new(Modality::Evs, 1, 47)).unwrap();
        let mut fp_total = 0usize;
        let mut lsq_total = 0usize;
        let mut lsq_overhead = 0usize;
        let mut bin_total = 0usize;
        let mut bin_overhead = 0usize;
        for p in model.params.iter().filter(|p| p.name.ends_with(".w")) {
            let numel = p.tensor.numel();
            fp_total += 4 * numel;
            let cout = p.tensor.shape[0];
            let enc = lsq_encode_weights(&p.tensor, &vec![0.1; cout], 4).unwrap();
            lsq_total += enc.codes.len();
            lsq_overhead += 4 * cout + 32;
            let (packed, _scale) = dorefa_binarize_weights(&p.tensor).unwrap();
            bin_total += packed.payload_bytes();
            bin_overhead += 4 + 32 + 8 * packed.rows;
        }
        assert!(
            lsq_total <= fp_total / 8 + lsq_overhead,
            "4-bit payload {lsq_total} exceeds {} + {lsq_overhead}",
            fp_total / 8
        );
        assert!(
            bin_total <= fp_total / 32 + bin_overhead,
            "1-bit payload {bin_total} exceeds {} + {bin_overhead}",
            fp_total / 32
        );
    }

    #[test]
    fn wrap_rejects_invalid_bit_widths() {
        let model = Model::new(ModelConfig::new(Modality::Evs, 1, 48)).unwrap();
        let err = qat_wrap(model, QuantScheme::new(QuantKind::LsqPlus { bits: 9 })).unwrap_err();
        assert!(err.to_string().contains("2..=8"), "{err}");
    }
}
