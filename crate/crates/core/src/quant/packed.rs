//! Exported 1-bit inference model running on the XNOR-POPCNT kernel.
//!
//! Export freezes a quantization-aware-trained model: binarized convolution
//! weights become packed sign bits plus their scales, the scheme's
//! activation rule is recorded per layer, and the untouched layers (first
//! convolution, attention projections, head) keep their full-precision
//! tensors. The forward pass reproduces the training-time float path — same
//! binarization thresholds, same layer order — so the two agree to float
//! rounding.

use super::bitpack::{binary_conv2d, pack_conv_weights, pack_im2col, pixel_words_by, PackedBitTensor};
use super::{ops, ARule, QatModel, QuantScheme, ReActParams, WRule};
use crate::model::{CollisionPrediction, Modality, ModelConfig, INPUT_HW, TOKENS};
use crate::tensor::kernels::{conv2d_fwd, maxpool2_fwd, mm_nn, mm_nt, softmax_rows_fwd};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// How a binarized convolution's input maps to ±1 bits.
#[derive(Clone, Debug, PartialEq)]
pub enum ActRule {
    /// +1 where clip(x,0,1) rounds up (threshold at 0.5).
    Clip05,
    /// Plain sign; 0 maps to +1.
    Sign,
    /// RPReLU reshaping, then the per-channel shifted sign (+1 where
    /// reshaped value exceeds α).
    React(ReActParams),
}

/// One exported convolution running on packed bits.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryConvLayer {
    pub act: ActRule,
    /// Sign bits, one row per output channel in kernel bit order.
    pub weights: PackedBitTensor,
    /// Per-output-channel scales (a single entry broadcasts).
    pub scales: Vec<f32>,
    pub bias: Vec<f32>,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PackedLayer {
    /// Full-precision convolution (first layer under the default policy).
    Fp { w: Tensor, b: Tensor },
    Binary(BinaryConvLayer),
}

/// A frozen 1-bit model: packed encoder convolutions plus full-precision
/// attention and head.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedModel {
    pub cfg: ModelConfig,
    pub scheme: QuantScheme,
    /// Per branch (same order as the config's branches), six conv layers.
    pub branches: Vec<Vec<PackedLayer>>,
    pub attn: [Tensor; 3],
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl QatModel {
    /// Freezes the wrapped model into packed 1-bit inference weights.
    /// Only the 1-bit schemes have a packed execution path; the step
    /// quantizer's integer kernels are out of scope (its codes still
    /// serialize compactly via the checkpoint).
    pub fn export(&self) -> Result<PackedModel> {
        if !self.scheme.is_binary() {
            return Err(Error::invalid(
                "export",
                format!("scheme {} has no packed execution path; only 1-bit schemes export", self.scheme),
            ));
        }
        let cfg = self.model.cfg;
        let mut branches = Vec::new();
        for (branch, _) in cfg.branches() {
            let mut layers = Vec::new();
            for i in 0..6 {
                let name = format!("{branch}.conv{i}");
                let w = &self.model.params[self.model.param_index(&format!("{name}.w")).expect("fixed layout")].tensor;
                let b = &self.model.params[self.model.param_index(&format!("{name}.b")).expect("fixed layout")].tensor;
                let Some(wrule) = self.sites.weights.get(&name) else {
                    layers.push(PackedLayer::Fp { w: w.clone(), b: b.clone() });
                    continue;
                };
                let (signs, scales) = match *wrule {
                    WRule::Dorefa => {
                        let (signs, scale) = ops::dorefa_fake(&w.data);
                        (signs, vec![scale])
                    }
                    WRule::PerChannel => ops::per_channel_fake(&w.data, w.numel() / w.shape[0]),
                    WRule::Irnet { standardize } => {
                        let (signs, scale) = ops::irnet_fake(&w.data, standardize)?;
                        (signs, vec![scale])
                    }
                    WRule::Lsq { .. } => unreachable!("step quantizer rejected above"),
                };
                let act = match self.sites.acts.get(&name) {
                    Some(&ARule::Clip05) => ActRule::Clip05,
                    Some(&ARule::Sign) => ActRule::Sign,
                    Some(&ARule::React { alpha, gamma, zeta, betap }) => ActRule::React(ReActParams {
                        alpha: self.qparams[alpha].tensor.data.clone(),
                        gamma: self.qparams[gamma].tensor.data.clone(),
                        zeta: self.qparams[zeta].tensor.data.clone(),
                        beta: self.qparams[betap].tensor.data.clone(),
                    }),
                    _ => return Err(Error::invalid("export", format!("{name} has weights but no activation rule"))),
                };
                layers.push(PackedLayer::Binary(BinaryConvLayer {
                    act,
                    weights: pack_conv_weights(&Tensor::from_vec(&w.shape, signs)?)?,
                    scales,
                    bias: b.data.clone(),
                    cin: w.shape[1],
                    cout: w.shape[0],
                }));
            }
            branches.push(layers);
        }
        let grab = |name: &str| {
            self.model.params[self.model.param_index(name).expect("fixed layout")].tensor.clone()
        };
        Ok(PackedModel {
            cfg,
            scheme: self.scheme,
            branches,
            attn: [grab("attn.q.w"), grab("attn.k.w"), grab("attn.v.w")],
            head_w: grab("head.w"),
            head_b: grab("head.b"),
        })
    }
}

fn binarize_and_pack(x: &[f32], c: usize, h: usize, w: usize, act: &ActRule) -> Result<PackedBitTensor> {
    let hw = h * w;
    let words = match act {
        ActRule::Clip05 => pixel_words_by(c, h, w, |ci, pix| x[ci * hw + pix] >= 0.5)?,
        ActRule::Sign => pixel_words_by(c, h, w, |ci, pix| x[ci * hw + pix] >= 0.0)?,
        ActRule::React(p) => {
            let reshaped = ops::rprelu_values(x, &p.gamma, &p.zeta, &p.beta, hw);
            pixel_words_by(c, h, w, |ci, pix| reshaped[ci * hw + pix] > p.alpha[ci])?
        }
    };
    Ok(pack_im2col(&words, c, h, w))
}

impl PackedModel {
    fn branch_forward(&self, bi: usize, input: &Tensor) -> Result<Vec<f32>> {
        let mut x = input.data.clone();
        let (mut c, mut h, mut w) = (input.shape[0], INPUT_HW, INPUT_HW);
        for (i, layer) in self.branches[bi].iter().enumerate() {
            let cout;
            let mut out;
            match layer {
                PackedLayer::Fp { w: wt, b } => {
                    cout = wt.shape[0];
                    out = vec![0.0f32; cout * h * w];
                    conv2d_fwd(&x, &wt.data, &b.data, c, h, w, cout, &mut out);
                }
                PackedLayer::Binary(l) => {
                    cout = l.cout;
                    let packed = binarize_and_pack(&x, c, h, w, &l.act)?;
                    out = binary_conv2d(&packed, &l.weights, &l.scales)?.data;
                    for (ch, bias) in l.bias.iter().enumerate() {
                        for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                            *v += bias;
                        }
                    }
                }
            }
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            c = cout;
            if i < 4 {
                let mut pooled = vec![0.0f32; c * (h / 2) * (w / 2)];
                let mut argmax = vec![0u32; pooled.len()];
                maxpool2_fwd(&out, c, h, w, &mut pooled, &mut argmax);
                out = pooled;
                h /= 2;
                w /= 2;
            }
            x = out;
        }
        Ok(x)
    }

    fn head(&self, feat: &[f32]) -> CollisionPrediction {
        let d = self.cfg.attention_dim();
        // Feature map [D, 5, 5] to row-major tokens [25, D].
        let mut tokens = vec![0.0f32; TOKENS * d];
        for j in 0..d {
            for t in 0..TOKENS {
                tokens[t * d + j] = feat[j * TOKENS + t];
            }
        }
        let (mut q, mut k, mut v) = (vec![0.0f32; TOKENS * d], vec![0.0f32; TOKENS * d], vec![0.0f32; TOKENS * d]);
        mm_nn(&tokens, &self.attn[0].data, TOKENS, d, d, &mut q);
        mm_nn(&tokens, &self.attn[1].data, TOKENS, d, d, &mut k);
        mm_nn(&tokens, &self.attn[2].data, TOKENS, d, d, &mut v);
        let mut scores = vec![0.0f32; TOKENS * TOKENS];
        mm_nt(&q, &k, TOKENS, d, TOKENS, &mut scores);
        let inv = 1.0 / (d as f32).sqrt();
        for s in &mut scores {
            *s *= inv;
        }
        let mut attn = vec![0.0f32; TOKENS * TOKENS];
        softmax_rows_fwd(&scores, TOKENS, TOKENS, &mut attn);
        let mut mixed = vec![0.0f32; TOKENS * d];
        mm_nn(&attn, &v, TOKENS, TOKENS, d, &mut mixed);
        let mut out = vec![0.0f32; 3];
        mm_nt(&mixed, &self.head_w.data, 1, TOKENS * d, 3, &mut out);
        CollisionPrediction {
            x_mm: out[0] + self.head_b.data[0],
            y_mm: out[1] + self.head_b.data[1],
            t_ms: out[2] + self.head_b.data[2],
        }
    }

    fn check_input(&self, name: &str, input: &Tensor, ch: usize) -> Result<()> {
        if input.shape != [ch, INPUT_HW, INPUT_HW] {
            return Err(Error::shape(
                "packed_forward",
                format!("{name} input must be [{ch}, {INPUT_HW}, {INPUT_HW}], got {:?}", input.shape),
            ));
        }
        Ok(())
    }

    /// Single-modality packed inference.
    pub fn forward_single(&self, frame: &Tensor) -> Result<CollisionPrediction> {
        let branches = self.cfg.branches();
        if self.cfg.modality == Modality::Fusion {
            return Err(Error::invalid("packed_forward", "fusion model requires both inputs"));
        }
        self.check_input(branches[0].0, frame, branches[0].1)?;
        let feat = self.branch_forward(0, frame)?;
        Ok(self.head(&feat))
    }

    /// Fusion packed inference: per-branch encoders, channel concatenation,
    /// shared attention head.
    pub fn forward_fusion(&self, evs: &Tensor, rgb: &Tensor) -> Result<CollisionPrediction> {
        if self.cfg.modality != Modality::Fusion {
            return Err(Error::invalid("packed_forward", "single-modality model takes one input"));
        }
        let branches = self.cfg.branches();
        self.check_input("evs", evs, branches[0].1)?;
        self.check_input("rgb", rgb, branches[1].1)?;
        let mut feat = self.branch_forward(0, evs)?;
        feat.extend(self.branch_forward(1, rgb)?);
        Ok(self.head(&feat))
    }
}

#[cfg(test)]
mod tests {
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::Model;
    use crate::quant::{qat_wrap, QuantScheme};
    use crate::tensor::Mode;

    fn random_input(ch: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[ch, 80, 80], (0..ch * 6400).map(|_| rng.random_range(-1.0..1.0f32)).collect()).unwrap()
    }

    /// At zero-bias initialization a ±1 conv sum can land exactly on a
    /// binarization threshold, where the two paths' different summation
    /// orders legitimately round to opposite sides and flip a bit. Trained
    /// checkpoints have nonzero biases, so the equivalence tests move the
    /// model off the tie points the same way.
    fn detie_biases(model: &mut Model, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut model.params {
            if p.name.contains(".conv") && p.name.ends_with(".b") {
                for v in &mut p.tensor.data {
                    let mag = rng.random_range(0.02..0.1f32);
                    *v = if rng.random::<bool>() { mag } else { -mag };
                }
            }
        }
    }

    #[test]
    fn only_one_bit_schemes_export() {
        for scheme in ["fp32", "lsq+:4"] {
            let model = Model::new(ModelConfig::new(Modality::Evs, 1, 61)).unwrap();
            let qat = qat_wrap(model, scheme.parse().unwrap()).unwrap();
            let err = qat.export().unwrap_err();
            assert!(err.to_string().contains("1-bit"), "{err}");
        }
    }

    #[test]
    fn export_keeps_the_first_conv_full_precision_and_binarizes_the_rest() {
        let model = Model::new(ModelConfig::new(Modality::Evs, 1, 62)).unwrap();
        let qat = qat_wrap(model, "irnet".parse().unwrap()).unwrap();
        let packed = qat.export().unwrap();
        assert_eq!(packed.branches.len(), 1);
        assert!(matches!(packed.branches[0][0], PackedLayer::Fp { .. }));
        for (i, layer) in packed.branches[0].iter().enumerate().skip(1) {
            let PackedLayer::Binary(l) = layer else { panic!("conv{i} must be binarized") };
            assert_eq!(l.act, ActRule::Sign);
            let log = l.scales[0].log2();
            assert_eq!(log, log.round(), "conv{i} scale {} is not a power of two", l.scales[0]);
        }
    }

    /// Dual-path contract: the packed XNOR forward reproduces the
    /// quantization-aware float path within 1e-4 per output.
    #[test]
    fn packed_forward_matches_the_float_path_for_every_binary_scheme() {
        for scheme in ["dorefa", "irnet", "irnet_star", "reactnet"] {
            let mut model = Model::new(ModelConfig::new(Modality::Evs, 1, 63)).unwrap();
            detie_biases(&mut model, 100);
            let mut qat = qat_wrap(model, scheme.parse::<QuantScheme>().unwrap()).unwrap();
            let frame = random_input(1, 7);
            let float_path = qat.predict_single(&frame, Mode::Eval).unwrap();
            let packed = qat.export().unwrap();
            let bit_path = packed.forward_single(&frame).unwrap();
            for (a, b) in [
                (float_path.x_mm, bit_path.x_mm),
                (float_path.y_mm, bit_path.y_mm),
                (float_path.t_ms, bit_path.t_ms),
            ] {
                assert!((a - b).abs() < 1e-4, "{scheme}: float {a} vs packed {b}");
            }
        }
    }

    #[test]
    fn packed_fusion_forward_matches_the_float_path() {
        let mut model = Model::new(ModelConfig::new(Modality::Fusion, 1, 64)).unwrap();
        detie_biases(&mut model, 101);
        let mut qat = qat_wrap(model, "irnet".parse::<QuantScheme>().unwrap()).unwrap();
        let (evs, rgb) = (random_input(1, 8), random_input(3, 9));
        let float_path = qat.predict_fusion(&evs, &rgb, Mode::Eval).unwrap();
        let packed = qat.export().unwrap();
        let bit_path = packed.forward_fusion(&evs, &rgb).unwrap();
        for (a, b) in
            [(float_path.x_mm, bit_path.x_mm), (float_path.y_mm, bit_path.y_mm), (float_path.t_ms, bit_path.t_ms)]
        {
            assert!((a - b).abs() < 1e-4, "float {a} vs packed {b}");
        }
        assert!(packed.forward_single(&evs).is_err(), "fusion packed model must demand both inputs");
    }

    #[test]
    fn packed_forward_is_deterministic_and_shape_checked() {
        let model = Model::new(ModelConfig::new(Modality::Evs, 1, 65)).unwrap();
        let qat = qat_wrap(model, "dorefa".parse::<QuantScheme>().unwrap()).unwrap();
        let packed = qat.export().unwrap();
        let frame = random_input(1, 10);
        let a = packed.forward_single(&frame).unwrap();
        let b = packed.forward_single(&frame).unwrap();
        assert_eq!((a.x_mm, a.y_mm, a.t_ms), (b.x_mm, b.y_mm, b.t_ms));
        let bad = Tensor::zeros(&[2, 80, 80]);
        assert!(packed.forward_single(&bad).is_err());
    }
}

