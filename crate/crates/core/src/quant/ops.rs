//! Fake-quantization graph operations and their custom backward rules.
//!
//! Each quantizer computes its forward values eagerly (the graph stores
//! realized tensors) and registers a backward rule implementing the scheme's
//! surrogate gradient: clipped straight-through for the step quantizer and
//! DoReFa, the progressive tanh approximation for the IRNet sign, and the
//! piecewise-polynomial approximation for RSign. Sign conventions: weight
//! binarization maps 0 to +1; RSign maps x = α to −1.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, GraphOp, NodeId, Tensor};
use crate::{Error, Result};

/// Learnable quantizer parameters for one tensor: positive step size and
/// offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub s: f32,
    pub beta: f32,
}

/// Grid bounds for a `bits`-wide code: signed `[−2^(b−1), 2^(b−1)−1]`,
/// unsigned `[0, 2^b−1]`.
pub fn grid_bounds(bits: u8, signed: bool) -> Result<(f32, f32)> {
    if !(2..=8).contains(&bits) {
        return Err(Error::invalid("quantize", format!("bits must be 2..=8, got {bits}")));
    }
    Ok(if signed {
        (-(1i32 << (bits - 1)) as f32, ((1i32 << (bits - 1)) - 1) as f32)
    } else {
        (0.0, ((1i32 << bits) - 1) as f32)
    })
}

fn lsq_values(x: &[f32], s: &[f32], beta: Option<&[f32]>, per_ch: usize, qn: f32, qp: f32) -> Vec<f32> {
    x.iter()
        .enumerate()
        .map(|(e, &v)| {
            let c = e / per_ch;
            let b = beta.map_or(0.0, |b| b[c]);
            ((v - b) / s[c]).round().clamp(qn, qp) * s[c] + b
        })
        .collect()
}

/// Step quantizer: `x̂ = clamp(round((x−β)/s), Qn, Qp)·s + β` with a scalar
/// step and offset.
pub fn lsq_quantize(x: &Tensor, p: &QuantParams, bits: u8, signed: bool) -> Result<Tensor> {
    if p.s <= 0.0 {
        return Err(Error::invalid("lsq_quantize", format!("step size must be positive, got {}", p.s)));
    }
    let (qn, qp) = grid_bounds(bits, signed)?;
    let data = lsq_values(&x.data, &[p.s], Some(&[p.beta]), x.numel().max(1), qn, qp);
    Tensor::from_vec(&x.shape, data)
}

/// Backward of the step quantizer: straight-through to x inside [Qn,Qp],
/// zero outside; step and offset receive their surrogate gradients scaled by
/// `1/sqrt(count·Qp)` (count = elements per channel).
struct LsqOp {
    qn: f32,
    qp: f32,
    per_ch: usize,
}

impl GraphOp for LsqOp {
    fn name(&self) -> &'static str {
        "lsq_fake_quant"
    }

    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let x = &inputs[0].data;
        let s = &inputs[1].data;
        let beta = inputs.get(2).map(|b| &b.data);
        let norm = 1.0 / (self.per_ch as f32 * self.qp).sqrt();
        let mut dx = needs[0].then(|| vec![0.0f32; x.len()]);
        let mut ds = needs[1].then(|| vec![0.0f32; s.len()]);
        let mut db = needs.get(2).copied().unwrap_or(false).then(|| vec![0.0f32; s.len()]);
        for (e, (&xv, &gv)) in x.iter().zip(g).enumerate() {
            let c = e / self.per_ch;
            let b = beta.map_or(0.0, |b| b[c]);
            let v = (xv - b) / s[c];
            if let Some(ds) = ds.as_mut() {
                let d = if v < self.qn {
                    self.qn
                } else if v > self.qp {
                    self.qp
                } else {
                    v.round() - v
                };
                ds[c] += gv * d * norm;
            }
            if (self.qn..=self.qp).contains(&v) {
                if let Some(dx) = dx.as_mut() {
                    dx[e] = gv;
                }
            } else if let Some(db) = db.as_mut() {
                db[c] += gv * norm;
            }
        }
        let mut out = vec![dx, ds];
        if inputs.len() > 2 {
            out.push(db);
        }
        out
    }
}

/// Records a fake-quantization node. `s` (and `beta`, when given) are
/// `[channels]`-shaped learnable nodes; x's leading `numel/channels` block
/// per channel shares one step. Weights pass `beta = None` (symmetric grid).
pub fn lsq_fake_quant(g: &mut Graph, x: NodeId, s: NodeId, beta: Option<NodeId>, bits: u8, signed: bool) -> Result<NodeId> {
    let (qn, qp) = grid_bounds(bits, signed)?;
    let ch = g.tensor(s).numel();
    let n = g.tensor(x).numel();
    if ch == 0 || n % ch != 0 {
        return Err(Error::shape("lsq_fake_quant", format!("{ch} channels do not divide {n} elements")));
    }
    if let Some(b) = beta {
        if g.tensor(b).numel() != ch {
            return Err(Error::shape("lsq_fake_quant", "step and offset channel counts differ"));
        }
    }
    if let Some(&bad) = g.data(s).iter().find(|&&v| v <= 0.0) {
        return Err(Error::invalid("lsq_fake_quant", format!("step size must be positive, got {bad}")));
    }
    let per_ch = n / ch;
    let data = lsq_values(g.data(x), g.data(s), beta.map(|b| g.data(b)), per_ch, qn, qp);
    let out = Tensor::from_vec(&g.shape(x).to_vec(), data)?;
    let mut inputs = vec![x, s];
    inputs.extend(beta);
    Ok(g.push(out, Box::new(LsqOp { qn, qp, per_ch }), inputs))
}

/// Straight-through backward clipped to an input range: gradient passes
/// where `lo ≤ x ≤ hi`, is zero elsewhere. Forward values are supplied by
/// the builder (binarized weights or activations).
struct SteClipOp {
    lo: f32,
    hi: f32,
    /// Stochastic k-bit gradient quantization (DoReFa's backward pass),
    /// applied before the clip mask when set.
    grad_bits: Option<(u8, u64)>,
}

impl GraphOp for SteClipOp {
    fn name(&self) -> &'static str {
        "ste_clip"
    }

    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            let quantized;
            let g = match self.grad_bits {
                Some((k, seed)) => {
                    quantized = stochastic_grad_quant(g, k, seed);
                    &quantized[..]
                }
                None => g,
            };
            inputs[0]
                .data
                .iter()
                .zip(g)
                .map(|(&x, &gv)| if (self.lo..=self.hi).contains(&x) { gv } else { 0.0 })
                .collect()
        })]
    }
}

/// Unbiased stochastic rounding of a gradient to k-bit resolution over
/// [−max|g|, max|g|].
fn stochastic_grad_quant(g: &[f32], k: u8, seed: u64) -> Vec<f32> {
    let m = g.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
    if m == 0.0 {
        return vec![0.0; g.len()];
    }
    let levels = ((1u32 << k) - 1) as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.iter()
        .map(|&v| {
            let r = (v / (2.0 * m) + 0.5) * levels;
            let q = (r + rng.random::<f32>()).floor().clamp(0.0, levels) / levels;
            2.0 * m * (q - 0.5)
        })
        .collect()
}

fn sgn(v: f32) -> f32 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub(crate) fn dorefa_fake(w: &[f32]) -> (Vec<f32>, f32) {
    let scale = w.iter().map(|v| v.abs()).sum::<f32>() / w.len() as f32;
    (w.iter().map(|&v| sgn(v)).collect(), scale)
}

pub(crate) fn per_channel_fake(w: &[f32], per_ch: usize) -> (Vec<f32>, Vec<f32>) {
    let signs = w.iter().map(|&v| sgn(v)).collect();
    let scales = w.chunks(per_ch).map(|c| c.iter().map(|v| v.abs()).sum::<f32>() / per_ch as f32).collect();
    (signs, scales)
}

pub(crate) fn irnet_fake(w: &[f32], standardize: bool) -> Result<(Vec<f32>, f32)> {
    let wp: Vec<f32> = if standardize {
        // Moments in f64 so a constant tensor yields exactly zero variance
        // instead of f32 accumulation residue.
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
        if var == 0.0 {
            return Err(Error::invalid("irnet_binarize", "weight standard deviation is zero (degenerate layer)"));
        }
        let std = var.sqrt();
        w.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect()
    } else {
        w.to_vec()
    };
    let m = wp.iter().map(|v| v.abs()).sum::<f32>() / wp.len() as f32;
    if m == 0.0 {
        return Err(Error::invalid("irnet_binarize", "all-zero weights have no representable scale"));
    }
    let scale = (m.log2().round()).exp2();
    Ok((wp.iter().map(|&v| sgn(v)).collect(), scale))
}

/// DoReFa weight binarization for export: sign bits plus the per-tensor
/// scale `mean(|W|)`.
pub fn dorefa_binarize_weights(w: &Tensor) -> Result<(super::bitpack::PackedBitTensor, f32)> {
    if w.numel() == 0 {
        return Err(Error::invalid("dorefa_binarize", "empty weight tensor"));
    }
    let (signs, scale) = dorefa_fake(&w.data);
    Ok((super::bitpack::pack_bits(&Tensor::from_vec(&w.shape, signs)?)?, scale))
}

/// IRNet weight binarization for export: sign bits of the (optionally
/// standardized) weights plus a power-of-two scale
/// `2^round(log2(mean|W′|))`.
pub fn irnet_binarize_weights(w: &Tensor, standardize: bool) -> Result<(super::bitpack::PackedBitTensor, f32)> {
    if w.numel() == 0 {
        return Err(Error::invalid("irnet_binarize", "empty weight tensor"));
    }
    let (signs, scale) = irnet_fake(&w.data, standardize)?;
    Ok((super::bitpack::pack_bits(&Tensor::from_vec(&w.shape, signs)?)?, scale))
}

/// DoReFa weight fake-quantization node: `sign(w)·mean(|w|)` forward,
/// straight-through backward clipped at |w| ≤ 1. `grad_bits` enables the
/// stochastic gradient quantization variant (off by default upstream).
pub fn dorefa_weight_node(g: &mut Graph, w: NodeId, grad_bits: Option<(u8, u64)>) -> Result<NodeId> {
    let (signs, scale) = dorefa_fake(g.data(w));
    let out = Tensor::from_vec(&g.shape(w).to_vec(), signs.iter().map(|v| v * scale).collect())?;
    Ok(g.push(out, Box::new(SteClipOp { lo: -1.0, hi: 1.0, grad_bits }), vec![w]))
}

/// Per-output-channel sign·mean(|w_c|) fake quantization (ReActNet-style
/// weights), straight-through backward clipped at |w| ≤ 1.
pub fn per_channel_weight_node(g: &mut Graph, w: NodeId) -> Result<NodeId> {
    let shape = g.shape(w).to_vec();
    let ch = shape[0];
    let (signs, scales) = per_channel_fake(g.data(w), g.tensor(w).numel() / ch);
    let per_ch = signs.len() / ch;
    let data = signs.iter().enumerate().map(|(e, v)| v * scales[e / per_ch]).collect();
    Ok(g.push(Tensor::from_vec(&shape, data)?, Box::new(SteClipOp { lo: -1.0, hi: 1.0, grad_bits: None }), vec![w]))
}

/// DoReFa 1-bit activation: +1 where clip(x,0,1) rounds up, −1 elsewhere;
/// straight-through backward clipped to the [0,1] window.
pub fn dorefa_act_node(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let data = g.data(x).iter().map(|&v| if v >= 0.5 { 1.0 } else { -1.0 }).collect();
    let out = Tensor::from_vec(&g.shape(x).to_vec(), data)?;
    Ok(g.push(out, Box::new(SteClipOp { lo: 0.0, hi: 1.0, grad_bits: None }), vec![x]))
}

/// The error-decay estimator schedule: training progress p ∈ [0,1] maps to
/// temperature t = 10^(−1+2p), slope factor k = max(1/t, 1).
pub fn ede_coeffs(progress: f32) -> (f32, f32) {
    let t = 10f32.powf(-1.0 + 2.0 * progress.clamp(0.0, 1.0));
    (t, (1.0 / t).max(1.0))
}

/// IRNet sign with the progressive tanh backward:
/// `d/dx ≈ k·t·(1 − tanh²(t·x))`.
struct EdeSignOp {
    t: f32,
    k: f32,
}

impl GraphOp for EdeSignOp {
    fn name(&self) -> &'static str {
        "ede_sign"
    }

    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        vec![needs[0].then(|| {
            inputs[0]
                .data
                .iter()
                .zip(g)
                .map(|(&x, &gv)| {
                    let th = (self.t * x).tanh();
                    gv * self.k * self.t * (1.0 - th * th)
                })
                .collect()
        })]
    }
}

/// IRNet weight fake-quantization node: sign of the (optionally
/// standardized) weights times the power-of-two scale, EDE backward
/// evaluated at the raw weights.
pub fn irnet_weight_node(g: &mut Graph, w: NodeId, standardize: bool, progress: f32) -> Result<NodeId> {
    let (signs, scale) = irnet_fake(g.data(w), standardize)?;
    let out = Tensor::from_vec(&g.shape(w).to_vec(), signs.iter().map(|v| v * scale).collect())?;
    let (t, k) = ede_coeffs(progress);
    Ok(g.push(out, Box::new(EdeSignOp { t, k }), vec![w]))
}

/// IRNet 1-bit activation: plain sign (0 maps to +1), EDE backward.
pub fn irnet_act_node(g: &mut Graph, x: NodeId, progress: f32) -> Result<NodeId> {
    let data = g.data(x).iter().map(|&v| sgn(v)).collect();
    let out = Tensor::from_vec(&g.shape(x).to_vec(), data)?;
    let (t, k) = ede_coeffs(progress);
    Ok(g.push(out, Box::new(EdeSignOp { t, k }), vec![x]))
}

/// The piecewise-polynomial surrogate derivative of sign used by RSign:
/// 2+2u on [−1,0), 2−2u on [0,1), 0 outside.
fn approx_sign_grad(u: f32) -> f32 {
    if (-1.0..0.0).contains(&u) {
        2.0 + 2.0 * u
    } else if (0.0..1.0).contains(&u) {
        2.0 - 2.0 * u
    } else {
        0.0
    }
}

/// RSign: per-channel shifted sign, +1 where x > α.
struct RSignOp {
    per_ch: usize,
}

impl GraphOp for RSignOp {
    fn name(&self) -> &'static str {
        "rsign"
    }

    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let x = &inputs[0].data;
        let alpha = &inputs[1].data;
        let mut dx = needs[0].then(|| vec![0.0f32; x.len()]);
        let mut da = needs[1].then(|| vec![0.0f32; alpha.len()]);
        for (e, (&xv, &gv)) in x.iter().zip(g).enumerate() {
            let c = e / self.per_ch;
            let d = gv * approx_sign_grad(xv - alpha[c]);
            if let Some(dx) = dx.as_mut() {
                dx[e] = d;
            }
            if let Some(da) = da.as_mut() {
                da[c] -= d;
            }
        }
        vec![dx, da]
    }
}

fn check_channels(op: &'static str, g: &Graph, x: NodeId, p: NodeId) -> Result<usize> {
    let ch = g.tensor(p).numel();
    let n = g.tensor(x).numel();
    if ch == 0 || n % ch != 0 {
        return Err(Error::shape(op, format!("{ch} channel parameters do not divide {n} elements")));
    }
    Ok(n / ch)
}

/// Records an RSign node with learnable per-channel shift α.
pub fn rsign_node(g: &mut Graph, x: NodeId, alpha: NodeId) -> Result<NodeId> {
    let per_ch = check_channels("rsign", g, x, alpha)?;
    let a = g.data(alpha).to_vec();
    let data = g.data(x).iter().enumerate().map(|(e, &v)| if v > a[e / per_ch] { 1.0 } else { -1.0 }).collect();
    let out = Tensor::from_vec(&g.shape(x).to_vec(), data)?;
    Ok(g.push(out, Box::new(RSignOp { per_ch }), vec![x, alpha]))
}

/// RPReLU: `(x−γ)·1[x>γ] + ζ·(x−γ)·1[x≤γ] + β′` with per-channel learnable
/// γ, ζ, β′.
struct RPReluOp {
    per_ch: usize,
}

impl GraphOp for RPReluOp {
    fn name(&self) -> &'static str {
        "rprelu"
    }

    fn backward(&self, _out: &Tensor, g: &[f32], inputs: &[&Tensor], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
        let x = &inputs[0].data;
        let gamma = &inputs[1].data;
        let zeta = &inputs[2].data;
        let ch = gamma.len();
        let mut dx = needs[0].then(|| vec![0.0f32; x.len()]);
        let mut dgamma = needs[1].then(|| vec![0.0f32; ch]);
        let mut dzeta = needs[2].then(|| vec![0.0f32; ch]);
        let mut dbeta = needs[3].then(|| vec![0.0f32; ch]);
        for (e, (&xv, &gv)) in x.iter().zip(g).enumerate() {
            let c = e / self.per_ch;
            let slope = if xv > gamma[c] { 1.0 } else { zeta[c] };
            if let Some(dx) = dx.as_mut() {
                dx[e] = gv * slope;
            }
            if let Some(dgamma) = dgamma.as_mut() {
                dgamma[c] -= gv * slope;
            }
            if let Some(dzeta) = dzeta.as_mut() {
                if xv <= gamma[c] {
                    dzeta[c] += gv * (xv - gamma[c]);
                }
            }
            if let Some(dbeta) = dbeta.as_mut() {
                dbeta[c] += gv;
            }
        }
        vec![dx, dgamma, dzeta, dbeta]
    }
}

pub(crate) fn rprelu_values(x: &[f32], gamma: &[f32], zeta: &[f32], betap: &[f32], per_ch: usize) -> Vec<f32> {
    x.iter()
        .enumerate()
        .map(|(e, &v)| {
            let c = e / per_ch;
            let u = v - gamma[c];
            if u > 0.0 { u + betap[c] } else { zeta[c] * u + betap[c] }
        })
        .collect()
}

/// Records an RPReLU node with learnable per-channel γ, ζ, β′.
pub fn rprelu_node(g: &mut Graph, x: NodeId, gamma: NodeId, zeta: NodeId, betap: NodeId) -> Result<NodeId> {
    let per_ch = check_channels("rprelu", g, x, gamma)?;
    for p in [zeta, betap] {
        if g.tensor(p).numel() != g.tensor(gamma).numel() {
            return Err(Error::shape("rprelu", "parameter channel counts differ"));
        }
    }
    let data = rprelu_values(g.data(x), g.data(gamma), g.data(zeta), g.data(betap), per_ch);
    let out = Tensor::from_vec(&g.shape(x).to_vec(), data)?;
    Ok(g.push(out, Box::new(RPReluOp { per_ch }), vec![x, gamma, zeta, betap]))
}

/// Output-matching loss against a frozen full-precision teacher: the mean
/// squared difference of the two networks' predictions. The training loop
/// adds it to the task loss with weight λ.
pub fn distributional_loss(g: &mut Graph, student: NodeId, teacher: NodeId) -> Result<NodeId> {
    if g.shape(student) != g.shape(teacher) {
        return Err(Error::shape(
            "distributional_loss",
            format!("student {:?} vs teacher {:?}", g.shape(student), g.shape(teacher)),
        ));
    }
    g.mse(student, teacher)
}
