//! Versioned binary model checkpoints.
//!
//! Two little-endian containers share one header: the training checkpoint
//! (magic "EVFC") carries every master parameter and quantizer parameter as
//! raw f32 tensors and reloads bit-exactly; the quantized export (magic
//! "EVFQ") carries compressed weights — packed sign bits for the 1-bit
//! schemes, integer codes for the step quantizer — next to the untouched
//! full-precision tensors.
//!
//! Header (both formats): magic, version u16, modality u8 (0 evs / 1 rgb /
//! 2 fusion), event and RGB input channels u32, six convolution widths u32,
//! dropout f32, parameter-init seed u64, scheme kind u8 (0 fp32 / 1 lsq+ /
//! 2 dorefa / 3 irnet / 4 irnet* / 5 reactnet), step bits u8, first/last
//! full-precision flag u8, window length ms u32, stacked windows u16, event
//! clip i32, label mean and std as 3+3 f32. The window and clip fields make
//! a checkpoint self-describing: inference rebuilds the exact inputs the
//! model was trained on.
//!
//! "EVFC" body: training progress f32, parameter and quantizer-parameter
//! counts u32, then each parameter as a name (u16 length + UTF-8) and a
//! tensor (rank u8, dims u32, raw f32 data).
//!
//! "EVFQ" body: payload tag u8. Tag 1 (1-bit schemes): branch count u8,
//! then per branch six layers each tagged 0 (full precision: weight and
//! bias tensors) or 1 (binary: activation rule u8 — 0 clip-at-half, 1 sign,
//! 2 learnable shifts with four per-channel f32 vectors — output and input
//! channels u32, per-channel scales, bias, and a length-prefixed sign
//! bitstream, one bit per weight in packed row order, LSB first), then the
//! three attention projections and the head weight and bias as tensors.
//! Tag 2 (step quantizer): the "EVFC" parameter list, except each quantized
//! weight is tagged 1 and stores bit width u8, shape, per-channel scales,
//! and length-prefixed LSB-first integer codes instead of raw f32 data.
//!
//! The version is bumped on any layout change; readers reject other
//! versions.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::events::WindowConfig;
use crate::model::{Modality, Model, ModelConfig, Param};
use crate::quant::packed::{ActRule, BinaryConvLayer, PackedLayer, PackedModel};
use crate::quant::{
    lsq_decode_weights, lsq_encode_weights, pack_bits, qat_wrap, unpack, QatModel, QuantKind, QuantScheme,
    QuantizedCodes, ReActParams,
};
use crate::tensor::Tensor;
use crate::train::LabelStats;
use crate::{Error, Result};

pub const TRAIN_MAGIC: [u8; 4] = *b"EVFC";
pub const QUANT_MAGIC: [u8; 4] = *b"EVFQ";
pub const VERSION: u16 = 1;

/// Caps single-tensor allocations while reading untrusted files.
const MAX_NUMEL: u64 = 1 << 28;

/// A trained model's full state: wrapped-model configuration, label
/// standardization fitted on its training split, and every parameter at
/// full precision.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub scheme: QuantScheme,
    pub stats: LabelStats,
    /// Input windowing the model was trained on.
    pub window: WindowConfig,
    /// Per-pixel event-count clip used to build its difference frames.
    pub event_clip: i32,
    /// Training-progress signal at save time (drives the progressive sign
    /// backward; inference ignores it).
    pub progress: f32,
    pub params: Vec<Param>,
    pub qparams: Vec<Param>,
}

impl Checkpoint {
    pub fn from_qat(qat: &QatModel, stats: &LabelStats, window: WindowConfig, event_clip: i32) -> Checkpoint {
        Checkpoint {
            cfg: qat.model.cfg,
            scheme: qat.scheme,
            stats: *stats,
            window,
            event_clip,
            progress: qat.progress(),
            params: qat.model.params.clone(),
            qparams: qat.qparams.clone(),
        }
    }

    /// Rebuilds the wrapped model and restores every parameter. The file's
    /// parameter list must match the layout the configuration and scheme
    /// produce, name for name and shape for shape.
    pub fn into_qat(self) -> Result<(QatModel, LabelStats)> {
        let mut qat = qat_wrap(Model::new(self.cfg)?, self.scheme)?;
        restore(&mut qat.model.params, self.params, "parameter")?;
        restore(&mut qat.qparams, self.qparams, "quantizer parameter")?;
        qat.set_progress(self.progress);
        qat.mark_calibrated();
        Ok((qat, self.stats))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Wr::create(path)?;
        let hdr = Header {
            cfg: self.cfg,
            scheme: self.scheme,
            window: self.window,
            event_clip: self.event_clip,
            stats: self.stats,
        };
        write_header(&mut w, TRAIN_MAGIC, &hdr)?;
        w.f32(self.progress)?;
        w.u32(self.params.len() as u32)?;
        w.u32(self.qparams.len() as u32)?;
        for p in self.params.iter().chain(&self.qparams) {
            w.name(&p.name)?;
            w.tensor(&p.tensor)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = Rd { inner: BufReader::new(file), path };
        let hdr = read_header(&mut r, TRAIN_MAGIC)?;
        let progress = r.f32()?;
        let n_params = r.u32()? as usize;
        let n_qparams = r.u32()? as usize;
        let mut all = Vec::with_capacity(n_params + n_qparams);
        for _ in 0..n_params + n_qparams {
            let name = r.name()?;
            all.push(Param { name, tensor: r.tensor()? });
        }
        let qparams = all.split_off(n_params);
        Ok(Checkpoint {
            cfg: hdr.cfg,
            scheme: hdr.scheme,
            stats: hdr.stats,
            window: hdr.window,
            event_clip: hdr.event_clip,
            progress,
            params: all,
            qparams,
        })
    }
}

fn restore(dst: &mut [Param], src: Vec<Param>, what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::invalid(
            "load_checkpoint",
            format!("scheme expects {} {what}s, file has {}", dst.len(), src.len()),
        ));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if d.name != s.name || d.tensor.shape != s.tensor.shape {
            return Err(Error::invalid(
                "load_checkpoint",
                format!(
                    "{what} {} {:?} does not match the model layout ({} {:?})",
                    s.name, s.tensor.shape, d.name, d.tensor.shape
                ),
            ));
        }
        d.tensor = s.tensor;
    }
    Ok(())
}

/// Byte accounting from the quantized writer, for compression checks.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuantizedSummary {
    /// Tensors written as sign bits or integer codes.
    pub quantized_tensors: usize,
    /// Bytes of packed weight payload (sign bits or codes alone).
    pub weight_payload_bytes: u64,
    /// Bytes the same tensors would occupy as raw f32.
    pub fp32_weight_bytes: u64,
    /// Total file size.
    pub file_bytes: u64,
}

/// A loaded quantized export.
#[derive(Clone, Debug)]
pub enum QuantizedModel {
    /// 1-bit export running on the packed XNOR kernel.
    Packed(PackedModel),
    /// Step-quantized model: weights decoded from integer codes back onto
    /// the quantizer grid, running the float path.
    Coded(QatModel),
}

#[derive(Clone, Debug)]
pub struct QuantizedCheckpoint {
    pub stats: LabelStats,
    pub window: WindowConfig,
    pub event_clip: i32,
    pub model: QuantizedModel,
}

/// Writes the compact inference artifact for a quantized model: packed sign
/// bits for 1-bit schemes, integer weight codes for the step quantizer.
pub fn save_quantized(
    qat: &QatModel,
    stats: &LabelStats,
    window: WindowConfig,
    event_clip: i32,
    path: &Path,
) -> Result<QuantizedSummary> {
    let hdr =
        Header { cfg: qat.model.cfg, scheme: qat.scheme, window, event_clip, stats: *stats };
    match qat.scheme.kind {
        QuantKind::Fp32 => {
            Err(Error::invalid("save_quantized", "full-precision scheme has no quantized export"))
        }
        QuantKind::LsqPlus { .. } => save_coded(qat, &hdr, path),
        _ => save_packed(&qat.export()?, &hdr, path),
    }
}

pub fn load_quantized(path: &Path) -> Result<QuantizedCheckpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Rd { inner: BufReader::new(file), path };
    let hdr = read_header(&mut r, QUANT_MAGIC)?;
    let model = match r.u8()? {
        1 => QuantizedModel::Packed(read_packed(&mut r, hdr.cfg, hdr.scheme)?),
        2 => QuantizedModel::Coded(read_coded(&mut r, hdr.cfg, hdr.scheme)?),
        t => return Err(Error::format(path, format!("unknown payload tag {t}"))),
    };
    Ok(QuantizedCheckpoint { stats: hdr.stats, window: hdr.window, event_clip: hdr.event_clip, model })
}

/// Either container, told apart by magic.
#[derive(Clone, Debug)]
pub enum AnyCheckpoint {
    Train(Checkpoint),
    Quantized(QuantizedCheckpoint),
}

pub fn load_any(path: &Path) -> Result<AnyCheckpoint> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|_| Error::format(path, "unexpected end of file"))?;
    drop(file);
    match magic {
        TRAIN_MAGIC => Ok(AnyCheckpoint::Train(Checkpoint::load(path)?)),
        QUANT_MAGIC => Ok(AnyCheckpoint::Quantized(load_quantized(path)?)),
        _ => Err(Error::format(path, format!("bad magic {magic:02x?}"))),
    }
}

fn save_packed(packed: &PackedModel, hdr: &Header, path: &Path) -> Result<QuantizedSummary> {
    let mut w = Wr::create(path)?;
    write_header(&mut w, QUANT_MAGIC, hdr)?;
    w.u8(1)?;
    w.u8(packed.branches.len() as u8)?;
    let mut sum = QuantizedSummary::default();
    for branch in &packed.branches {
        for layer in branch {
            match layer {
                PackedLayer::Fp { w: wt, b } => {
                    w.u8(0)?;
                    w.tensor(wt)?;
                    w.tensor(b)?;
                }
                PackedLayer::Binary(l) => {
                    w.u8(1)?;
                    match &l.act {
                        ActRule::Clip05 => w.u8(0)?,
                        ActRule::Sign => w.u8(1)?,
                        ActRule::React(p) => {
                            w.u8(2)?;
                            for v in [&p.alpha, &p.gamma, &p.zeta, &p.beta] {
                                w.f32s(v)?;
                            }
                        }
                    }
                    w.u32(l.cout as u32)?;
                    w.u32(l.cin as u32)?;
                    w.f32s(&l.scales)?;
                    w.f32s(&l.bias)?;
                    // One bit per weight in packed row order: row r bit i is
                    // stream bit r*row_bits+i, LSB first within each byte.
                    let signs = unpack(&l.weights)?;
                    let mut bytes = vec![0u8; signs.numel().div_ceil(8)];
                    for (i, &v) in signs.data.iter().enumerate() {
                        if v == 1.0 {
                            bytes[i / 8] |= 1 << (i % 8);
                        }
                    }
                    w.u32(bytes.len() as u32)?;
                    w.put(&bytes)?;
                    sum.quantized_tensors += 1;
                    sum.weight_payload_bytes += bytes.len() as u64;
                    sum.fp32_weight_bytes += 4 * signs.numel() as u64;
                }
            }
        }
    }
    for t in packed.attn.iter().chain([&packed.head_w, &packed.head_b]) {
        w.tensor(t)?;
    }
    sum.file_bytes = w.finish()?;
    Ok(sum)
}

fn read_packed<R: Read>(r: &mut Rd<R>, cfg: ModelConfig, scheme: QuantScheme) -> Result<PackedModel> {
    let n_branches = r.u8()? as usize;
    if n_branches != cfg.branches().len() {
        return Err(Error::format(
            r.path,
            format!("{n_branches} branches, config expects {}", cfg.branches().len()),
        ));
    }
    let mut branches = Vec::with_capacity(n_branches);
    for _ in 0..n_branches {
        let mut layers = Vec::with_capacity(cfg.conv_widths.len());
        for _ in 0..cfg.conv_widths.len() {
            layers.push(match r.u8()? {
                0 => PackedLayer::Fp { w: r.tensor()?, b: r.tensor()? },
                1 => {
                    let act = match r.u8()? {
                        0 => ActRule::Clip05,
                        1 => ActRule::Sign,
                        2 => ActRule::React(ReActParams {
                            alpha: r.f32s()?,
                            gamma: r.f32s()?,
                            zeta: r.f32s()?,
                            beta: r.f32s()?,
                        }),
                        t => return Err(Error::format(r.path, format!("unknown activation rule {t}"))),
                    };
                    let cout = r.u32()? as usize;
                    let cin = r.u32()? as usize;
                    let scales = r.f32s()?;
                    let bias = r.f32s()?;
                    let bytes = r.blob()?;
                    let numel = cout * 9 * cin;
                    if bytes.len() != numel.div_ceil(8) {
                        return Err(Error::format(
                            r.path,
                            format!("sign bitstream is {} bytes, {cout}x{cin}x3x3 needs {}", bytes.len(), numel.div_ceil(8)),
                        ));
                    }
                    let signs: Vec<f32> =
                        (0..numel).map(|i| if bytes[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { -1.0 }).collect();
                    // pack_bits on a [rows, row_bits] tensor reproduces the
                    // conv-weight packer's word layout exactly.
                    let weights = pack_bits(&Tensor::from_vec(&[cout, 9 * cin], signs)?)?;
                    PackedLayer::Binary(BinaryConvLayer { act, weights, scales, bias, cin, cout })
                }
                t => return Err(Error::format(r.path, format!("unknown layer tag {t}"))),
            });
        }
        branches.push(layers);
    }
    let attn = [r.tensor()?, r.tensor()?, r.tensor()?];
    let head_w = r.tensor()?;
    let head_b = r.tensor()?;
    Ok(PackedModel { cfg, scheme, branches, attn, head_w, head_b })
}

fn save_coded(qat: &QatModel, hdr: &Header, path: &Path) -> Result<QuantizedSummary> {
    let mut w = Wr::create(path)?;
    write_header(&mut w, QUANT_MAGIC, hdr)?;
    w.u8(2)?;
    let coded: std::collections::BTreeMap<String, (usize, u8)> = qat
        .lsq_weight_sites()
        .into_iter()
        .map(|(name, s, bits)| (format!("{name}.w"), (s, bits)))
        .collect();
    w.u32(qat.model.params.len() as u32)?;
    w.u32(qat.qparams.len() as u32)?;
    let mut sum = QuantizedSummary::default();
    for p in &qat.model.params {
        w.name(&p.name)?;
        match coded.get(&p.name) {
            Some(&(s, bits)) => {
                let q = lsq_encode_weights(&p.tensor, &qat.qparams[s].tensor.data, bits)?;
                w.u8(1)?;
                w.u8(q.bits)?;
                w.u8(q.shape.len() as u8)?;
                for &d in &q.shape {
                    w.u32(d as u32)?;
                }
                w.f32s(&q.scales)?;
                w.u32(q.codes.len() as u32)?;
                w.put(&q.codes)?;
                sum.quantized_tensors += 1;
                sum.weight_payload_bytes += q.codes.len() as u64;
                sum.fp32_weight_bytes += 4 * p.tensor.numel() as u64;
            }
            None => {
                w.u8(0)?;
                w.tensor(&p.tensor)?;
            }
        }
    }
    for p in &qat.qparams {
        w.name(&p.name)?;
        w.tensor(&p.tensor)?;
    }
    sum.file_bytes = w.finish()?;
    Ok(sum)
}

fn read_coded<R: Read>(r: &mut Rd<R>, cfg: ModelConfig, scheme: QuantScheme) -> Result<QatModel> {
    let mut qat = qat_wrap(Model::new(cfg)?, scheme)?;
    let n_params = r.u32()? as usize;
    let n_qparams = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.name()?;
        let tensor = match r.u8()? {
            0 => r.tensor()?,
            1 => {
                let bits = r.u8()?;
                let rank = r.u8()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u32()? as usize);
                }
                let scales = r.f32s()?;
                let codes = r.blob()?;
                lsq_decode_weights(&QuantizedCodes { bits, shape, codes, scales })?
            }
            t => return Err(Error::format(r.path, format!("unknown tensor tag {t}"))),
        };
        params.push(Param { name, tensor });
    }
    let mut qparams = Vec::with_capacity(n_qparams);
    for _ in 0..n_qparams {
        let name = r.name()?;
        qparams.push(Param { name, tensor: r.tensor()? });
    }
    restore(&mut qat.model.params, params, "parameter")?;
    restore(&mut qat.qparams, qparams, "quantizer parameter")?;
    qat.mark_calibrated();
    Ok(qat)
}

/// Fields shared by both containers.
struct Header {
    cfg: ModelConfig,
    scheme: QuantScheme,
    window: WindowConfig,
    event_clip: i32,
    stats: LabelStats,
}

fn write_header(w: &mut Wr, magic: [u8; 4], hdr: &Header) -> Result<()> {
    w.put(&magic)?;
    w.u16(VERSION)?;
    w.u8(match hdr.cfg.modality {
        Modality::Evs => 0,
        Modality::Rgb => 1,
        Modality::Fusion => 2,
    })?;
    w.u32(hdr.cfg.in_channels_evs as u32)?;
    w.u32(hdr.cfg.in_channels_rgb as u32)?;
    for &c in &hdr.cfg.conv_widths {
        w.u32(c as u32)?;
    }
    w.f32(hdr.cfg.dropout_p)?;
    w.u64(hdr.cfg.seed)?;
    let (kind, bits) = match hdr.scheme.kind {
        QuantKind::Fp32 => (0, 0),
        QuantKind::LsqPlus { bits } => (1, bits),
        QuantKind::Dorefa => (2, 0),
        QuantKind::Irnet => (3, 0),
        QuantKind::IrnetStar => (4, 0),
        QuantKind::Reactnet => (5, 0),
    };
    w.u8(kind)?;
    w.u8(bits)?;
    w.u8(hdr.scheme.first_last_fp as u8)?;
    w.u32(hdr.window.t_ms)?;
    w.u16(hdr.window.stack_k)?;
    w.put(&hdr.event_clip.to_le_bytes())?;
    for v in hdr.stats.mean.iter().chain(&hdr.stats.std) {
        w.f32(*v)?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut Rd<R>, expect: [u8; 4]) -> Result<Header> {
    let magic: [u8; 4] = r.bytes()?;
    if magic != expect {
        return Err(Error::format(
            r.path,
            format!("bad magic {magic:02x?}, expected {:?}", String::from_utf8_lossy(&expect)),
        ));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(r.path, format!("unsupported version {version}, reader is v{VERSION}")));
    }
    let modality = match r.u8()? {
        0 => Modality::Evs,
        1 => Modality::Rgb,
        2 => Modality::Fusion,
        m => return Err(Error::format(r.path, format!("unknown modality {m}"))),
    };
    let in_channels_evs = r.u32()? as usize;
    let in_channels_rgb = r.u32()? as usize;
    let mut conv_widths = [0usize; 6];
    for c in &mut conv_widths {
        *c = r.u32()? as usize;
    }
    let dropout_p = r.f32()?;
    let seed = r.u64()?;
    let kind = r.u8()?;
    let bits = r.u8()?;
    let kind = match kind {
        0 => QuantKind::Fp32,
        1 => QuantKind::LsqPlus { bits },
        2 => QuantKind::Dorefa,
        3 => QuantKind::Irnet,
        4 => QuantKind::IrnetStar,
        5 => QuantKind::Reactnet,
        k => return Err(Error::format(r.path, format!("unknown scheme kind {k}"))),
    };
    let first_last_fp = r.u8()? != 0;
    let scheme = QuantScheme { kind, first_last_fp };
    scheme.validate()?;
    let window = WindowConfig { t_ms: r.u32()?, stack_k: r.u16()? };
    let event_clip = i32::from_le_bytes(r.bytes()?);
    let mut stats = LabelStats::identity();
    for v in stats.mean.iter_mut().chain(&mut stats.std) {
        *v = r.f32()?;
    }
    let cfg = ModelConfig { modality, in_channels_evs, in_channels_rgb, conv_widths, dropout_p, seed };
    if cfg.in_channels_evs != window.stack_k as usize {
        return Err(Error::format(
            r.path,
            format!("stacking {} disagrees with event input channels {}", window.stack_k, cfg.in_channels_evs),
        ));
    }
    Ok(Header { cfg, scheme, window, event_clip, stats })
}

struct Wr<'a> {
    inner: std::io::BufWriter<File>,
    path: &'a Path,
}

impl<'a> Wr<'a> {
    fn create(path: &'a Path) -> Result<Wr<'a>> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Wr { inner: std::io::BufWriter::new(file), path })
    }
    fn put(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(|e| Error::io(self.path, e))
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.put(&[v])
    }
    fn u16(&mut self, v: u16) -> Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn f32(&mut self, v: f32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn f32s(&mut self, v: &[f32]) -> Result<()> {
        self.u32(v.len() as u32)?;
        for &x in v {
            self.f32(x)?;
        }
        Ok(())
    }
    fn name(&mut self, s: &str) -> Result<()> {
        self.u16(s.len() as u16)?;
        self.put(s.as_bytes())
    }
    fn tensor(&mut self, t: &Tensor) -> Result<()> {
        self.u8(t.shape.len() as u8)?;
        for &d in &t.shape {
            self.u32(d as u32)?;
        }
        for &x in &t.data {
            self.f32(x)?;
        }
        Ok(())
    }
    fn finish(mut self) -> Result<u64> {
        self.inner.flush().map_err(|e| Error::io(self.path, e))?;
        Ok(std::fs::metadata(self.path).map_err(|e| Error::io(self.path, e))?.len())
    }
}

struct Rd<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Rd<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::format(self.path, "unexpected end of file"))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as u64;
        if n > MAX_NUMEL {
            return Err(Error::format(self.path, format!("vector of {n} entries exceeds the reader limit")));
        }
        (0..n).map(|_| self.f32()).collect()
    }
    fn blob(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        if n as u64 > 4 * MAX_NUMEL {
            return Err(Error::format(self.path, format!("blob of {n} bytes exceeds the reader limit")));
        }
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::format(self.path, "unexpected end of file"))?;
        Ok(b)
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let mut b = vec![0u8; n];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::format(self.path, "unexpected end of file"))?;
        String::from_utf8(b).map_err(|_| Error::format(self.path, "parameter name is not UTF-8"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        if rank > 8 {
            return Err(Error::format(self.path, format!("tensor rank {rank} exceeds the reader limit")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = self.u32()? as u64;
            numel = numel.saturating_mul(d.max(1));
            shape.push(d as usize);
        }
        if numel > MAX_NUMEL {
            return Err(Error::format(self.path, format!("tensor of {numel} entries exceeds the reader limit")));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f32()?);
        }
        Tensor::from_vec(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::graph::Mode;
    use crate::model::INPUT_HW;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SCHEMES: [&str; 7] = ["fp32", "lsq+:2", "lsq+:8", "dorefa", "irnet", "irnet_star", "reactnet"];

    fn wrapped(modality: Modality, scheme: &str, seed: u64) -> QatModel {
        let cfg = ModelConfig::new(modality, 1, seed);
        qat_wrap(Model::new(cfg).unwrap(), scheme.parse().unwrap()).unwrap()
    }

    fn label_stats() -> LabelStats {
        LabelStats { mean: [12.5, -3.25, 250.0], std: [30.0, 28.5, 120.75] }
    }

    fn window() -> WindowConfig {
        WindowConfig { t_ms: 25, stack_k: 1 }
    }

    fn frame(c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..c * INPUT_HW * INPUT_HW).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(&[c, INPUT_HW, INPUT_HW], data).unwrap()
    }

    fn assert_params_bit_equal(a: &[Param], b: &[Param]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.tensor.shape, y.tensor.shape);
            for (u, v) in x.tensor.data.iter().zip(&y.tensor.data) {
                assert_eq!(u.to_bits(), v.to_bits(), "{}", x.name);
            }
        }
    }

    fn bits3(p: &crate::model::CollisionPrediction) -> [u32; 3] {
        [p.x_mm.to_bits(), p.y_mm.to_bits(), p.t_ms.to_bits()]
    }

    #[test]
    fn train_checkpoint_round_trips_bit_exactly_across_schemes() {
        let dir = tempfile::tempdir().unwrap();
        for (i, scheme) in SCHEMES.iter().enumerate() {
            let modality = if i % 2 == 0 { Modality::Evs } else { Modality::Fusion };
            let mut qat = wrapped(modality, scheme, 40 + i as u64);
            qat.set_progress(0.37);
            let ckpt = Checkpoint::from_qat(&qat, &label_stats(), window(), 8);
            let path = dir.path().join(format!("m{i}.evfc"));
            ckpt.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back.cfg, ckpt.cfg, "{scheme}");
            assert_eq!(back.scheme, ckpt.scheme, "{scheme}");
            assert_eq!(back.progress.to_bits(), ckpt.progress.to_bits());
            assert_eq!(back.window, ckpt.window);
            assert_eq!(back.event_clip, ckpt.event_clip);
            for (a, b) in ckpt.stats.mean.iter().chain(&ckpt.stats.std).zip(back.stats.mean.iter().chain(&back.stats.std)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert_params_bit_equal(&back.params, &ckpt.params);
            assert_params_bit_equal(&back.qparams, &ckpt.qparams);
        }
    }

    #[test]
    fn loaded_model_predicts_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        for (i, scheme) in SCHEMES.iter().enumerate() {
            let mut qat = wrapped(Modality::Evs, scheme, 7 + i as u64);
            let input = frame(1, 90 + i as u64);
            // First pass calibrates the activation quantizers; save after.
            qat.predict_single(&input, Mode::Eval).unwrap();
            let want = qat.predict_single(&input, Mode::Eval).unwrap();
            let path = dir.path().join(format!("m{i}.evfc"));
            Checkpoint::from_qat(&qat, &label_stats(), window(), 8).save(&path).unwrap();
            let (mut loaded, stats) = Checkpoint::load(&path).unwrap().into_qat().unwrap();
            let got = loaded.predict_single(&input, Mode::Eval).unwrap();
            assert_eq!(bits3(&got), bits3(&want), "{scheme}");
            assert_eq!(stats.mean, label_stats().mean);
        }
    }

    #[test]
    fn layout_mismatches_are_rejected() {
        let mut qat = wrapped(Modality::Evs, "lsq+:4", 3);
        let mut ckpt = Checkpoint::from_qat(&qat, &label_stats(), window(), 8);
        ckpt.params[3].name = "evs.conv9.w".into();
        let err = ckpt.into_qat().unwrap_err().to_string();
        assert!(err.contains("does not match"), "{err}");

        let mut short = Checkpoint::from_qat(&qat, &label_stats(), window(), 8);
        short.qparams.pop();
        let err = short.into_qat().unwrap_err().to_string();
        assert!(err.contains("quantizer parameter"), "{err}");

        // A checkpoint whose scheme disagrees with its parameter list.
        let mut wrong = Checkpoint::from_qat(&qat, &label_stats(), window(), 8);
        wrong.scheme = QuantScheme::fp32();
        assert!(wrong.into_qat().is_err());
        let _ = qat.predict_single(&frame(1, 1), Mode::Eval);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let qat = wrapped(Modality::Evs, "fp32", 5);
        let path = dir.path().join("m.evfc");
        Checkpoint::from_qat(&qat, &label_stats(), window(), 8).save(&path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("short.evfc");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        let err = Checkpoint::load(&truncated).unwrap_err().to_string();
        assert!(err.contains("unexpected end of file"), "{err}");

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 2;
        let versioned = dir.path().join("v2.evfc");
        std::fs::write(&versioned, &wrong_version).unwrap();
        let err = Checkpoint::load(&versioned).unwrap_err().to_string();
        assert!(err.contains("unsupported version 2"), "{err}");

        let junk = dir.path().join("junk.evfc");
        std::fs::write(&junk, b"XXXXnot a checkpoint").unwrap();
        assert!(Checkpoint::load(&junk).unwrap_err().to_string().contains("bad magic"));
        assert!(load_any(&junk).unwrap_err().to_string().contains("bad magic"));
    }

    #[test]
    fn packed_export_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        for (i, scheme) in ["dorefa", "irnet", "irnet_star", "reactnet"].iter().enumerate() {
            let modality = if i == 1 { Modality::Fusion } else { Modality::Evs };
            let qat = wrapped(modality, scheme, 60 + i as u64);
            let want = qat.export().unwrap();
            let path = dir.path().join(format!("m{i}.evfq"));
            let sum = save_quantized(&qat, &label_stats(), window(), 8, &path).unwrap();
            assert_eq!(sum.file_bytes, std::fs::metadata(&path).unwrap().len());
            let loaded = load_quantized(&path).unwrap();
            let QuantizedModel::Packed(got) = loaded.model else { panic!("expected packed payload") };
            assert_eq!(got, want, "{scheme}");

            let pred = match modality {
                Modality::Fusion => {
                    let (e, r) = (frame(1, 80 + i as u64), frame(3, 81 + i as u64));
                    (got.forward_fusion(&e, &r).unwrap(), want.forward_fusion(&e, &r).unwrap())
                }
                _ => {
                    let e = frame(1, 80 + i as u64);
                    (got.forward_single(&e).unwrap(), want.forward_single(&e).unwrap())
                }
            };
            assert_eq!(bits3(&pred.0), bits3(&pred.1), "{scheme}");
        }
    }

    #[test]
    fn packed_export_meets_the_one_bit_budget_exactly() {
        // Five binarized convs in the event branch: 16x8, 32x16, 64x32,
        // 64x64, 64x64 kernels of 3x3 = 97920 weights.
        let qat = wrapped(Modality::Evs, "irnet", 2);
        let dir = tempfile::tempdir().unwrap();
        let sum = save_quantized(&qat, &label_stats(), window(), 8, &dir.path().join("m.evfq")).unwrap();
        assert_eq!(sum.quantized_tensors, 5);
        assert_eq!(sum.fp32_weight_bytes, 4 * 97_920);
        assert_eq!(sum.weight_payload_bytes, 97_920 / 8);
        assert!(sum.weight_payload_bytes <= sum.fp32_weight_bytes / 32 + sum.quantized_tensors as u64);
    }

    #[test]
    fn coded_export_round_trips_and_predicts_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        for (i, scheme) in ["lsq+:2", "lsq+:4", "lsq+:8"].iter().enumerate() {
            let mut qat = wrapped(Modality::Evs, scheme, 20 + i as u64);
            let input = frame(1, 50 + i as u64);
            qat.predict_single(&input, Mode::Eval).unwrap();
            let want = qat.predict_single(&input, Mode::Eval).unwrap();
            let path = dir.path().join(format!("m{i}.evfq"));
            save_quantized(&qat, &label_stats(), window(), 8, &path).unwrap();
            let loaded = load_quantized(&path).unwrap();
            let QuantizedModel::Coded(mut got) = loaded.model else { panic!("expected coded payload") };
            // Decoded weights sit on the quantizer grid, so the forward
            // re-quantization is a fixed point and predictions match bit
            // for bit.
            let pred = got.predict_single(&input, Mode::Eval).unwrap();
            assert_eq!(bits3(&pred), bits3(&want), "{scheme}");
        }
    }

    #[test]
    fn coded_export_meets_the_four_bit_budget_exactly() {
        // Quantized sites at 4 bits: the five convs (97920 weights) plus
        // three 64x64 attention projections (12288).
        let qat = wrapped(Modality::Evs, "lsq+:4", 2);
        let dir = tempfile::tempdir().unwrap();
        let sum = save_quantized(&qat, &label_stats(), window(), 8, &dir.path().join("m.evfq")).unwrap();
        assert_eq!(sum.quantized_tensors, 8);
        assert_eq!(sum.fp32_weight_bytes, 4 * (97_920 + 12_288));
        assert_eq!(sum.weight_payload_bytes, (97_920 + 12_288) / 2);
        assert!(sum.weight_payload_bytes <= sum.fp32_weight_bytes / 8 + sum.quantized_tensors as u64);
    }

    #[test]
    fn fp32_has_no_quantized_export() {
        let qat = wrapped(Modality::Evs, "fp32", 2);
        let dir = tempfile::tempdir().unwrap();
        let err = save_quantized(&qat, &label_stats(), window(), 8, &dir.path().join("m.evfq")).unwrap_err().to_string();
        assert!(err.contains("no quantized export"), "{err}");
    }

    #[test]
    fn load_any_tells_the_containers_apart() {
        let dir = tempfile::tempdir().unwrap();
        let qat = wrapped(Modality::Evs, "irnet", 9);
        let train_path = dir.path().join("m.evfc");
        let quant_path = dir.path().join("m.evfq");
        Checkpoint::from_qat(&qat, &label_stats(), window(), 8).save(&train_path).unwrap();
        save_quantized(&qat, &label_stats(), window(), 8, &quant_path).unwrap();
        assert!(matches!(load_any(&train_path).unwrap(), AnyCheckpoint::Train(_)));
        assert!(matches!(load_any(&quant_path).unwrap(), AnyCheckpoint::Quantized(_)));
        // A quantized file through the training loader and vice versa.
        assert!(Checkpoint::load(&quant_path).is_err());
        assert!(load_quantized(&train_path).is_err());
    }

    #[test]
    fn saved_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let qat = wrapped(Modality::Fusion, "lsq+:4", 13);
        let (a, b) = (dir.path().join("a.evfc"), dir.path().join("b.evfc"));
        Checkpoint::from_qat(&qat, &label_stats(), window(), 8).save(&a).unwrap();
        Checkpoint::from_qat(&qat, &label_stats(), window(), 8).save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let (qa, qb) = (dir.path().join("a.evfq"), dir.path().join("b.evfq"));
        save_quantized(&qat, &label_stats(), window(), 8, &qa).unwrap();
        save_quantized(&qat, &label_stats(), window(), 8, &qb).unwrap();
        assert_eq!(std::fs::read(&qa).unwrap(), std::fs::read(&qb).unwrap());
    }
}
