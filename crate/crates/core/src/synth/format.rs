//! Binary recording format and the dataset manifest.
//!
//! Little-endian layout: a 47-byte header (magic "ABCD", version, id,
//! duration, counts, frame dims, trajectory length, label, split), then the
//! event records packed at 13 bytes each (t_us u64, x u16, y u16, polarity
//! i8), the RGB frames (u64 timestamp + raw 8-bit HWC pixels), and the ball
//! and drone trajectories as f32 triplets.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{CollisionLabel, RawFrame, Recording, Split, RGB_H, RGB_W};
use crate::events::Event;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ABCD";
pub const VERSION: u16 = 1;
/// Fixed header size in bytes.
pub const HEADER_LEN: u64 = 47;
/// Packed size of one event record.
pub const EVENT_RECORD_LEN: u64 = 13;

/// Exact on-disk size of a recording, from its counts alone.
pub fn file_size(n_events: u64, n_frames: u64, traj_len: u64) -> u64 {
    HEADER_LEN
        + EVENT_RECORD_LEN * n_events
        + n_frames * (8 + (RGB_W * RGB_H * 3) as u64)
        + 2 * traj_len * 12
}

pub fn save_recording(rec: &Recording, path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path, e);
    if rec.ball_traj.len() != rec.drone_traj.len() {
        return Err(Error::invalid(
            "save_recording",
            format!("trajectory lengths differ: {} vs {}", rec.ball_traj.len(), rec.drone_traj.len()),
        ));
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&rec.id.to_le_bytes())?;
    put(&rec.duration_us.to_le_bytes())?;
    put(&(rec.events.len() as u32).to_le_bytes())?;
    put(&(rec.rgb_frames.len() as u32).to_le_bytes())?;
    put(&(RGB_W as u16).to_le_bytes())?;
    put(&(RGB_H as u16).to_le_bytes())?;
    put(&(rec.ball_traj.len() as u32).to_le_bytes())?;
    put(&rec.label.x_mm.to_le_bytes())?;
    put(&rec.label.y_mm.to_le_bytes())?;
    put(&rec.label.t_ms.to_le_bytes())?;
    put(&[rec.split as u8])?;
    for e in &rec.events {
        put(&e.t_us.to_le_bytes())?;
        put(&e.x.to_le_bytes())?;
        put(&e.y.to_le_bytes())?;
        put(&[e.polarity as u8])?;
    }
    for f in &rec.rgb_frames {
        if f.pixels.len() != RGB_W * RGB_H * 3 {
            return Err(Error::invalid(
                "save_recording",
                format!("frame must be {RGB_W}x{RGB_H}x3, got {} bytes", f.pixels.len()),
            ));
        }
        put(&f.t_us.to_le_bytes())?;
        put(&f.pixels)?;
    }
    for traj in [&rec.ball_traj, &rec.drone_traj] {
        for p in traj {
            for v in p {
                put(&v.to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
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
}

pub fn load_recording(path: &Path) -> Result<Recording> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Rd { inner: BufReader::new(file), path };
    let magic: [u8; 4] = r.bytes()?;
    if magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:02x?}, expected \"ABCD\"")));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let id = r.u32()?;
    let duration_us = r.u64()?;
    let n_events = r.u32()? as usize;
    let n_frames = r.u32()? as usize;
    let (fw, fh) = (r.u16()? as usize, r.u16()? as usize);
    if (fw, fh) != (RGB_W, RGB_H) {
        return Err(Error::format(path, format!("unsupported frame size {fw}x{fh}")));
    }
    let traj_len = r.u32()? as usize;
    let label = CollisionLabel { x_mm: r.f32()?, y_mm: r.f32()?, t_ms: r.f32()? };
    let split = Split::from_u8(r.bytes::<1>()?[0]).ok_or_else(|| Error::format(path, "invalid split byte"))?;
    let mut events = Vec::with_capacity(n_events);
    let mut last_t = 0u64;
    for _ in 0..n_events {
        let e = Event {
            t_us: r.u64()?,
            x: r.u16()?,
            y: r.u16()?,
            polarity: r.bytes::<1>()?[0] as i8,
        };
        if e.polarity != 1 && e.polarity != -1 {
            return Err(Error::format(path, format!("invalid polarity {}", e.polarity)));
        }
        if e.t_us < last_t {
            return Err(Error::format(path, "event stream not sorted"));
        }
        last_t = e.t_us;
        events.push(e);
    }
    let mut rgb_frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let t_us = r.u64()?;
        let mut pixels = vec![0u8; RGB_W * RGB_H * 3];
        r.inner
            .read_exact(&mut pixels)
            .map_err(|_| Error::format(path, "unexpected end of file in frame data"))?;
        rgb_frames.push(RawFrame { t_us, pixels });
    }
    let mut traj = |_: ()| -> Result<Vec<[f32; 3]>> {
        (0..traj_len).map(|_| Ok([r.f32()?, r.f32()?, r.f32()?])).collect()
    };
    let ball_traj = traj(())?;
    let drone_traj = traj(())?;
    Ok(Recording { id, duration_us, events, rgb_frames, ball_traj, drone_traj, label, split })
}

/// Writes `path<TAB>split` lines; paths are stored as given (generator uses
/// names relative to the manifest's directory).
pub fn write_manifest(path: &Path, entries: &[(String, Split)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for (name, split) in entries {
        writeln!(w, "{name}\t{split}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a manifest; relative recording paths are resolved against the
/// manifest's parent directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, Split)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, split) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {}: expected path<TAB>split", lineno + 1)))?;
        let split: Split = split
            .trim()
            .parse()
            .map_err(|e: String| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        let p = PathBuf::from(name);
        out.push((if p.is_absolute() { p } else { base.join(p) }, split));
    }
    Ok(out)
}
