//! Event-camera stream ingestion: two interchangeable on-disk event formats,
//! time-window binning into frame tensors, and the clip container consumed
//! by training.
//!
//! Binning is order independent: the frame index of an event depends only on
//! its timestamp relative to the earliest one, and accumulation is a
//! commutative count (or a set bit), so shuffled streams produce identical
//! tensors.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One sensor event. `pol` is +1 or -1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub ts: u32,
    pub x: u16,
    pub y: u16,
    pub pol: i8,
}

/// How events landing in the same cell combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumMode {
    /// cell holds the event count
    Count,
    /// cell holds 1.0 if any event landed there
    Binary,
}

impl AccumMode {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "count" => AccumMode::Count,
            "binary" => AccumMode::Binary,
            _ => return None,
        })
    }
}

fn bad_record(record: usize, detail: String) -> Error {
    Error::Ingest { record, detail }
}

fn check_pol(pol: i64, record: usize) -> Result<i8> {
    match pol {
        1 => Ok(1),
        -1 => Ok(-1),
        other => Err(bad_record(record, format!("polarity must be 1 or -1, got {}", other))),
    }
}

/// Reads whitespace-separated `ts x y pol` lines. Blank lines and lines
/// starting with `#` are skipped. Record numbers in errors are 1-based
/// line numbers.
pub fn read_text_events<R: BufRead>(reader: R) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad_record(
                lineno,
                format!("want 4 fields (ts x y pol), got {}", fields.len()),
            ));
        }
        let parse = |s: &str, what: &str| -> Result<i64> {
            s.parse::<i64>()
                .map_err(|_| bad_record(lineno, format!("bad {}: {:?}", what, s)))
        };
        let ts = parse(fields[0], "timestamp")?;
        let x = parse(fields[1], "x")?;
        let y = parse(fields[2], "y")?;
        let pol = parse(fields[3], "polarity")?;
        if ts < 0 || ts > u32::MAX as i64 {
            return Err(bad_record(lineno, format!("timestamp {} out of range", ts)));
        }
        if x < 0 || x > u16::MAX as i64 || y < 0 || y > u16::MAX as i64 {
            return Err(bad_record(lineno, format!("coordinate ({}, {}) out of range", x, y)));
        }
        events.push(Event {
            ts: ts as u32,
            x: x as u16,
            y: y as u16,
            pol: check_pol(pol, lineno)?,
        });
    }
    Ok(events)
}

pub fn write_text_events<W: Write>(writer: &mut W, events: &[Event]) -> Result<()> {
    for e in events {
        writeln!(writer, "{} {} {} {}", e.ts, e.x, e.y, e.pol)?;
    }
    Ok(())
}

pub const EVENT_MAGIC: &[u8; 4] = b"DVSE";
const EVENT_VERSION: u8 = 1;
const EVENT_RECORD_LEN: usize = 11;

/// Binary event container: magic `DVSE`, version byte, then 11-byte
/// little-endian records of u32 ts, u16 x, u16 y, i8 pol, u16 reserved.
pub fn write_binary_events<W: Write>(writer: &mut W, events: &[Event]) -> Result<()> {
    writer.write_all(EVENT_MAGIC)?;
    writer.write_all(&[EVENT_VERSION])?;
    for e in events {
        writer.write_all(&e.ts.to_le_bytes())?;
        writer.write_all(&e.x.to_le_bytes())?;
        writer.write_all(&e.y.to_le_bytes())?;
        writer.write_all(&[e.pol as u8])?;
        writer.write_all(&0u16.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_binary_events<R: Read>(reader: &mut R) -> Result<Vec<Event>> {
    let mut header = [0u8; 5];
    reader.read_exact(&mut header).map_err(|_| {
        Error::Format("event file too short for its header".into())
    })?;
    if &header[..4] != EVENT_MAGIC {
        return Err(Error::Format("bad event file magic".into()));
    }
    if header[4] != EVENT_VERSION {
        return Err(Error::Format(format!(
            "unsupported event file version {}",
            header[4]
        )));
    }
    let mut events = Vec::new();
    let mut buf = [0u8; EVENT_RECORD_LEN];
    loop {
        match read_chunk(reader, &mut buf)? {
            0 => break,
            EVENT_RECORD_LEN => {}
            n => {
                return Err(Error::Format(format!(
                    "trailing {} bytes do not form a whole record",
                    n
                )))
            }
        }
        let record = events.len() + 1;
        events.push(Event {
            ts: u32::from_le_bytes(buf[0..4].try_into().unwrap()),
            x: u16::from_le_bytes(buf[4..6].try_into().unwrap()),
            y: u16::from_le_bytes(buf[6..8].try_into().unwrap()),
            pol: check_pol(buf[8] as i8 as i64, record)?,
        });
    }
    Ok(events)
}

fn read_chunk<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        let n = reader.read(&mut buf[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    Ok(got)
}

/// Bins events into a (T, H, W, 2) tensor. Channel 0 collects positive
/// polarity, channel 1 negative. Frame index is (ts - min ts) / window;
/// T spans up to the latest event, so every event lands in a frame.
pub fn bin_events(
    events: &[Event],
    window: u32,
    h: usize,
    w: usize,
    mode: AccumMode,
) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::InvalidConfig("bin window must be positive".into()));
    }
    if events.is_empty() {
        return Err(Error::Format("cannot frame an empty event stream".into()));
    }
    let ts0 = events.iter().map(|e| e.ts).min().unwrap();
    let ts_max = events.iter().map(|e| e.ts).max().unwrap();
    let t = ((ts_max - ts0) / window) as usize + 1;
    let mut frames = Tensor::zeros(&[t, h, w, 2])?;
    for (i, e) in events.iter().enumerate() {
        if (e.x as usize) >= w || (e.y as usize) >= h {
            return Err(bad_record(
                i + 1,
                format!("event at ({}, {}) outside {}x{} sensor", e.x, e.y, w, h),
            ));
        }
        let ti = ((e.ts - ts0) / window) as usize;
        let ch = if e.pol > 0 { 0 } else { 1 };
        let idx = frames.index_of(&[ti, e.y as usize, e.x as usize, ch])?;
        let cell = &mut frames.data_mut()[idx];
        match mode {
            AccumMode::Count => *cell += 1.0,
            AccumMode::Binary => *cell = 1.0,
        }
    }
    Ok(frames)
}

/// Cuts a (T, H, W, C) frame stack into disjoint clips of `t` frames,
/// dropping the trailing partial clip.
pub fn tile_clips(frames: &Tensor, t: usize) -> Result<Vec<Tensor>> {
    if t == 0 {
        return Err(Error::InvalidConfig("clip length must be positive".into()));
    }
    if frames.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: frames.shape().to_vec(),
            reason: "tiling wants (T, H, W, C) frames".into(),
        });
    }
    let [total, h, w, c] = [
        frames.shape()[0],
        frames.shape()[1],
        frames.shape()[2],
        frames.shape()[3],
    ];
    let step = h * w * c;
    let mut clips = Vec::with_capacity(total / t);
    for s in 0..total / t {
        let lo = s * t * step;
        let hi = lo + t * step;
        clips.push(Tensor::new(&[t, h, w, c], frames.data()[lo..hi].to_vec())?);
    }
    Ok(clips)
}

/// Crops a (T, H, W, C) stack to (T, ch, cw, C) around the event centroid,
/// clamping the window to the frame bounds. A zero-mass stack is cropped at
/// the center.
pub fn centroid_crop(frames: &Tensor, ch: usize, cw: usize) -> Result<Tensor> {
    if frames.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: frames.shape().to_vec(),
            reason: "cropping wants (T, H, W, C) frames".into(),
        });
    }
    let [t, h, w, c] = [
        frames.shape()[0],
        frames.shape()[1],
        frames.shape()[2],
        frames.shape()[3],
    ];
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(Error::InvalidConfig(format!(
            "crop {}x{} does not fit {}x{} frames",
            ch, cw, h, w
        )));
    }
    let mut mass = 0.0;
    let mut my = 0.0;
    let mut mx = 0.0;
    let mut i = 0;
    for _ in 0..t {
        for y in 0..h {
            for x in 0..w {
                for _ in 0..c {
                    let v = frames.data()[i];
                    mass += v;
                    my += v * y as f64;
                    mx += v * x as f64;
                    i += 1;
                }
            }
        }
    }
    let clamp = |center: f64, extent: usize, full: usize| -> usize {
        let lo = (center.round() as isize) - (extent as isize - 1) / 2;
        lo.clamp(0, (full - extent) as isize) as usize
    };
    let (top, left) = if mass > 0.0 {
        (clamp(my / mass, ch, h), clamp(mx / mass, cw, w))
    } else {
        ((h - ch) / 2, (w - cw) / 2)
    };
    let mut out = Tensor::zeros(&[t, ch, cw, c])?;
    let mut o = 0;
    for ti in 0..t {
        for y in 0..ch {
            for x in 0..cw {
                let src = frames.index_of(&[ti, top + y, left + x, 0])?;
                for k in 0..c {
                    out.data_mut()[o] = frames.data()[src + k];
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Sums k x k spatial blocks of a (T, H, W, C) stack, halving nothing:
/// counts stay counts. H and W must divide by k.
pub fn block_downsample(frames: &Tensor, k: usize) -> Result<Tensor> {
    if frames.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: frames.shape().to_vec(),
            reason: "downsampling wants (T, H, W, C) frames".into(),
        });
    }
    let [t, h, w, c] = [
        frames.shape()[0],
        frames.shape()[1],
        frames.shape()[2],
        frames.shape()[3],
    ];
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidConfig(format!(
            "block size {} does not divide {}x{}",
            k, h, w
        )));
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = Tensor::zeros(&[t, oh, ow, c])?;
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let src = frames.index_of(&[ti, y, x, 0])?;
                let dst = out.index_of(&[ti, y / k, x / k, 0])?;
                for ki in 0..c {
                    out.data_mut()[dst + ki] += frames.data()[src + ki];
                }
            }
        }
    }
    Ok(out)
}

const CLIP_MAGIC: &[u8; 4] = b"CLIP";
const CLIP_VERSION: u8 = 1;
const CLIP_DTYPE_F32: u8 = 0;

/// A labeled frame stack ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// (T, H, W, C)
    pub frames: Tensor,
    pub label: u32,
}

/// Scales a clip so its largest value becomes 1. All-zero clips are left
/// alone. Off by default in the loaders; see the run config.
pub fn normalize_clip(clip: &mut Clip) {
    let max = clip.frames.data().iter().fold(0.0f64, |a, &v| a.max(v));
    if max > 0.0 {
        for v in clip.frames.data_mut() {
            *v /= max;
        }
    }
}

/// Clip container: magic `CLIP`, version byte, u16 T/H/W/C, a dtype byte
/// (f32 only), u32 label, then the frames as little-endian f32 row-major.
pub fn write_clip<W: Write>(writer: &mut W, clip: &Clip) -> Result<()> {
    if clip.frames.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: clip.frames.shape().to_vec(),
            reason: "clip frames must be (T, H, W, C)".into(),
        });
    }
    writer.write_all(CLIP_MAGIC)?;
    writer.write_all(&[CLIP_VERSION])?;
    for &d in clip.frames.shape() {
        if d > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!("clip extent {} too large", d)));
        }
        writer.write_all(&(d as u16).to_le_bytes())?;
    }
    writer.write_all(&[CLIP_DTYPE_F32])?;
    writer.write_all(&clip.label.to_le_bytes())?;
    for &v in clip.frames.data() {
        writer.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_clip<R: Read>(reader: &mut R) -> Result<Clip> {
    let mut header = [0u8; 18];
    reader
        .read_exact(&mut header)
        .map_err(|_| Error::Format("clip file too short for its header".into()))?;
    if &header[..4] != CLIP_MAGIC {
        return Err(Error::Format("bad clip file magic".into()));
    }
    if header[4] != CLIP_VERSION {
        return Err(Error::Format(format!(
            "unsupported clip version {}",
            header[4]
        )));
    }
    let ext = |i: usize| u16::from_le_bytes([header[5 + 2 * i], header[6 + 2 * i]]) as usize;
    let shape = [ext(0), ext(1), ext(2), ext(3)];
    if header[13] != CLIP_DTYPE_F32 {
        return Err(Error::Format(format!("unsupported clip dtype {}", header[13])));
    }
    let label = u32::from_le_bytes(header[14..18].try_into().unwrap());
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; 4 * n];
    reader
        .read_exact(&mut payload)
        .map_err(|_| Error::Format("clip payload shorter than its header claims".into()))?;
    let mut probe = [0u8; 1];
    if reader.read(&mut probe)? != 0 {
        return Err(Error::Format("clip has trailing bytes".into()));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok(Clip {
        frames: Tensor::new(&shape, data)?,
        label,
    })
}
