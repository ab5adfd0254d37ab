//! On-disk view records.
//!
//! Layout (little endian): magic `MVDC1`, `u32` height, `u32` width,
//! `u32` channel count, then per channel a `u8` name length, the name and a
//! `u8` component count. Channel data follows in header order as row-major
//! interleaved `f32`, then `H*W` `i32` triangle ids (-1 = background).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::render::ViewBuffers;

pub const VIEW_MAGIC: &[u8; 5] = b"MVDC1";

const CHANNELS: [(&str, u8); 4] = [("rgb", 3), ("normal", 3), ("depth", 1), ("hit", 3)];

fn channel<'a>(v: &'a ViewBuffers, name: &str) -> &'a [f32] {
    match name {
        "rgb" => &v.rgb,
        "normal" => &v.normal,
        "depth" => &v.depth,
        "hit" => &v.hit,
        _ => unreachable!(),
    }
}

pub fn encode_view(v: &ViewBuffers) -> Vec<u8> {
    let n = v.num_pixels();
    let mut out = Vec::with_capacity(64 + n * 44);
    out.extend_from_slice(VIEW_MAGIC);
    out.extend_from_slice(&(v.height as u32).to_le_bytes());
    out.extend_from_slice(&(v.width as u32).to_le_bytes());
    out.extend_from_slice(&(CHANNELS.len() as u32).to_le_bytes());
    for (name, comps) in CHANNELS {
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        out.push(comps);
    }
    for (name, _) in CHANNELS {
        for x in channel(v, name) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for t in &v.tri_id {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_view(bytes: &[u8], path: &Path) -> Result<ViewBuffers> {
    let bad = |msg: &str| Error::ViewFormat {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(5) != Some(VIEW_MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let h = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let w = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let nc = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let mut header = Vec::with_capacity(nc);
    for _ in 0..nc {
        let len = r.u8().ok_or_else(|| bad("truncated channel list"))? as usize;
        let name = r.take(len).ok_or_else(|| bad("truncated channel list"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("channel name not utf-8"))?;
        let comps = r.u8().ok_or_else(|| bad("truncated channel list"))? as usize;
        header.push((name, comps));
    }
    let n = h.checked_mul(w).ok_or_else(|| bad("image too large"))?;
    let mut v = ViewBuffers::empty(h, w);
    let mut found = [false; 4];
    for (name, comps) in &header {
        let bytes = r
            .take(n * comps * 4)
            .ok_or_else(|| bad("truncated channel data"))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let Some(k) = CHANNELS.iter().position(|(c, _)| c == name) else {
            continue;
        };
        if CHANNELS[k].1 as usize != *comps {
            return Err(bad(&format!("channel {name} has {comps} components")));
        }
        found[k] = true;
        match k {
            0 => v.rgb = data,
            1 => v.normal = data,
            2 => v.depth = data,
            _ => v.hit = data,
        }
    }
    if let Some(k) = found.iter().position(|f| !f) {
        return Err(bad(&format!("missing channel {}", CHANNELS[k].0)));
    }
    let ids = r.take(n * 4).ok_or_else(|| bad("truncated triangle ids"))?;
    v.tri_id = ids
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(v)
}

pub fn write_view(path: &Path, v: &ViewBuffers) -> Result<()> {
    fs::write(path, encode_view(v))?;
    Ok(())
}

pub fn read_view(path: &Path) -> Result<ViewBuffers> {
    decode_view(&fs::read(path)?, path)
}

pub fn write_rgb_preview(path: &Path, v: &ViewBuffers) -> Result<()> {
    let img = image::RgbImage::from_fn(v.width as u32, v.height as u32, |x, y| {
        let p = y as usize * v.width + x as usize;
        image::Rgb([0, 1, 2].map(|k| (v.rgb[3 * p + k].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    img.save(path)?;
    Ok(())
}
