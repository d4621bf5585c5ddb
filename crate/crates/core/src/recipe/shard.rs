//! Example shards: a magic line followed by length-prefixed records of
//! `(height, width, RGB bytes, query, response, source, task)`.

use std::io::{Read, Write};

use crate::error::{Result, VitpError};
use crate::image::Image;

use super::synth::{RawExample, Task};

const MAGIC: &[u8] = b"VITP-SHARD 1\n";

fn put_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, limit: usize) -> Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    if n > limit {
        return Err(VitpError::Format(format!("record field of {n} bytes exceeds {limit}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_string(r: &mut impl Read) -> Result<String> {
    String::from_utf8(get_bytes(r, 1 << 20)?).map_err(|_| VitpError::Format("invalid UTF-8".into()))
}

/// Pixels are quantized to 8 bits.
pub fn write_shard(w: &mut impl Write, examples: &[RawExample]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(examples.len() as u32).to_le_bytes())?;
    for ex in examples {
        w.write_all(&(ex.image.height() as u32).to_le_bytes())?;
        w.write_all(&(ex.image.width() as u32).to_le_bytes())?;
        let px: Vec<u8> = ex.image.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        put_bytes(w, &px)?;
        put_bytes(w, ex.query.as_bytes())?;
        put_bytes(w, ex.response.as_bytes())?;
        put_bytes(w, ex.source.as_bytes())?;
        put_bytes(w, ex.task.name().as_bytes())?;
    }
    Ok(())
}

pub fn read_shard(r: &mut impl Read) -> Result<Vec<RawExample>> {
    let mut magic = vec![0u8; MAGIC.len()];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(VitpError::Format("not an example shard".into()));
    }
    let n = get_u32(r)?;
    let mut out = Vec::new();
    for _ in 0..n {
        let h = get_u32(r)? as usize;
        let w = get_u32(r)? as usize;
        let px = get_bytes(r, 1 << 26)?;
        if px.len() != h * w * 3 {
            return Err(VitpError::Format("pixel payload does not match dims".into()));
        }
        let image = Image::new(h, w, px.iter().map(|&b| f32::from(b) / 255.0).collect())?;
        let query = get_string(r)?;
        let response = get_string(r)?;
        let source = get_string(r)?;
        let tag = get_string(r)?;
        let task = Task::parse(&tag).ok_or_else(|| VitpError::Format(format!("unknown task {tag:?}")))?;
        out.push(RawExample {
            image,
            query,
            response,
            source,
            task,
        });
    }
    Ok(out)
}
