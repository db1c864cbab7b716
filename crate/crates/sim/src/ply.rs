//! Binary little-endian PLY with float32 `x y z` vertices in mm.

use std::io::{BufRead, Read, Write};

use carm_core::geometry::{FrameId, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum PlyError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad PLY header: {0}")]
    Header(String),
    #[error("truncated PLY body: expected {expected} vertices, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("non-finite vertex {0}")]
    NonFinite(usize),
}

pub fn write_ply<W: Write>(mut w: W, frame: FrameId, points: &[Vec3]) -> Result<(), PlyError> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\ncomment frame {frame}\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )?;
    let mut body = Vec::with_capacity(points.len() * 12);
    for p in points {
        for c in [p.x, p.y, p.z] {
            body.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Reads a cloud written by [`write_ply`]; the frame comes from the
/// `comment frame` line when present.
pub fn read_ply<R: BufRead>(mut r: R) -> Result<(Option<FrameId>, Vec<Vec3>), PlyError> {
    let mut line = String::new();
    let next_line = |r: &mut R, line: &mut String| -> Result<(), PlyError> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(PlyError::Header("unexpected end of header".into()));
        }
        Ok(())
    };
    next_line(&mut r, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(PlyError::Header("missing magic".into()));
    }
    let mut frame = None;
    let mut count = None;
    let mut props = Vec::new();
    loop {
        next_line(&mut r, &mut line)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(PlyError::Header(format!("unsupported format {other}"))),
            ["comment", "frame", name] => {
                frame = Some(
                    serde_json::from_value(serde_json::Value::String((*name).to_string()))
                        .map_err(|_| PlyError::Header(format!("unknown frame {name}")))?,
                )
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| PlyError::Header(format!("bad vertex count {n}")))?)
            }
            ["element", other, ..] => return Err(PlyError::Header(format!("unsupported element {other}"))),
            ["property", "float", name] => props.push((*name).to_string()),
            ["property", ..] => return Err(PlyError::Header(format!("unsupported property: {}", line.trim()))),
            _ => return Err(PlyError::Header(format!("unexpected line: {}", line.trim()))),
        }
    }
    if props != ["x", "y", "z"] {
        return Err(PlyError::Header("vertex properties must be float x, y, z".into()));
    }
    let n = count.ok_or_else(|| PlyError::Header("missing vertex element".into()))?;
    let mut body = Vec::with_capacity(n.saturating_mul(12).min(1 << 28));
    r.take((n as u64) * 12).read_to_end(&mut body)?;
    if body.len() < n * 12 {
        return Err(PlyError::Truncated {
            expected: n,
            found: body.len() / 12,
        });
    }
    let f = |i: usize| f32::from_le_bytes([body[i], body[i + 1], body[i + 2], body[i + 3]]) as f64;
    let mut points = Vec::with_capacity(n);
    for k in 0..n {
        let p = Vec3::new(f(k * 12), f(k * 12 + 4), f(k * 12 + 8));
        if !p.iter().all(|c| c.is_finite()) {
            return Err(PlyError::NonFinite(k));
        }
        points.push(p);
    }
    Ok((frame, points))
}
