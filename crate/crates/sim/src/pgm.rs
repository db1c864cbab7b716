//! Depth images as 16-bit binary PGM (0.1 mm per count) with a JSON
//! sidecar holding the intrinsics.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use carm_core::depth::{CameraIntrinsics, DepthError, DepthImage};
use serde::{Deserialize, Serialize};

/// Millimetres per PGM count.
pub const DEPTH_UNIT_MM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum PgmError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad PGM: {0}")]
    Format(String),
    #[error("sidecar {path}: {source}")]
    Sidecar { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Depth(#[from] DepthError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub intrinsics: CameraIntrinsics,
    pub timestamp: f64,
    pub depth_unit_mm: f64,
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

fn counts(img: &DepthImage) -> impl Iterator<Item = u16> + '_ {
    img.depths()
        .iter()
        .map(|d| (d / DEPTH_UNIT_MM).round().clamp(0.0, u16::MAX as f64) as u16)
}

pub fn encode_pgm<W: Write>(mut w: W, img: &DepthImage) -> std::io::Result<()> {
    let k = img.intrinsics();
    write!(w, "P5\n{} {}\n65535\n", k.width, k.height)?;
    let body: Vec<u8> = counts(img).flat_map(u16::to_be_bytes).collect();
    w.write_all(&body)
}

/// Parses the raster; depths are returned in mm.
pub fn decode_pgm<R: BufRead>(mut r: R) -> Result<(u32, u32, Vec<f64>), PgmError> {
    let mut header = Vec::new();
    let mut fields = Vec::new();
    // Magic, width, height, maxval; '#' comments allowed between fields.
    while fields.len() < 4 {
        header.clear();
        if r.read_until(b'\n', &mut header).map_err(|e| PgmError::Format(e.to_string()))? == 0 {
            return Err(PgmError::Format("unexpected end of header".into()));
        }
        let line = String::from_utf8_lossy(&header);
        let line = line.split('#').next().unwrap_or("");
        fields.extend(line.split_whitespace().map(str::to_string));
    }
    if fields.len() != 4 || fields[0] != "P5" {
        return Err(PgmError::Format("expected 'P5 <w> <h> 65535' header".into()));
    }
    let parse = |s: &str| s.parse::<u32>().map_err(|_| PgmError::Format(format!("bad header field {s:?}")));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 65535 {
        return Err(PgmError::Format(format!("maxval {max}, expected 65535")));
    }
    let n = w as usize * h as usize;
    let mut body = Vec::with_capacity(n * 2);
    r.take(n as u64 * 2).read_to_end(&mut body).map_err(|e| PgmError::Format(e.to_string()))?;
    if body.len() != n * 2 {
        return Err(PgmError::Format(format!("raster has {} bytes, expected {}", body.len(), n * 2)));
    }
    let depth = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * DEPTH_UNIT_MM)
        .collect();
    Ok((w, h, depth))
}

pub fn write_depth(path: &Path, img: &DepthImage) -> Result<(), PgmError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| PgmError::Io { path: p, source }
    };
    let mut buf = Vec::new();
    encode_pgm(&mut buf, img).map_err(io(path))?;
    std::fs::write(path, buf).map_err(io(path))?;
    let side = sidecar_path(path);
    let meta = DepthSidecar {
        intrinsics: *img.intrinsics(),
        timestamp: img.timestamp(),
        depth_unit_mm: DEPTH_UNIT_MM,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|source| PgmError::Sidecar { path: side.clone(), source })?;
    std::fs::write(&side, text + "\n").map_err(io(&side))
}

pub fn read_depth(path: &Path) -> Result<DepthImage, PgmError> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|source| PgmError::Io { path: side.clone(), source })?;
    let meta: DepthSidecar = serde_json::from_str(&text).map_err(|source| PgmError::Sidecar { path: side.clone(), source })?;
    let file = std::fs::File::open(path).map_err(|source| PgmError::Io { path: path.to_path_buf(), source })?;
    let (w, h, mut depth) = decode_pgm(std::io::BufReader::new(file))?;
    if (w, h) != (meta.intrinsics.width, meta.intrinsics.height) {
        return Err(PgmError::Format(format!(
            "raster {w}x{h} does not match intrinsics {}x{}",
            meta.intrinsics.width, meta.intrinsics.height
        )));
    }
    if meta.depth_unit_mm != DEPTH_UNIT_MM {
        let scale = meta.depth_unit_mm / DEPTH_UNIT_MM;
        depth.iter_mut().for_each(|d| *d *= scale);
    }
    Ok(DepthImage::new(meta.intrinsics, depth, meta.timestamp)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_quantizes_to_tenth_mm() {
        let k = CameraIntrinsics {
            width: 3,
            height: 2,
            cx: 1.0,
            cy: 1.0,
            ..CameraIntrinsics::default()
        };
        let img = DepthImage::new(k, vec![0.0, 1000.04, 1500.06, 6553.5, 7000.0, 0.2], 1.5).unwrap();
        let mut buf = Vec::new();
        encode_pgm(&mut buf, &img).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n65535\n"));
        let (w, h, d) = decode_pgm(&buf[..]).unwrap();
        assert_eq!((w, h), (3, 2));
        let expected = [0.0, 1000.0, 1500.1, 6553.5, 6553.5, 0.2];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn short_raster_rejected() {
        assert!(matches!(decode_pgm(&b"P5\n2 2\n65535\n\x00\x01"[..]), Err(PgmError::Format(_))));
    }
}
