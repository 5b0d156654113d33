//! File formats: the portable tensor container used for checkpoints, flow
//! fields and datasets, plus PGM/PPM image interchange.
//!
//! Portable tensor layout (all integers little-endian):
//! magic `MSRT`, `u8` version (1), `u8` ndim, `ndim x u32` dims, then the
//! `f32` payload in row-major order. The payload round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MSRT";
const VERSION: u8 = 1;

pub fn write_tensor_to(w: &mut impl Write, t: &Tensor<f32>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Usage(format!("tensor rank {} too large for format", t.rank())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, t.rank() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Usage(format!("dimension {} exceeds u32", d)))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from(r: &mut impl Read, origin: &str) -> Result<Tensor<f32>> {
    let bad = |msg: &str| Error::Parse { path: origin.to_string(), msg: msg.to_string() };
    let mut head = [0u8; 6];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(bad("bad magic, expected MSRT"));
    }
    if head[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", head[4])));
    }
    let ndim = head[5] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| bad("truncated dims"))?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload).map_err(|_| bad("truncated payload"))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    read_tensor_from(&mut r, &path.display().to_string())
}

/// Writes a single-plane image as a 16-bit binary PGM (P5, maxval 65535).
/// Values are clamped from `[0, 1]` onto the integer range.
pub fn write_pgm16(path: impl AsRef<Path>, height: usize, width: usize, data: &[f32]) -> Result<()> {
    if data.len() != height * width {
        return Err(Error::Usage(format!(
            "pgm: {}x{} needs {} samples, got {}",
            height,
            width,
            height * width,
            data.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n65535\n", width, height)?;
    for &v in data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        // PGM stores multi-byte samples most-significant first.
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pgm16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let (fields, payload_at) = pnm_header(&bytes, &origin)?;
    let bad = |msg: String| Error::Parse { path: origin.clone(), msg };
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)".into()));
    }
    let width: usize = fields[1].parse().map_err(|e| bad(format!("width: {}", e)))?;
    let height: usize = fields[2].parse().map_err(|e| bad(format!("height: {}", e)))?;
    let maxval: usize = fields[3].parse().map_err(|e| bad(format!("maxval: {}", e)))?;
    if maxval != 65535 {
        return Err(bad(format!("expected 16-bit PGM (maxval 65535), got {}", maxval)));
    }
    let need = height * width * 2;
    if bytes.len() < payload_at + need {
        return Err(bad("truncated payload".into()));
    }
    let data: Vec<f32> = bytes[payload_at..payload_at + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
        .collect();
    Ok((height, width, data))
}

/// Writes an RGB image tensor `[3, H, W]` with values in `[0, 1]` as a
/// binary PPM (P6, maxval 255). Quantization is `round(v * 255)` after
/// clamping, so identical tensors produce identical bytes.
pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        _ => {
            return Err(Error::Usage(format!(
                "ppm: expected [3, H, W] tensor, got {:?}",
                img.shape()
            )))
        }
    };
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    let plane = h * w;
    let d = img.data();
    let mut row = Vec::with_capacity(w * 3);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for c in 0..3 {
                let v = d[c * plane + y * w + x];
                row.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let origin = path.display().to_string();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let (fields, payload_at) = pnm_header(&bytes, &origin)?;
    let bad = |msg: &str| Error::Parse { path: origin.clone(), msg: msg.to_string() };
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("expected maxval 255"));
    }
    let need = w * h * 3;
    if bytes.len() < payload_at + need {
        return Err(bad("truncated payload"));
    }
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let b = bytes[payload_at + (y * w + x) * 3 + c];
                data[c * plane + y * w + x] = b as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Parses the four whitespace-separated header fields of a binary PNM
/// (magic, width, height, maxval), skipping `#` comments. Returns the
/// fields and the payload offset (one whitespace byte after maxval).
fn pnm_header(bytes: &[u8], origin: &str) -> Result<([String; 4], usize)> {
    let bad = || Error::Parse { path: origin.to_string(), msg: "truncated header".to_string() };
    let mut pos = 0usize;
    let mut fields: [String; 4] = Default::default();
    for field in fields.iter_mut() {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        *field = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
    }
    if pos >= bytes.len() {
        return Err(bad());
    }
    Ok((fields, pos + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let t = Tensor::from_vec(
            vec![2, 3, 4],
            (0..24).map(|v| (v as f32).sin() * 1e3).collect(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"MSRT");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 3);
        let back = read_tensor_from(&mut buf.as_slice(), "mem").unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tensor_rejects_bad_magic() {
        let buf = b"XSRT\x01\x01\x02\x00\x00\x00".to_vec();
        assert!(read_tensor_from(&mut buf.as_slice(), "mem").is_err());
    }

    #[test]
    fn pgm_roundtrip_preserves_quantized_values() {
        let dir = std::env::temp_dir().join("snapsr_io_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.pgm");
        let data: Vec<f32> = (0..12).map(|v| v as f32 / 11.0).collect();
        write_pgm16(&path, 3, 4, &data).unwrap();
        let (h, w, back) = read_pgm16(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        for (a, b) in back.iter().zip(&data) {
            assert!((a - b).abs() < 1.0 / 65535.0);
        }
    }

    #[test]
    fn ppm_roundtrip_preserves_quantized_values() {
        let dir = std::env::temp_dir().join("snapsr_io_ppm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.ppm");
        let img = Tensor::from_vec(
            vec![3, 2, 2],
            vec![0.0, 0.25, 0.5, 1.0, 0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.7, 0.6],
        )
        .unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
