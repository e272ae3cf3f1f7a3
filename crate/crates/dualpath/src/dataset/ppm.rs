//! Binary PPM (P6, 8-bit) image files.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write a `[3, H, W]` tensor with values in [0,1] as binary PPM.
pub fn save_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Dimension(format!("PPM expects [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut bytes = Vec::with_capacity(20 + 3 * h * w);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[(c * h + y) * w + x];
                bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a binary PPM into a `[3, H, W]` tensor with values `byte/255`.
pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let name = path.display();
    if !bytes.starts_with(b"P6") {
        return Err(Error::Format(format!("{name}: not a binary PPM (missing P6 magic)")));
    }
    // Header: magic, width, height, maxval, each separated by whitespace,
    // then a single whitespace byte before the raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("{name}: malformed PPM header")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("{name}: malformed PPM header")))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::Format(format!("{name}: only 8-bit PPM supported, maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!(
            "{name}: truncated raster, need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let mut data = vec![0.0; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let b = bytes[pos + (y * w + x) * 3 + c];
                data[(c * h + y) * w + x] = f64::from(b) / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trips_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = Tensor::new(vec![3, 4, 5], data).unwrap();
        save_ppm(&path, &img).unwrap();
        assert_eq!(load_ppm(&path).unwrap(), img);
    }

    #[test]
    fn load_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        std::fs::write(&path, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(matches!(load_ppm(&path), Err(Error::Format(_))));
    }

    #[test]
    fn load_rejects_truncated_raster() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        std::fs::write(&path, b"P6\n2 2\n255\nabc").unwrap();
        assert!(matches!(load_ppm(&path), Err(Error::Format(_))));
    }
}
