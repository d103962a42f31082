//! Binary PGM (P5) emit/ingest for masks and map renders.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::RealTensor;

/// Writes a binary mask as P5 with values 0/255.
pub fn write_mask<T: Scalar>(path: &Path, mask: &RealTensor<T>) -> Result<()> {
    let (h, w) = dims2(mask)?;
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let half = T::of(0.5);
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v > half { 255 } else { 0 })
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Writes a nonnegative map as P5, scaled so its maximum maps to 255.
pub fn write_map<T: Scalar>(path: &Path, map: &RealTensor<T>) -> Result<()> {
    let (h, w) = dims2(map)?;
    let peak = map.max_value().max(T::min_positive_value());
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| {
            let scaled = (v / peak).max(T::zero()).min(T::one());
            (scaled.to_f64_lossy() * 255.0).round() as u8
        })
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Reads a P5 file back as a binary mask (pixel ≥ 128 → 1).
pub fn read_mask<T: Scalar>(path: &Path) -> Result<RealTensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    parse_p5(&raw)
}

fn dims2<T: Scalar>(t: &RealTensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(CoreError::ShapeMismatch {
            context: "pgm",
            expected: vec![2],
            got: vec![t.shape().len()],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn parse_p5<T: Scalar>(raw: &[u8]) -> Result<RealTensor<T>> {
    let bad = |m: &str| CoreError::BadPgm(m.to_string());
    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> Result<String> {
        // Skip whitespace and `#` comments.
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CoreError::BadPgm("unexpected end of header".into()));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };

    if token(raw)? != "P5" {
        return Err(bad("not a P5 file"));
    }
    let w: usize = token(raw)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(raw)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(raw)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("unsupported maxval"));
    }
    pos += 1; // single whitespace after maxval
    if raw.len() < pos + h * w {
        return Err(bad("truncated pixel data"));
    }
    let data = raw[pos..pos + h * w]
        .iter()
        .map(|&b| if (b as usize) * 2 >= maxval { T::one() } else { T::zero() })
        .collect();
    RealTensor::from_vec(&[h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::env::temp_dir;

    #[test]
    fn mask_round_trip() {
        let mask = RealTensor::from_vec(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let path = temp_dir().join("nexop_pgm_roundtrip_test.pgm");
        write_mask(&path, &mask).unwrap();
        let back: RealTensor<f64> = read_mask(&path).unwrap();
        assert_eq!(mask, back);
        std::fs::remove_file(path).ok();
    }
}
