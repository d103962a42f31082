//! NXT binary tensor format, used for every on-disk tensor in this repo.
//!
//! Layout: magic bytes `"NXT1"`, little-endian `u32` ndims, `u32 dims[ndims]`,
//! `u32` dtype code (0 = f64, 1 = interleaved complex f64 pairs), then the
//! row-major payload as little-endian f64. Complex payloads hold 2·∏dims
//! values (re, im interleaved); dims describe the logical array.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::{ComplexImage, RealTensor};

const MAGIC: &[u8; 4] = b"NXT1";

pub const DTYPE_F64: u32 = 0;
pub const DTYPE_C64: u32 = 1;

fn write_header<W: Write>(w: &mut W, dims: &[usize], dtype: u32) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&dtype.to_le_bytes())?;
    Ok(())
}

/// Reads a little-endian u32, tracking the byte offset for error reporting.
fn read_u32<R: Read>(r: &mut R, offset: &mut u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(r, &mut buf, offset)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(CoreError::TruncatedPayload {
                offset: *offset + filled as u64,
            });
        }
        filled += n;
    }
    *offset += buf.len() as u64;
    Ok(())
}

pub fn write_real_to<T: Scalar, W: Write>(w: &mut W, t: &RealTensor<T>) -> Result<()> {
    write_header(w, t.shape(), DTYPE_F64)?;
    for v in t.data() {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

pub fn write_complex_to<T: Scalar, W: Write>(w: &mut W, img: &ComplexImage<T>) -> Result<()> {
    write_header(w, &[img.height(), img.width()], DTYPE_C64)?;
    for k in 0..img.len() {
        w.write_all(&img.re.data()[k].to_f64_lossy().to_le_bytes())?;
        w.write_all(&img.im.data()[k].to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

struct Header {
    dims: Vec<usize>,
    dtype: u32,
    offset: u64,
}

fn read_file_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut offset = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, &mut offset)?;
    if &magic != MAGIC {
        return Err(CoreError::BadMagic);
    }
    let ndims = read_u32(r, &mut offset)? as usize;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(read_u32(r, &mut offset)? as usize);
    }
    let dtype = read_u32(r, &mut offset)?;
    Ok(Header { dims, dtype, offset })
}

fn read_payload<T: Scalar, R: Read>(r: &mut R, count: usize, offset: &mut u64) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        read_exact_at(r, &mut buf, offset)?;
        out.push(T::of(f64::from_le_bytes(buf)));
    }
    Ok(out)
}

pub fn read_real_from<T: Scalar, R: Read>(r: &mut R) -> Result<RealTensor<T>> {
    let mut hdr = read_file_header(r)?;
    if hdr.dtype != DTYPE_F64 {
        return Err(CoreError::BadDtype(hdr.dtype));
    }
    let n: usize = hdr.dims.iter().product();
    let data = read_payload::<T, R>(r, n, &mut hdr.offset)?;
    RealTensor::from_vec(&hdr.dims, data)
}

pub fn read_complex_from<T: Scalar, R: Read>(r: &mut R) -> Result<ComplexImage<T>> {
    let mut hdr = read_file_header(r)?;
    if hdr.dtype != DTYPE_C64 {
        return Err(CoreError::BadDtype(hdr.dtype));
    }
    if hdr.dims.len() != 2 {
        return Err(CoreError::ShapeMismatch {
            context: "nxt::read_complex",
            expected: vec![2],
            got: vec![hdr.dims.len()],
        });
    }
    let (h, w) = (hdr.dims[0], hdr.dims[1]);
    let inter = read_payload::<T, R>(r, 2 * h * w, &mut hdr.offset)?;
    let mut img = ComplexImage::zeros(h, w);
    for k in 0..h * w {
        img.re.data_mut()[k] = inter[2 * k];
        img.im.data_mut()[k] = inter[2 * k + 1];
    }
    Ok(img)
}

pub fn write_real<T: Scalar>(path: &Path, t: &RealTensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_real_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn write_complex<T: Scalar>(path: &Path, img: &ComplexImage<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_complex_to(&mut w, img)?;
    w.flush()?;
    Ok(())
}

pub fn read_real<T: Scalar>(path: &Path) -> Result<RealTensor<T>> {
    read_real_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_complex<T: Scalar>(path: &Path) -> Result<ComplexImage<T>> {
    read_complex_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn real_round_trip_is_bit_exact() {
        let t = RealTensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 9.9])
            .unwrap();
        let mut buf = Vec::new();
        write_real_to(&mut buf, &t).unwrap();
        let back: RealTensor<f64> = read_real_from(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn complex_round_trip_is_bit_exact() {
        let mut img = ComplexImage::zeros(3, 2);
        for k in 0..6 {
            img.re.data_mut()[k] = k as f64 * 0.1;
            img.im.data_mut()[k] = -(k as f64) * 0.7;
        }
        let mut buf = Vec::new();
        write_complex_to(&mut buf, &img).unwrap();
        let back: ComplexImage<f64> = read_complex_from(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let t = RealTensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_real_to(&mut buf, &t).unwrap();
        buf[0] = b'X';
        let err = read_real_from::<f64, _>(&mut Cursor::new(&buf)).unwrap_err();
        assert!(matches!(err, CoreError::BadMagic));
    }

    #[test]
    fn truncated_payload_reports_byte_offset() {
        let t = RealTensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_real_to(&mut buf, &t).unwrap();
        // Header: 4 magic + 4 ndims + 4 dims + 4 dtype = 16 bytes; cut inside
        // the third payload value.
        buf.truncate(16 + 2 * 8 + 3);
        let err = read_real_from::<f64, _>(&mut Cursor::new(&buf)).unwrap_err();
        match err {
            CoreError::TruncatedPayload { offset } => assert_eq!(offset, 16 + 2 * 8 + 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let mut img = ComplexImage::zeros(2, 2);
        img.re.data_mut()[0] = 1.0;
        let mut buf = Vec::new();
        write_complex_to(&mut buf, &img).unwrap();
        let err = read_real_from::<f64, _>(&mut Cursor::new(&buf)).unwrap_err();
        assert!(matches!(err, CoreError::BadDtype(DTYPE_C64)));
    }
}
