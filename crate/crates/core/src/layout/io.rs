//! Binary tensor dump used for golden files.
//!
//! Little-endian layout: magic `"FIKV"`, `version: u32`, `dims: [u32; 4]`,
//! then the raw element values. The element type is the caller's choice; the
//! reader checks that the payload size matches `dims` for the requested type.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FIKV_MAGIC: [u8; 4] = *b"FIKV";
pub const FIKV_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorHeader {
    pub version: u32,
    pub dims: [u32; 4],
}

impl TensorHeader {
    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

pub fn write_tensor<T: Scalar, W: Write>(mut w: W, dims: [u32; 4], data: &[T]) -> Result<()> {
    let count: usize = dims.iter().map(|&d| d as usize).product();
    if data.len() != count {
        return Err(Error::DimensionMismatch {
            context: format!("tensor dump: {} values for dims {dims:?}", data.len()),
        });
    }
    w.write_all(&FIKV_MAGIC)?;
    w.write_all(&FIKV_VERSION.to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    // elements as little-endian f32 or f64 depending on T
    if size_of::<T>() == 4 {
        for x in data {
            w.write_all(&(x.to_f64() as f32).to_le_bytes())?;
        }
    } else {
        for x in data {
            w.write_all(&x.to_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensor<T: Scalar, R: Read>(mut r: R) -> Result<(TensorHeader, Vec<T>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != FIKV_MAGIC {
        return Err(Error::BadTensorFile(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FIKV_VERSION {
        return Err(Error::BadTensorFile(format!(
            "unsupported version {version}"
        )));
    }
    let mut dims = [0u32; 4];
    for d in dims.iter_mut() {
        r.read_exact(&mut word)?;
        *d = u32::from_le_bytes(word);
    }
    let header = TensorHeader { version, dims };
    let count = header.element_count();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != count * size_of::<T>() {
        return Err(Error::BadTensorFile(format!(
            "payload of {} bytes does not hold {count} elements of {} bytes",
            payload.len(),
            size_of::<T>()
        )));
    }
    let mut data = Vec::with_capacity(count);
    if size_of::<T>() == 4 {
        for chunk in payload.chunks_exact(4) {
            data.push(T::from_f64(
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64
            ));
        }
    } else {
        for chunk in payload.chunks_exact(8) {
            data.push(T::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
        }
    }
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let mut buf = Vec::new();
        write_tensor::<f32, _>(&mut buf, [2, 1, 3, 1], &[0.0; 6]).unwrap();
        assert_eq!(&buf[..4], b"FIKV");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &3u32.to_le_bytes());
        assert_eq!(&buf[20..24], &1u32.to_le_bytes());
        assert_eq!(buf.len(), 24 + 6 * 4);
    }

    #[test]
    fn round_trip_preserves_values() {
        let data: Vec<f64> = (0..12).map(|x| x as f64 * 0.37 - 1.0).collect();
        let mut buf = Vec::new();
        write_tensor(&mut buf, [3, 2, 2, 1], &data).unwrap();
        let (header, back) = read_tensor::<f64, _>(buf.as_slice()).unwrap();
        assert_eq!(header.dims, [3, 2, 2, 1]);
        assert_eq!(back, data);

        let f32_data: Vec<f32> = data.iter().map(|&x| x as f32).collect();
        let mut buf = Vec::new();
        write_tensor(&mut buf, [12, 1, 1, 1], &f32_data).unwrap();
        let (_, back) = read_tensor::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(back, f32_data);
    }

    #[test]
    fn reader_rejects_corrupt_files() {
        let mut buf = Vec::new();
        write_tensor::<f32, _>(&mut buf, [2, 2, 1, 1], &[0.0; 4]).unwrap();
        // wrong magic
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor::<f32, _>(bad.as_slice()).is_err());
        // truncated payload
        let bad = &buf[..buf.len() - 2];
        assert!(read_tensor::<f32, _>(bad).is_err());
        // element size mismatch
        assert!(read_tensor::<f64, _>(buf.as_slice()).is_err());
    }
}
