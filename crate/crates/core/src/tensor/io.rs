//! Binary tensor container.
//!
//! Layout (little-endian): magic `MDTN`, version `u32`, rank `u32`, each
//! dimension as `u32`, then the values as `f64`.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MDTN";
pub const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("unexpected end of file")
    } else {
        Error::Io(e)
    }
}

/// Reads one tensor. `trainable` selects whether the result is a
/// parameter leaf or a constant.
pub fn read_tensor<R: Read>(r: &mut R, trainable: bool) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported tensor version {version}")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n <= 1 << 31)
        .ok_or_else(|| Error::format(format!("implausible tensor shape {shape:?}")))?;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if trainable {
        Tensor::param(data, &shape)
    } else {
        Tensor::new(data, &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1.5, -2.0], &[2, 1]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"MDTN");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[20..28], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 36);
        let back = read_tensor(&mut buf.as_slice(), false).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(read_tensor(&mut &buf[..buf.len() - 1], false).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor(&mut bad.as_slice(), false).is_err());
        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(read_tensor(&mut bad_version.as_slice(), false).is_err());
    }
}
