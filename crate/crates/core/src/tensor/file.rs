//! The `.ten` raw tensor format:
//! `"TNSR"`, u8 dtype (0 = f32, 1 = f64, 2 = u8), u8 rank, rank × u32 LE
//! dims, then the row-major little-endian payload.

use std::io::{Read, Write};

use super::{validate_shape, DType, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TNSR";

/// Any tensor that can live in a `.ten` file.
#[derive(Debug, Clone, PartialEq)]
pub enum TenData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl TenData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TenData::F32(t) => t.shape(),
            TenData::F64(t) => t.shape(),
            TenData::U8 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TenData::F32(_) => DType::F32,
            TenData::F64(_) => DType::F64,
            TenData::U8 { .. } => DType::U8,
        }
    }
}

pub fn write_ten<W: Write>(mut w: W, t: &TenData) -> Result<()> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large for .ten", shape.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[t.dtype() as u8, shape.len() as u8])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match t {
        TenData::F32(t) => {
            let mut buf = Vec::with_capacity(t.len() * 4);
            t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        TenData::F64(t) => {
            let mut buf = Vec::with_capacity(t.len() * 8);
            t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        TenData::U8 { data, .. } => w.write_all(data)?,
    }
    Ok(())
}

pub fn read_ten<R: Read>(mut r: R) -> Result<TenData> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad .ten magic".into()));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    validate_shape(&shape).map_err(|e| Error::Format(e.to_string()))?;
    let len: usize = shape.iter().product();
    let data = match head[4] {
        0 => {
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf)?;
            let vals = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TenData::F32(Tensor::new(&shape, vals)?)
        }
        1 => {
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            let vals = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            TenData::F64(Tensor::new(&shape, vals)?)
        }
        2 => {
            let mut data = vec![0u8; len];
            r.read_exact(&mut data)?;
            TenData::U8 { shape, data }
        }
        other => return Err(Error::Format(format!("unknown .ten dtype {other}"))),
    };
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let t = Tensor::<f64>::new(&[2, 3], vec![0.1, -0.0, 1e-300, 3.5, f64::MAX, 7.0]).unwrap();
        let mut buf = Vec::new();
        write_ten(&mut buf, &TenData::F64(t.clone())).unwrap();
        assert_eq!(&buf[..4], b"TNSR");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 2);
        assert_eq!(buf.len(), 6 + 8 + 48);
        let back = read_ten(buf.as_slice()).unwrap();
        let TenData::F64(b) = back else { panic!("wrong dtype") };
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&b), bits(&t));
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        assert!(read_ten(&b"TNSX\x00\x01\x01\x00\x00\x00\x00\x00\x00\x00"[..]).is_err());
        assert!(read_ten(&b"TNSR\x07\x01\x01\x00\x00\x00\x00"[..]).is_err());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut buf = Vec::new();
        let t = TenData::U8 { shape: vec![4], data: vec![1, 2, 3, 4] };
        write_ten(&mut buf, &t).unwrap();
        buf.pop();
        assert!(read_ten(buf.as_slice()).is_err());
    }
}
