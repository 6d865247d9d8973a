//! Tensor blob: `u32` rank, `rank` x `u32` dims, then `f64` values, all
//! little-endian.

use std::io::{Read, Write};

use crate::error::{CmtrError, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| CmtrError::Format(format!("dimension {} exceeds u32", d)))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for &x in t.data() {
        buf.extend_from_slice(&x.as_f64().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(CmtrError::Format(format!("implausible tensor rank {}", rank)));
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
        .collect();
    Tensor::new(shape, data)
}
