use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

pub const TOKEN_MAGIC: &[u8; 4] = b"OWTK";
pub const TOKEN_VERSION: u32 = 1;

/// Writes `n x d` rows as: magic, version, n, d (u32 LE), then row-major
/// f32 LE values.
pub fn write_token_dump<T: Real>(w: &mut impl Write, rows: &Tensor<T>) -> Result<()> {
    w.write_all(TOKEN_MAGIC)?;
    w.write_all(&TOKEN_VERSION.to_le_bytes())?;
    w.write_all(&(rows.rows() as u32).to_le_bytes())?;
    w.write_all(&(rows.cols() as u32).to_le_bytes())?;
    for &v in rows.data() {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_token_dump(r: &mut impl Read) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TOKEN_MAGIC {
        return Err(Error::Invalid(format!("bad token dump magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != TOKEN_VERSION {
        return Err(Error::Invalid(format!("unsupported token dump version {version}")));
    }
    let n = read_u32(r)? as usize;
    let d = read_u32(r)? as usize;
    let mut buf = vec![0u8; n * d * 4];
    r.read_exact(&mut buf)?;
    let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::matrix(n, d, data)
}
