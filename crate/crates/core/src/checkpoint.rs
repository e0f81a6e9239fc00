//! Named-tensor binary encoding.
//!
//! All integers are little-endian `u32`; all values little-endian `f32`.
//!
//! ```text
//! magic   b"INJT"
//! version u32 = 1
//! count   u32
//! count × {
//!     name_len u32, name [u8; name_len] (UTF-8)
//!     ndim     u32, dims [u32; ndim]
//!     values   [f32; product(dims)]   row-major
//! }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"INJT";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write, T: Scalar>(mut w: W, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_of(tensors.len())?.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&u32_of(bytes.len())?.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&u32_of(t.rank())?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&u32_of(d)?.to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors<R: Read, T: Scalar>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let dims = (0..ndim)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    read_tensors(BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f64>::new([1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w", &t)]).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"INJT");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(b'w');
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn truncated_input_is_an_error() {
        let t = Tensor::<f32>::zeros([3, 3]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a", &t)]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_tensors::<_, f32>(buf.as_slice()).is_err());
        assert!(read_tensors::<_, f32>(&b"NOPE"[..]).is_err());
    }
}
