//! Binary tensor container used for checkpoints and state dumps.
//!
//! Layout (little-endian): magic `MEMTK1\0\0`, `u32` tensor count, then per
//! tensor `u16` name length, name bytes, `u8` dtype (0 = f32, 1 = f64), `u8`
//! rank, `rank x u32` extents and the raw values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MEMTK1\0\0";

pub fn write<T: Scalar>(store: &ParamStore<T>, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[T::DTYPE as u8, t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            match T::DTYPE {
                DType::F32 => w.write_all(&(v.as_f64() as f32).to_le_bytes())?,
                DType::F64 => w.write_all(&v.as_f64().to_le_bytes())?,
            }
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

/// Reads a container, converting stored values to `T`.
pub fn read<T: Scalar>(r: &mut impl Read) -> Result<ParamStore<T>> {
    if &read_exact::<8>(r)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let count = u32::from_le_bytes(read_exact(r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let [dtype, rank] = read_exact::<2>(r)?;
        let shape = (0..rank)
            .map(|_| read_exact::<4>(r).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            0 => (0..n)
                .map(|_| read_exact::<4>(r).map(|b| T::from_f64(f32::from_le_bytes(b) as f64)))
                .collect::<Result<Vec<T>>>()?,
            1 => (0..n)
                .map(|_| read_exact::<8>(r).map(|b| T::from_f64(f64::from_le_bytes(b))))
                .collect::<Result<Vec<T>>>()?,
            d => return Err(Error::Format(format!("unknown dtype byte {d} for {name}"))),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        store.insert(name, t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(store)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read(&mut r)
}
