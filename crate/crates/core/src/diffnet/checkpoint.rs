//! Binary parameter container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes  "HFLW"
//! version  u32      1
//! seed     u64
//! count    u32      number of arrays
//! per array:
//!   name_len u32, name (UTF-8), rows u64, cols u64, rows·cols f64 (row-major)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"HFLW";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_params<T: Real, W: Write>(params: &ParameterSet<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&params.seed.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, a) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(a.nrows() as u64).to_le_bytes())?;
        w.write_all(&(a.ncols() as u64).to_le_bytes())?;
        for v in a.iter() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

pub fn read_params<T: Real, R: Read>(mut r: R) -> Result<ParameterSet<T>> {
    if &read_exact::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("not a parameter checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let seed = u64::from_le_bytes(read_exact(&mut r)?);
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut params = ParameterSet::new(seed);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let rows = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let cols = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("array too large".into()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::lit(f64::from_le_bytes(read_exact(&mut r)?)));
        }
        if params.index_of(&name).is_some() {
            return Err(Error::Format(format!("duplicate array `{name}`")));
        }
        params.push(name, Array2::from_shape_vec((rows, cols), data).expect("shape"));
    }
    Ok(params)
}

pub fn save_params<T: Real>(params: &ParameterSet<T>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_params(params, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_params<T: Real>(path: &Path) -> Result<ParameterSet<T>> {
    let f = std::fs::File::open(path)?;
    read_params(std::io::BufReader::new(f))
}
