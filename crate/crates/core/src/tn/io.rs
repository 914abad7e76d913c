//! Binary serialization of tensor trains.
//!
//! Layout: `b"FETT1"`, one version byte, `u64` site count, then per site four
//! `u64` dimensions `(left, out, in, right)` followed by the row-major entries
//! as `(re, im)` f64 pairs; a trailing f64 holds `log_norm`. All integers and
//! floats are little-endian. States are written with `in = 1`.

use std::io::{Read, Write};

use ndarray::{Array3, Array4};
use num_complex::Complex64 as C64;
use thiserror::Error;

use super::{OperatorTrain, TensorTrain};

pub const MAGIC: &[u8; 5] = b"FETT1";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("truncated or malformed data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn read_u64(r: &mut impl Read) -> Result<u64, IoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| IoError::Malformed(e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, IoError> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn write_header(w: &mut impl Write, n: usize) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(n as u64).to_le_bytes())
}

fn write_site<'a>(w: &mut impl Write, dims: [usize; 4], data: impl Iterator<Item = &'a C64>) -> std::io::Result<()> {
    for d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for z in data {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

type RawSite = ([usize; 4], Vec<C64>);

fn read_raw(r: &mut impl Read) -> Result<(Vec<RawSite>, f64), IoError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| IoError::BadMagic)?;
    if &magic != MAGIC {
        return Err(IoError::BadMagic);
    }
    let mut v = [0u8; 1];
    r.read_exact(&mut v).map_err(|e| IoError::Malformed(e.to_string()))?;
    if v[0] != VERSION {
        return Err(IoError::BadVersion(v[0]));
    }
    let n = read_u64(r)? as usize;
    if n == 0 || n > 1 << 20 {
        return Err(IoError::Malformed(format!("site count {n}")));
    }
    let mut sites = Vec::with_capacity(n);
    for _ in 0..n {
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u64(r)? as usize;
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l <= 1 << 32)
            .ok_or_else(|| IoError::Malformed(format!("dimensions {dims:?}")))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let re = read_f64(r)?;
            let im = read_f64(r)?;
            data.push(C64::new(re, im));
        }
        sites.push((dims, data));
    }
    let log_norm = read_f64(r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(IoError::Malformed("trailing bytes".into()));
    }
    Ok((sites, log_norm))
}

pub fn write_state(w: &mut impl Write, tt: &TensorTrain) -> std::io::Result<()> {
    write_header(w, tt.len())?;
    for s in tt.sites() {
        let (l, d, r) = s.dim();
        write_site(w, [l, d, 1, r], s.iter())?;
    }
    w.write_all(&tt.log_norm().to_le_bytes())
}

pub fn write_operator(w: &mut impl Write, op: &OperatorTrain) -> std::io::Result<()> {
    write_header(w, op.len())?;
    for s in op.sites() {
        let (l, o, i, r) = s.dim();
        write_site(w, [l, o, i, r], s.iter())?;
    }
    w.write_all(&op.log_norm().to_le_bytes())
}

pub fn read_state(r: &mut impl Read) -> Result<TensorTrain, IoError> {
    let (raw, log_norm) = read_raw(r)?;
    let mut sites = Vec::with_capacity(raw.len());
    for ([l, d, i, rr], data) in raw {
        if i != 1 {
            return Err(IoError::Malformed("operator site in a state file".into()));
        }
        sites.push(Array3::from_shape_vec((l, d, rr), data).map_err(|e| IoError::Malformed(e.to_string()))?);
    }
    TensorTrain::new(sites)
        .map(|t| t.with_log_norm(log_norm))
        .map_err(|e| IoError::Malformed(e.to_string()))
}

pub fn read_operator(r: &mut impl Read) -> Result<OperatorTrain, IoError> {
    let (raw, log_norm) = read_raw(r)?;
    let mut sites = Vec::with_capacity(raw.len());
    for ([l, o, i, rr], data) in raw {
        sites.push(Array4::from_shape_vec((l, o, i, rr), data).map_err(|e| IoError::Malformed(e.to_string()))?);
    }
    OperatorTrain::new(sites)
        .map(|t| t.with_log_norm(log_norm))
        .map_err(|e| IoError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tt = TensorTrain::random(5, 4, &mut rng).unwrap().with_log_norm(-2.5);
        let mut buf = Vec::new();
        write_state(&mut buf, &tt).unwrap();
        assert_eq!(&buf[..5], MAGIC);
        let back = read_state(&mut buf.as_slice()).unwrap();
        assert_eq!(back.log_norm(), -2.5);
        assert_eq!(back.to_dense(), tt.to_dense());
    }

    #[test]
    fn operator_round_trip_and_truncation() {
        let op = OperatorTrain::identity(4).with_log_norm(0.25);
        let mut buf = Vec::new();
        write_operator(&mut buf, &op).unwrap();
        let back = read_operator(&mut buf.as_slice()).unwrap();
        assert_eq!(back.to_dense(), op.to_dense());
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_operator(&mut &cut[..]), Err(IoError::Malformed(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_operator(&mut bad.as_slice()), Err(IoError::BadMagic)));
    }
}
