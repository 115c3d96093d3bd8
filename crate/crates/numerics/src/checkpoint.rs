//! Little-endian array container.
//!
//! Layout: `b"SVLA"`, version `u32`, array count `u32`, then per array:
//! name length `u32`, UTF-8 name, rank `u32`, `rank` × `u32` dims, and
//! `f32` data. Nothing may follow the last array.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::NumericsError;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SVLA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array `{name}` shape/data mismatch");
        Self { name, shape: shape.to_vec(), data }
    }

    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self::new(name, t.shape(), t.data().iter().map(|v| v.to_f64_lossy() as f32).collect())
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&self.shape, self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect()).expect("shape")
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_arrays(w: &mut impl Write, arrays: &[NamedArray]) -> Result<(), NumericsError> {
    w.write_all(&MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, arrays.len() as u32)?;
    for a in arrays {
        put_u32(w, a.name.len() as u32)?;
        w.write_all(a.name.as_bytes())?;
        put_u32(w, a.shape.len() as u32)?;
        for &d in &a.shape {
            put_u32(w, d as u32)?;
        }
        let mut buf = Vec::with_capacity(a.data.len() * 4);
        for v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn eof(e: std::io::Error) -> NumericsError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        NumericsError::Format("truncated".into())
    } else {
        NumericsError::Io(e)
    }
}

fn get_u32(r: &mut impl Read) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(eof)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_arrays(r: &mut impl Read) -> Result<Vec<NamedArray>, NumericsError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if magic != MAGIC {
        return Err(NumericsError::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(NumericsError::Version { found: version, expected: VERSION });
    }
    let count = get_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = get_u32(r)? as usize;
        if nlen > 1 << 16 {
            return Err(NumericsError::Format(format!("name length {nlen}")));
        }
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(eof)?;
        let name = String::from_utf8(name).map_err(|e| NumericsError::Format(e.to_string()))?;
        let rank = get_u32(r)? as usize;
        if rank > 16 {
            return Err(NumericsError::Format(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(get_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(eof)?;
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(NamedArray { name, shape, data });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(NumericsError::Format("trailing bytes after last array".into()));
    }
    Ok(out)
}

pub fn save_arrays(path: &Path, arrays: &[NamedArray]) -> Result<(), NumericsError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_arrays(&mut w, arrays)?;
    w.flush()?;
    Ok(())
}

pub fn load_arrays(path: &Path) -> Result<Vec<NamedArray>, NumericsError> {
    read_arrays(&mut BufReader::new(File::open(path)?))
}

/// All parameters of a store, in store order.
pub fn store_arrays<T: Real>(store: &ParamStore<T>) -> Vec<NamedArray> {
    store.ids().map(|id| NamedArray::from_tensor(store.name(id), store.get(id))).collect()
}

/// Overwrites store parameters from arrays. Every store parameter must be
/// present with a matching shape; unknown arrays are an error.
pub fn restore_store<T: Real>(store: &mut ParamStore<T>, arrays: &[NamedArray]) -> Result<(), NumericsError> {
    let mut seen = vec![false; store.len()];
    for a in arrays {
        let id = store.id(&a.name).ok_or_else(|| NumericsError::UnknownParam(a.name.clone()))?;
        store.set(id, a.to_tensor())?;
        seen[id.0] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(NumericsError::Format(format!("missing parameter `{}`", store.name(crate::ParamId(missing)))));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            arrays in prop::collection::vec(
                ("[a-z.]{1,12}", prop::collection::vec(1usize..4, 0..4))
                    .prop_flat_map(|(name, shape)| {
                        let n: usize = shape.iter().product();
                        (Just(name), Just(shape), prop::collection::vec(any::<f32>(), n))
                    }),
                0..5,
            )
        ) {
            let arrays: Vec<NamedArray> = arrays.into_iter().map(|(n, s, d)| NamedArray::new(n, &s, d)).collect();
            let mut buf = Vec::new();
            write_arrays(&mut buf, &arrays).unwrap();
            let back = read_arrays(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), arrays.len());
            for (a, b) in arrays.iter().zip(&back) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.shape, &b.shape);
                let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }

    fn sample() -> Vec<u8> {
        let mut buf = Vec::new();
        write_arrays(&mut buf, &[NamedArray::new("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0])]).unwrap();
        buf
    }

    #[test]
    fn header_layout() {
        let buf = sample();
        assert_eq!(&buf[..4], b"SVLA");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        // name len 1 + "w" + rank 2 + dims + 4 floats
        assert_eq!(buf.len(), 12 + 4 + 1 + 4 + 8 + 16);
    }

    #[test]
    fn truncation_is_an_error() {
        let buf = sample();
        for cut in [3, 11, 20, buf.len() - 1] {
            assert!(read_arrays(&mut &buf[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn trailing_garbage_is_an_error() {
        let mut buf = sample();
        buf.push(0);
        assert!(read_arrays(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut buf = sample();
        buf[4] = 9;
        assert!(matches!(read_arrays(&mut buf.as_slice()), Err(NumericsError::Version { found: 9, .. })));
    }

    #[test]
    fn store_round_trip() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::new(&[3], vec![0.1, -0.2, f32::MIN_POSITIVE]).unwrap());
        s.add("b.c", Tensor::new(&[1, 2], vec![7.0, 8.5]).unwrap());
        let arrays = store_arrays(&s);
        let mut t = ParamStore::<f32>::new();
        t.add("a", Tensor::zeros(&[3]));
        t.add("b.c", Tensor::zeros(&[1, 2]));
        restore_store(&mut t, &arrays).unwrap();
        for id in s.ids() {
            assert_eq!(s.get(id), t.get(id));
        }
        let mut bad = ParamStore::<f32>::new();
        bad.add("a", Tensor::zeros(&[4]));
        bad.add("b.c", Tensor::zeros(&[1, 2]));
        assert!(restore_store(&mut bad, &arrays).is_err());
    }
}
