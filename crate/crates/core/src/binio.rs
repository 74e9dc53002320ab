//! Little-endian primitives shared by the binary artifact formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> Result<()> {
    w.write_all(magic)?;
    write_u32(w, version)
}

/// Reads and checks a 4-byte magic plus a u32 version, returning the version.
pub fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Format(format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&buf), String::from_utf8_lossy(magic))));
    }
    read_u32(r)
}

macro_rules! le_impl {
    ($write:ident, $read:ident, $ty:ty) => {
        pub fn $write<W: Write>(w: &mut W, v: $ty) -> Result<()> {
            w.write_all(&v.to_le_bytes())?;
            Ok(())
        }

        pub fn $read<R: Read>(r: &mut R) -> Result<$ty> {
            let mut buf = [0u8; std::mem::size_of::<$ty>()];
            r.read_exact(&mut buf)?;
            Ok(<$ty>::from_le_bytes(buf))
        }
    };
}

le_impl!(write_u8, read_u8, u8);
le_impl!(write_u32, read_u32, u32);
le_impl!(write_u64, read_u64, u64);
le_impl!(write_i32, read_i32, i32);
le_impl!(write_i64, read_i64, i64);
le_impl!(write_f32, read_f32, f32);
le_impl!(write_f64, read_f64, f64);

pub fn write_f64_slice<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for &x in xs {
        write_f64(w, x)?;
    }
    Ok(())
}

pub fn read_f64_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}

/// Length prefix as u32, rejecting values that do not fit.
pub fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))?;
    write_u32(w, n)
}

pub fn read_len<R: Read>(r: &mut R) -> Result<usize> {
    Ok(read_u32(r)? as usize)
}
