//! Little-endian tensor checkpoint files.
//!
//! Layout: magic `ARDM`, format version (u32), tensor count (u32), then per
//! tensor: name length (u32), UTF-8 name, rank (u32), dims (u32 each), and
//! the values as raw f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ARDM";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(to_u32(tensors.len())?)?;
    for (name, t) in tensors {
        w.write_u32::<LittleEndian>(to_u32(name.len())?)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(to_u32(t.rank())?)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(to_u32(d)?)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        let t = Tensor::new(shape, data.into_iter().map(f64::from).collect())
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_tensors(BufReader::new(File::open(path)?))
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".into(), t.clone())]).unwrap();
        assert_eq!(&buf[..4], b"ARDM");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(buf[16], b'w');
        assert_eq!(&buf[17..21], &2u32.to_le_bytes());
        assert_eq!(&buf[29..33], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 37);
        let back = read_tensors(&buf[..]).unwrap();
        assert_eq!(back, vec![("w".to_string(), t)]);
    }

    #[test]
    fn rejects_wrong_magic() {
        let err = read_tensors(&b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
