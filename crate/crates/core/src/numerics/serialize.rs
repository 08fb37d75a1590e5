//! Little-endian tensor encoding: `u32` rank, `u64` extents, then the `f64`
//! payload in row-major order.

use std::io::{self, Read, Write};

use super::Tensor;

const MAX_RANK: u32 = 16;
const TABLE_MAGIC: &[u8; 4] = b"ACPT";
const TABLE_VERSION: u32 = 1;

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> io::Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> io::Result<Tensor> {
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(invalid(format!("tensor rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let e = read_u64(r)?;
        count = count
            .checked_mul(e)
            .filter(|&c| c <= (1 << 32))
            .ok_or_else(|| invalid("tensor element count overflows"))?;
        shape.push(e as usize);
    }
    let mut data = Vec::with_capacity(count as usize);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * t.rank() + 8 * t.len());
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> io::Result<Tensor> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(invalid(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}

/// Write an ordered table of named tensors: magic `ACPT`, `u32` version,
/// `u32` count, then per entry a `u32` name length, UTF-8 name, and tensor.
pub fn write_table<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> io::Result<()> {
    w.write_all(TABLE_MAGIC)?;
    w.write_all(&TABLE_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_table<R: Read>(r: &mut R) -> io::Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TABLE_MAGIC {
        return Err(invalid("bad tensor-table magic"));
    }
    let version = read_u32(r)?;
    if version != TABLE_VERSION {
        return Err(invalid(format!("unsupported tensor-table version {version}")));
    }
    let count = read_u32(r)?;
    let mut entries = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = read_u32(r)?;
        if len > 4096 {
            return Err(invalid("tensor name too long"));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("tensor name is not UTF-8"))?;
        entries.push((name, read_tensor(r)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(invalid("trailing bytes after tensor table"));
    }
    Ok(entries)
}
