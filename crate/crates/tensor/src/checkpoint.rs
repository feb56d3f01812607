//! Flat binary checkpoint: the magic `MIDCKPT1`, then per tensor the name
//! length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each) and the raw
//! little-endian `f32` data. Entries run to end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MIDCKPT1";

pub fn write_checkpoint<'a, W: Write>(
    mut out: W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in entries {
        let len = u32::try_from(name.len()).map_err(|_| TensorError::Checkpoint(format!("name too long: {name}")))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| TensorError::Checkpoint(format!("truncated entry: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| TensorError::Checkpoint("missing magic header".into()))?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic header".into()));
    }
    let mut entries = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match input.read(&mut len[..1]) {
            Ok(0) => break,
            Ok(_) => {
                input.read_exact(&mut len[1..]).map_err(|e| TensorError::Checkpoint(format!("truncated entry: {e}")))?
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut name).map_err(|e| TensorError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw).map_err(|e| TensorError::Checkpoint(format!("truncated data for `{name}`: {e}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

pub fn save_checkpoint<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
