//! Flat binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SFAH1"
//! u32 header_len, header bytes (UTF-8, free-form key=value lines)
//! repeated until EOF:
//!   u32 name_len, name bytes
//!   u32 rank, rank x u64 dims
//!   prod(dims) x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SFAH1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub leaves: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_tree(header: &str, tree: &ParamTree) -> Self {
        Self {
            header: header.to_string(),
            leaves: tree
                .iter()
                .map(|(k, p)| (k.clone(), p.tensor.detached()))
                .collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, self.header.len())?;
        w.write_all(self.header.as_bytes())?;
        for (name, t) in &self.leaves {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.rank())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| corrupt("file too short for magic"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let hlen = read_u32(&mut r)? as usize;
        let header = String::from_utf8(take(&mut r, hlen)?.to_vec())
            .map_err(|_| corrupt("header is not UTF-8"))?;
        let mut leaves = Vec::new();
        while !r.is_empty() {
            let nlen = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, nlen)?.to_vec())
                .map_err(|_| corrupt("leaf name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let b = take(&mut r, 8)?;
                shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            leaves.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Self { header, leaves })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies every stored leaf into `tree`. Names and shapes must match the
    /// tree exactly.
    pub fn restore_into(&self, tree: &mut ParamTree) -> Result<()> {
        if self.leaves.len() != tree.len() {
            return Err(corrupt(&format!(
                "checkpoint has {} leaves, model expects {}",
                self.leaves.len(),
                tree.len()
            )));
        }
        for (name, t) in &self.leaves {
            let p = tree.get_mut(name)?;
            if p.tensor.shape() != t.shape() {
                return Err(corrupt(&format!(
                    "leaf `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

fn corrupt(msg: &str) -> TensorError {
    TensorError::Checkpoint(msg.to_string())
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| corrupt("length exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let b = take(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(corrupt("unexpected end of data"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
