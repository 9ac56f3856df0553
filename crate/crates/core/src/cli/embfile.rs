//! Binary embedding files.
//!
//! Little-endian layout: `"MILE"`, u32 version, u32 dim, u32 clip count,
//! then per clip a u16 id length, the UTF-8 id, a u32 instance count and
//! `count × dim` f32 values.

use std::io::{Read, Write};
use std::path::Path;

use crate::embed::{EmbeddingSet, EmbeddingSource};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MILE";
pub const VERSION: u32 = 1;

pub fn write_embeddings<W: Write>(set: &EmbeddingSet, mut out: W) -> Result<()> {
    let io = |e| Error::io("<embedding stream>", e);
    let mut buf = Vec::with_capacity(16);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_field(set.dim, "dimension")?.to_le_bytes());
    buf.extend_from_slice(&u32_field(set.len(), "clip count")?.to_le_bytes());
    out.write_all(&buf).map_err(io)?;
    for (id, rows) in &set.entries {
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::InvalidConfig(format!("clip id longer than 65535 bytes: `{id}`")))?;
        if let Some(bad) = rows.iter().find(|r| r.len() != set.dim) {
            return Err(Error::DimMismatch {
                clip: id.clone(),
                expected: set.dim,
                got: bad.len(),
            });
        }
        buf.clear();
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.extend_from_slice(&u32_field(rows.len(), "instance count")?.to_le_bytes());
        for v in rows.iter().flatten() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn u32_field(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidConfig(format!("{what} {n} does not fit in 32 bits")))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::TruncatedFile(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

/// Parses an embedding file held in memory.
///
/// A final clip whose float block is short or overlong by a whole number of
/// rows' worth of values is reported as [`Error::DimMismatch`] for that
/// clip; other size errors are [`Error::TruncatedFile`].
pub fn parse_embeddings(data: &[u8], source: EmbeddingSource) -> Result<EmbeddingSet> {
    let mut cur = Cursor { data, pos: 0 };
    if data.len() < 4 || &data[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    cur.pos = 4;
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedEmbeddingVersion(version));
    }
    let dim = cur.u32("dimension")? as usize;
    let n_clips = cur.u32("clip count")? as usize;
    let mut set = EmbeddingSet::new(dim, source);
    for k in 0..n_clips {
        let id_len = u16::from_le_bytes(cur.take(2, "id length")?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(cur.take(id_len, "clip id")?)
            .map_err(|_| Error::TruncatedFile(format!("clip {k}: id is not valid UTF-8")))?
            .to_string();
        let count = cur.u32("instance count")? as usize;
        let need = count * dim * 4;
        let last = k + 1 == n_clips;
        if last && count > 0 && cur.remaining() != need && cur.remaining().is_multiple_of(4 * count) {
            return Err(Error::DimMismatch {
                clip: id,
                expected: dim,
                got: cur.remaining() / (4 * count),
            });
        }
        let block = cur.take(need, &format!("vectors of clip `{id}`"))?;
        let mut rows = Vec::with_capacity(count);
        for row in block.chunks_exact(4 * dim.max(1)).take(count) {
            let v: Vec<f32> = row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig(format!("clip `{id}` has non-finite values")));
            }
            rows.push(v);
        }
        if dim == 0 {
            rows = vec![Vec::new(); count];
        }
        set.insert(id, rows)?;
    }
    if cur.remaining() != 0 {
        return Err(Error::TruncatedFile(format!(
            "{} unexpected trailing bytes",
            cur.remaining()
        )));
    }
    Ok(set)
}

pub fn read_embeddings<R: Read>(mut input: R, source: EmbeddingSource) -> Result<EmbeddingSet> {
    let mut data = Vec::new();
    input
        .read_to_end(&mut data)
        .map_err(|e| Error::io("<embedding stream>", e))?;
    parse_embeddings(&data, source)
}

pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings(set, std::io::BufWriter::new(file))
}

pub fn load_embeddings(path: impl AsRef<Path>, source: EmbeddingSource) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&data, source)
}

/// Loads vectors produced by some other embedding network.
pub fn ingest_external(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    load_embeddings(path, EmbeddingSource::External)
}
