//! Per-slide binary bag files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MBG1" | version u16 | level count u8 | D u32
//! per level: T_k u32 | ratio u32 (0 at level 0)
//!            | T_k × (row i32, col i32) | T_k × parent u32 (0xFFFFFFFF at level 0)
//!            | T_k × D embeddings f32, row-major
//! ```
//!
//! Embeddings are stored as f32, so a bag round-trips bit-exactly when its
//! values are f32-representable (the generator guarantees this).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pyramid::{BagLevel, TokenBag};

pub const BAG_MAGIC: &[u8; 4] = b"MBG1";
pub const BAG_VERSION: u16 = 1;
const NO_PARENT: u32 = u32::MAX;

pub fn encode_bag(bag: &TokenBag) -> Result<Vec<u8>> {
    bag.validate()?;
    if bag.num_levels() > u8::MAX as usize {
        return Err(Error::Count(format!("{} levels do not fit the format", bag.num_levels())));
    }
    let mut out = Vec::new();
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.push(bag.num_levels() as u8);
    out.extend_from_slice(&(bag.dim as u32).to_le_bytes());
    for (k, level) in bag.levels.iter().enumerate() {
        out.extend_from_slice(&(level.len() as u32).to_le_bytes());
        out.extend_from_slice(&level.ratio.to_le_bytes());
        for &(r, c) in &level.coords {
            out.extend_from_slice(&r.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        for i in 0..level.len() {
            let p = if k == 0 { NO_PARENT } else { level.parents[i] as u32 };
            out.extend_from_slice(&p.to_le_bytes());
        }
        for &v in level.embeddings.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    /// Fails before allocating when `count × width` bytes are not available.
    fn ensure(&self, count: usize, width: usize, what: &str) -> Result<()> {
        match count.checked_mul(width) {
            Some(n) if n <= self.buf.len() - self.pos => Ok(()),
            _ => Err(self.fail(format!("truncated {what}: {count} entries declared"))),
        }
    }
}

pub fn decode_bag(bytes: &[u8]) -> Result<TokenBag> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    if rd.take(4, "magic")? != BAG_MAGIC {
        rd.pos = 0;
        return Err(rd.fail("bad magic"));
    }
    let version = u16::from_le_bytes(rd.take(2, "version")?.try_into().unwrap());
    if version != BAG_VERSION {
        rd.pos -= 2;
        return Err(rd.fail(format!("unsupported version {version}")));
    }
    let n_levels = rd.take(1, "level count")?[0] as usize;
    if n_levels == 0 {
        rd.pos -= 1;
        return Err(rd.fail("zero levels"));
    }
    let dim = rd.u32("dimension")? as usize;
    if dim == 0 {
        rd.pos -= 4;
        return Err(rd.fail("zero embedding dimension"));
    }

    let mut levels: Vec<BagLevel> = Vec::with_capacity(n_levels);
    for k in 0..n_levels {
        let level_start = rd.pos;
        let t = rd.u32("token count")? as usize;
        let ratio = rd.u32("ratio")?;
        if (k == 0) != (ratio == 0) {
            rd.pos -= 4;
            return Err(rd.fail(format!("level {k} has ratio {ratio}")));
        }
        rd.ensure(t, 8 + 4 + 4 * dim, "level payload")?;
        let mut coords = Vec::with_capacity(t);
        for _ in 0..t {
            let r = rd.i32("coordinate")?;
            let c = rd.i32("coordinate")?;
            coords.push((r, c));
        }
        let prev_len = if k == 0 { 0 } else { levels[k - 1].len() };
        let mut parents = Vec::with_capacity(if k == 0 { 0 } else { t });
        for _ in 0..t {
            let at = rd.pos;
            let p = rd.u32("parent")?;
            if k == 0 {
                if p != NO_PARENT {
                    rd.pos = at;
                    return Err(rd.fail(format!("level-0 token has parent {p}")));
                }
            } else if p as usize >= prev_len {
                rd.pos = at;
                return Err(rd.fail(format!(
                    "parent index {p} out of range for {prev_len} tokens at level {}",
                    k - 1
                )));
            } else {
                parents.push(p as usize);
            }
        }
        let raw = rd.take(4 * t * dim, "embeddings")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            rd.pos -= 4 * (t * dim - i);
            return Err(rd.fail("non-finite embedding value"));
        }
        let level = BagLevel {
            embeddings: Tensor::matrix(t, dim, data)?,
            coords,
            parents,
            ratio,
        };
        levels.push(level);
        let partial = TokenBag {
            dim,
            levels: levels.clone(),
        };
        if let Err(e) = partial.validate() {
            return Err(Error::Format {
                offset: level_start,
                detail: format!("level {k}: {e}"),
            });
        }
    }
    if rd.pos != bytes.len() {
        return Err(rd.fail(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    Ok(TokenBag { dim, levels })
}

pub fn write_bag(bag: &TokenBag, path: &Path) -> Result<()> {
    let bytes = encode_bag(bag)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: &Path) -> Result<TokenBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(&bytes)
}
