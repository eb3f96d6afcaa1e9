//! Binary checkpoint plus a `key=value` sidecar manifest.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MRBL" | version u16 | head tag u8 | S u8 | record count u32
//! per record: name len u16 | name (UTF-8) | ndim u8 | dims u32 × ndim | f64 × prod(dims)
//! ```
//!
//! The sidecar lives at `<checkpoint>.manifest` and records `d_model`,
//! `inner`, `state`, `S`, `classes` and `seed`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{HeadKind, MarbleParams, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRBL";
pub const CHECKPOINT_VERSION: u16 = 1;

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn encode_checkpoint(params: &MarbleParams) -> Vec<u8> {
    let named = params.named();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(params.head_kind().tag());
    out.push((params.num_levels() - 1) as u8);
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn manifest_text(config: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "d_model={}", config.d_model);
    let _ = writeln!(s, "inner={}", config.inner);
    let _ = writeln!(s, "state={}", config.state);
    let _ = writeln!(s, "S={}", config.levels - 1);
    let _ = writeln!(s, "classes={}", config.classes);
    let _ = writeln!(s, "head={}", config.head.name());
    let _ = writeln!(s, "seed={}", config.seed);
    s
}

pub fn write_checkpoint(path: &Path, params: &MarbleParams, config: &ModelConfig) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))?;
    let side = manifest_path(path);
    fs::write(&side, manifest_text(config)).map_err(|e| Error::io(&side, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn parse_manifest(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::new(1, 1, HeadKind::Classification);
    let mut seen = 0;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad manifest line {line:?}")))?;
        let num = || {
            v.parse::<u64>()
                .map_err(|_| Error::Checkpoint(format!("bad value for {k}: {v:?}")))
        };
        match k {
            "d_model" => cfg.d_model = num()? as usize,
            "inner" => cfg.inner = num()? as usize,
            "state" => cfg.state = num()? as usize,
            "S" => cfg.levels = num()? as usize + 1,
            "classes" => cfg.classes = num()? as usize,
            "head" => cfg.head = v.parse().map_err(|_| Error::Checkpoint(format!("bad head {v:?}")))?,
            "seed" => cfg.seed = num()?,
            other => return Err(Error::Checkpoint(format!("unknown manifest key {other:?}"))),
        }
        seen += 1;
    }
    if seen < 7 {
        return Err(Error::Checkpoint("manifest is missing keys".into()));
    }
    cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(cfg)
}

/// Decodes a checkpoint against the shapes implied by `config`.
pub fn decode_checkpoint(bytes: &[u8], config: &ModelConfig) -> Result<MarbleParams> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let head = HeadKind::from_tag(cur.u8()?)?;
    let s = cur.u8()? as usize;
    if head != config.head || s + 1 != config.levels {
        return Err(Error::Checkpoint(format!(
            "header says {} head with {} levels, manifest says {} with {}",
            head.name(),
            s + 1,
            config.head.name(),
            config.levels
        )));
    }
    let mut params = MarbleParams::init_with(config, &mut crate::seed::rng_for(0, "template", &[]));
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let count = cur.u32()? as usize;
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "{count} records, expected {}",
            names.len()
        )));
    }
    for (expected, slot) in names.iter().zip(params.params_mut()) {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != expected {
            return Err(Error::Checkpoint(format!("expected {expected}, found {name}")));
        }
        let ndim = cur.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {shape:?}, model expects {:?}",
                slot.shape()
            )));
        }
        let raw = cur.take(8 * slot.len())?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(params)
}

pub fn read_checkpoint(path: &Path) -> Result<(MarbleParams, ModelConfig)> {
    let side = manifest_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let config = parse_manifest(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode_checkpoint(&bytes, &config)?;
    Ok((params, config))
}
