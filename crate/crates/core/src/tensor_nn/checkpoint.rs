//! `DMAD-CKPT v1` parameter files.
//!
//! Layout:
//!
//! ```text
//! DMAD-CKPT v1\n
//! param <name> <d0>x<d1>x…\n   followed by product(d) little-endian f32
//! …
//! end <record count>\n
//! ```

use std::io::Write;
use std::path::Path;

use super::{Module, Scalar, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "DMAD-CKPT v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends every parameter of `module` under `prefix`.
    pub fn add_module<F: Scalar, M: Module<F> + ?Sized>(&mut self, prefix: &str, module: &M) {
        module.visit(prefix, &mut |n, p| self.entries.push((n.to_string(), p.value.cast())));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        let dotted = format!("{prefix}.");
        self.entries.iter().any(|(n, _)| n.starts_with(&dotted))
    }

    /// Loads every parameter of `module` (named under `prefix`); missing
    /// names and shape mismatches are errors.
    pub fn load_into<F: Scalar, M: Module<F> + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut err = None;
        module.visit_mut(prefix, &mut |n, p| {
            if err.is_some() {
                return;
            }
            match self.get(n) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.cast(),
                Some(t) => {
                    err = Some(Error::Checkpoint(format!(
                        "{n}: checkpoint shape {:?}, model shape {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing parameter {n}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(out, "param {name} {}", dims.join("x")).unwrap();
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        writeln!(out, "end {}", self.entries.len()).unwrap();
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let header = read_line(bytes, &mut pos)?;
        if header != CHECKPOINT_HEADER {
            return Err(parse_err(0, format!("bad header {header:?}")));
        }
        let mut entries = Vec::new();
        loop {
            let start = pos;
            let line = read_line(bytes, &mut pos)?;
            let mut parts = line.split(' ');
            match parts.next() {
                Some("param") => {
                    let (Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next()) else {
                        return Err(parse_err(start, format!("malformed record line {line:?}")));
                    };
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| parse_err(start, format!("bad shape {dims:?}")))?;
                    let n: usize = shape.iter().product();
                    let end = pos + 4 * n;
                    if end > bytes.len() {
                        return Err(parse_err(pos, format!("{name}: payload truncated")));
                    }
                    let data =
                        bytes[pos..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    pos = end;
                    let t = Tensor::new(shape, data).map_err(|e| parse_err(start, e.to_string()))?;
                    entries.push((name.to_string(), t));
                }
                Some("end") => {
                    let count: usize =
                        parts.next().and_then(|c| c.parse().ok()).ok_or_else(|| parse_err(start, "bad end line"))?;
                    if count != entries.len() {
                        return Err(parse_err(start, format!("end line says {count} records, read {}", entries.len())));
                    }
                    if pos != bytes.len() {
                        return Err(parse_err(pos, "trailing bytes after end line"));
                    }
                    return Ok(Self { entries });
                }
                _ => return Err(parse_err(start, format!("unexpected line {line:?}"))),
            }
        }
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let nl =
        rest.iter().position(|&b| b == b'\n').ok_or_else(|| parse_err(*pos, "unterminated line (file truncated?)"))?;
    let line = std::str::from_utf8(&rest[..nl]).map_err(|_| parse_err(*pos, "non-UTF-8 record line"))?;
    *pos += nl + 1;
    Ok(line)
}
