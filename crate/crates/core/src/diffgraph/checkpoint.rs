//! Text checkpoint format for named tensors.
//!
//! ```text
//! cmad-checkpoint 1
//! kind <free-form tag>
//! meta <key> <value>            (zero or more)
//! tensor <name> <rows> <cols>
//! <rows lines of cols space-separated f64 values>
//! ...
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! decode of an encode reproduces every bit.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &str = "cmad-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self { kind: kind.into(), ..Default::default() }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.into(), value.to_string()));
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_parse<T: core::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key).ok_or_else(|| Error::Parse(alloc::format!("missing meta key `{key}`")))?;
        raw.parse().map_err(|_| Error::Parse(alloc::format!("bad value for `{key}`: {raw}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Parse(alloc::format!("missing tensor `{name}`")))
    }

    pub fn encode(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC} {VERSION}");
        let _ = writeln!(s, "kind {}", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let _ = writeln!(s, "tensor {name} {} {}", t.rows(), t.cols());
            for r in 0..t.rows() {
                let mut first = true;
                for v in t.row(r) {
                    if !first {
                        s.push(' ');
                    }
                    first = false;
                    let _ = write!(s, "{v:?}");
                }
                s.push('\n');
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn decode(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse(alloc::format!("line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(0, "empty checkpoint"))?;
        let mut hp = header.split_whitespace();
        if hp.next() != Some(MAGIC) {
            return Err(bad(0, "not a cmad checkpoint"));
        }
        let version: u32 = hp.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(0, "missing version"))?;
        if version != VERSION {
            return Err(bad(0, "unsupported checkpoint version"));
        }
        let mut ck = Checkpoint::default();
        let mut ended = false;
        while let Some((ln, line)) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (head, rest) = line.split_once(' ').unwrap_or((line, ""));
            match head {
                "kind" => ck.kind = rest.into(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.push((k.into(), v.into()));
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    if parts.len() != 3 {
                        return Err(bad(ln, "tensor header needs name rows cols"));
                    }
                    let rows: usize = parts[1].parse().map_err(|_| bad(ln, "bad row count"))?;
                    let cols: usize = parts[2].parse().map_err(|_| bad(ln, "bad column count"))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (rl, row) = lines.next().ok_or_else(|| bad(ln, "truncated tensor"))?;
                        let before = data.len();
                        for tok in row.split_whitespace() {
                            data.push(tok.parse::<f64>().map_err(|_| bad(rl, "bad number"))?);
                        }
                        if data.len() - before != cols {
                            return Err(bad(rl, "row has the wrong number of values"));
                        }
                    }
                    ck.tensors.push((parts[0].into(), Tensor::from_vec(rows, cols, data)?));
                }
                "end" => {
                    ended = true;
                    break;
                }
                _ => return Err(bad(ln, "unknown record")),
            }
        }
        if !ended {
            return Err(Error::Parse("checkpoint is missing its `end` marker".into()));
        }
        Ok(ck)
    }
}
