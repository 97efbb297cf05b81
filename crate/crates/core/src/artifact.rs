//! Manifest-plus-payload binary container shared by model checkpoints,
//! S-learner exports and episode snapshots.
//!
//! Layout:
//!
//! ```text
//! WHATIF-ARTIFACT
//! version=1
//! kind=<checkpoint|slearner|episodes>
//! <key>=<value>                        (any number, in writer order)
//! tensor=<name> shape=<d0>x<d1>... offset=<byte offset> len=<elements>
//! ...
//! end
//! <payload: little-endian f32 tensors in registry order>
//! ```
//!
//! Offsets are relative to the first payload byte. Keys and values may not
//! contain newlines; keys may not contain `=`.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const MAGIC: &str = "WHATIF-ARTIFACT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Tensor {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Self {
        Self::new(name, shape, data.iter().map(|&v| v as f32).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Artifact {
    pub kind: String,
    pub entries: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

impl Artifact {
    pub fn new(kind: impl Into<String>) -> Self {
        Artifact {
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn push_tensor(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("missing manifest key '{key}'")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("manifest key '{key}' has bad value '{raw}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        header.push_str(&format!("version={VERSION}\nkind={}\n", self.kind));
        for (k, v) in &self.entries {
            if k.contains('=') || k.contains('\n') || v.contains('\n') || k == "tensor" || k == "end" {
                return Err(Error::Format(format!("manifest entry '{k}' is not writable")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() || t.name.contains(char::is_whitespace) {
                return Err(Error::Format(format!("tensor '{}' has inconsistent shape", t.name)));
            }
            let shape = t
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            header.push_str(&format!(
                "tensor={} shape={} offset={} len={}\n",
                t.name,
                if shape.is_empty() { "scalar".to_string() } else { shape },
                offset,
                t.data.len()
            ));
            offset += t.data.len() * 4;
        }
        header.push_str("end\n");
        out.write_all(header.as_bytes())?;
        for t in &self.tensors {
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&bytes)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn read<R: BufRead>(mut input: R) -> Result<Artifact> {
        let mut line = String::new();
        let mut next_line = |input: &mut R| -> Result<String> {
            line.clear();
            if input.read_line(&mut line)? == 0 {
                return Err(Error::Format("unexpected end of manifest".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut input)? != MAGIC {
            return Err(Error::Format("not a whatif artifact".into()));
        }
        let version = next_line(&mut input)?;
        if version != format!("version={VERSION}") {
            return Err(Error::Format(format!("unsupported or missing version: '{version}'")));
        }
        let kind = next_line(&mut input)?
            .strip_prefix("kind=")
            .ok_or_else(|| Error::Format("missing kind".into()))?
            .to_string();
        let mut artifact = Artifact::new(kind);
        let mut registry = Vec::new();
        loop {
            let l = next_line(&mut input)?;
            if l == "end" {
                break;
            }
            let (key, value) = l
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad manifest line '{l}'")))?;
            if key == "tensor" {
                registry.push(parse_tensor_line(value)?);
            } else {
                artifact.entries.push((key.to_string(), value.to_string()));
            }
        }
        let mut payload = Vec::new();
        input.read_to_end(&mut payload)?;
        for (name, shape, offset, len) in registry {
            let end = offset + len * 4;
            let bytes = payload
                .get(offset..end)
                .ok_or_else(|| Error::Format(format!("tensor '{name}' exceeds payload")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            artifact.tensors.push(Tensor { name, shape, data });
        }
        Ok(artifact)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Artifact> {
        Self::read(bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn load(path: &std::path::Path) -> Result<Artifact> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }
}

fn parse_tensor_line(value: &str) -> Result<(String, Vec<usize>, usize, usize)> {
    let bad = || Error::Format(format!("bad tensor entry '{value}'"));
    let mut parts = value.split(' ');
    let name = parts.next().ok_or_else(bad)?.to_string();
    let mut shape = None;
    let mut offset = None;
    let mut len = None;
    for part in parts {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        match k {
            "shape" if v == "scalar" => shape = Some(Vec::new()),
            "shape" => {
                shape = Some(
                    v.split('x')
                        .map(|d| d.parse().map_err(|_| bad()))
                        .collect::<Result<Vec<usize>>>()?,
                )
            }
            "offset" => offset = Some(v.parse().map_err(|_| bad())?),
            "len" => len = Some(v.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    let (shape, offset, len) = (shape.ok_or_else(bad)?, offset.ok_or_else(bad)?, len.ok_or_else(bad)?);
    if shape.iter().product::<usize>() != len {
        return Err(bad());
    }
    Ok((name, shape, offset, len))
}
