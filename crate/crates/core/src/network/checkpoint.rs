//! Checkpoint files: a versioned text manifest followed by the raw tensors.
//!
//! ```text
//! SRCKPT
//! format_version 1
//! scalar f32le
//! flatten row-major-hw
//! classes 4
//! param rf.kernel rf_kernel 5x5x3x64
//! ...
//! adam_step 200            (optional optimiser block)
//! adam_lr 0.0001
//! adam_beta1 0.9
//! adam_beta2 0.999
//! adam_eps 1e-8
//! end
//! <little-endian f32 data: every param in manifest order, then Adam m and v
//!  for each trainable param>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, Tensor};

use super::params::{ModelParams, Param, ParamKind};

pub const MAGIC: &str = "SRCKPT";
pub const FORMAT_VERSION: u32 = 1;
const FLATTEN: &str = "row-major-hw";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState<f32>>,
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Serialises a checkpoint to bytes.
pub fn encode(params: &ModelParams<f32>, adam: Option<&AdamState<f32>>) -> Vec<u8> {
    let mut text = format!(
        "{MAGIC}\nformat_version {FORMAT_VERSION}\nscalar f32le\nflatten {FLATTEN}\nclasses {}\n",
        params.classes()
    );
    for p in params.params() {
        text += &format!(
            "param {} {} {}\n",
            p.name,
            p.kind.as_str(),
            shape_str(p.tensor.shape())
        );
    }
    if let Some(a) = adam {
        text += &format!(
            "adam_step {}\nadam_lr {:?}\nadam_beta1 {:?}\nadam_beta2 {:?}\nadam_eps {:?}\n",
            a.step, a.config.lr, a.config.beta1, a.config.beta2, a.config.eps
        );
    }
    text += "end\n";
    let mut bytes = text.into_bytes();
    let mut put = |t: &Tensor<f32>| {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in params.params() {
        put(&p.tensor);
    }
    if let Some(a) = adam {
        a.m.iter().chain(&a.v).for_each(&mut put);
    }
    bytes
}

/// Writes via a temporary file and rename so readers never see a partial
/// checkpoint.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    adam: Option<&AdamState<f32>>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let bytes = encode(params, adam);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn line(&mut self) -> Result<&str, String> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or("manifest ends without 'end' line")?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| "manifest is not UTF-8".to_string())
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>, String> {
        let n: usize = shape.iter().product();
        let end = self.pos + 4 * n;
        if end > self.bytes.len() {
            return Err(format!(
                "truncated data: need {} bytes, {} remain",
                4 * n,
                self.bytes.len() - self.pos
            ));
        }
        let data = self.bytes[self.pos..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.pos = end;
        Tensor::new(shape.to_vec(), data).map_err(|e| e.to_string())
    }
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str, String> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| format!("expected '{key} ...', found '{line}'"))
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
    s.trim().parse().map_err(|_| format!("bad {what}: '{s}'"))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.line()? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version: u32 = num(field(cur.line()?, "format_version")?, "version")?;
    if version != FORMAT_VERSION {
        return Err(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        ));
    }
    let scalar = field(cur.line()?, "scalar")?;
    if scalar != "f32le" {
        return Err(format!("unsupported scalar type '{scalar}'"));
    }
    let flatten = field(cur.line()?, "flatten")?;
    if flatten != FLATTEN {
        return Err(format!("unsupported flatten order '{flatten}'"));
    }
    let classes: usize = num(field(cur.line()?, "classes")?, "class count")?;

    let mut manifest = Vec::new();
    let mut adam_fields = Vec::new();
    loop {
        let line = cur.line()?.to_string();
        if line == "end" {
            break;
        }
        if let Ok(rest) = field(&line, "param") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, kind, shape] = parts[..] else {
                return Err(format!("malformed param line '{line}'"));
            };
            let kind = ParamKind::parse(kind).ok_or_else(|| format!("unknown kind '{kind}'"))?;
            let shape = shape
                .split('x')
                .map(|d| num(d, "dimension"))
                .collect::<Result<Vec<usize>, _>>()?;
            manifest.push((name.to_string(), kind, shape));
        } else if line.starts_with("adam_") {
            adam_fields.push(line);
        } else {
            return Err(format!("unexpected manifest line '{line}'"));
        }
    }

    let mut params = Vec::with_capacity(manifest.len());
    for (name, kind, shape) in manifest {
        let tensor = cur.tensor(&shape)?;
        params.push(Param { name, kind, tensor });
    }
    let params = ModelParams::from_params(classes, params).map_err(|e| e.to_string())?;

    let adam = if adam_fields.is_empty() {
        None
    } else {
        let [step, lr, b1, b2, eps] = &adam_fields[..] else {
            return Err("incomplete optimiser block".into());
        };
        let config = AdamConfig {
            lr: num(field(lr, "adam_lr")?, "lr")?,
            beta1: num(field(b1, "adam_beta1")?, "beta1")?,
            beta2: num(field(b2, "adam_beta2")?, "beta2")?,
            eps: num(field(eps, "adam_eps")?, "eps")?,
        };
        let step: u64 = num(field(step, "adam_step")?, "step")?;
        let shapes: Vec<Vec<usize>> = params
            .trainable()
            .into_iter()
            .map(|i| params.tensor(i).shape().to_vec())
            .collect();
        let m = shapes
            .iter()
            .map(|s| cur.tensor(s))
            .collect::<Result<_, _>>()?;
        let v = shapes
            .iter()
            .map(|s| cur.tensor(s))
            .collect::<Result<_, _>>()?;
        Some(AdamState { config, step, m, v })
    };
    if cur.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - cur.pos));
    }
    Ok(Checkpoint { params, adam })
}
