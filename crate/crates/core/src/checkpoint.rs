//! Master-model checkpoints.
//!
//! A checkpoint is a short text header followed by raw little-endian `f64`
//! tensor data:
//!
//! ```text
//! fednas-checkpoint 1
//! version <aggregations>
//! spec <supernet spec as JSON>
//! tensors <count>
//! <path> <dim>x<dim>...      one line per tensor, in data order
//! data
//! <bytes>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::supernet::{ParamMap, ParamPath, ParameterStore, SupernetSpec};

const MAGIC: &str = "fednas-checkpoint 1";

pub fn encode_checkpoint(store: &ParameterStore) -> Result<Vec<u8>> {
    let spec = serde_json::to_string(store.spec()).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = format!(
        "{MAGIC}\nversion {}\nspec {spec}\ntensors {}\n",
        store.version,
        store.params().len()
    );
    for (path, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{path} {}\n", dims.join("x")));
    }
    header.push_str("data\n");
    let mut bytes = header.into_bytes();
    for (_, t) in store.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterStore> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad("missing magic line"));
    }
    let field = |line: &str, name: &str| -> Result<String> {
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected `{name}` line")))
    };
    let version: u64 = field(next_line()?, "version")?
        .parse()
        .map_err(|_| bad("bad version"))?;
    let spec: SupernetSpec = serde_json::from_str(&field(next_line()?, "spec")?)
        .map_err(|e| bad(format!("bad spec: {e}")))?;
    let count: usize = field(next_line()?, "tensors")?
        .parse()
        .map_err(|_| bad("bad tensor count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let (path, dims) = line
            .rsplit_once(' ')
            .ok_or_else(|| bad(format!("bad tensor line `{line}`")))?;
        let path: ParamPath = path.parse()?;
        let shape = dims
            .split('x')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| bad(format!("bad shape `{dims}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push((path, shape));
    }
    if next_line()? != "data" {
        return Err(bad("missing data marker"));
    }
    let expected: usize = entries
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    let data = &bytes[pos..];
    if data.len() != expected * 8 {
        return Err(bad(format!(
            "{} data bytes, header describes {}",
            data.len(),
            expected * 8
        )));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = ParamMap::new();
    for (path, shape) in entries {
        let len = shape.iter().product();
        let t = Tensor::new(shape, values.by_ref().take(len).collect())?;
        if params.insert(path.clone(), t).is_some() {
            return Err(bad(format!("duplicate tensor {path}")));
        }
    }
    ParameterStore::from_params(spec, params, version)
}

pub fn save_checkpoint(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(store)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
