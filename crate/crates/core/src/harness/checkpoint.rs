//! Checkpoint files: a text manifest, a `---` line, then every parameter as
//! little-endian f64 in manifest order with no padding.
//!
//! ```text
//! milora-checkpoint 1
//! config seed = 0
//! config backbone.d_model = 64
//! ...
//! tensor embed 16 64 0 8192
//! tensor layers.0.q.weight 64 64 8192 32768
//! ---
//! <payload>
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::model::MiLoraModel;
use crate::numcore::Tensor;

pub const FORMAT: &str = "milora-checkpoint";
pub const VERSION: u32 = 1;
const SEPARATOR: &[u8] = b"\n---\n";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub len: usize,
}

fn load_err(msg: impl Into<String>) -> Error {
    Error::Load(msg.into())
}

/// Serializes the run configuration and every parameter of `model`.
pub fn encode(config: &RunConfig, model: &MiLoraModel) -> Vec<u8> {
    let mut manifest = format!("{FORMAT} {VERSION}\n");
    for (k, v) in config.entries() {
        manifest.push_str(&format!("config {k} = {v}\n"));
    }
    let mut payload = Vec::new();
    for (_, p) in model.store.iter() {
        let t = &p.value;
        manifest.push_str(&format!(
            "tensor {} {} {} {} {}\n",
            p.name(),
            t.rows(),
            t.cols(),
            payload.len(),
            t.numel() * 8
        ));
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = manifest.into_bytes();
    out.truncate(out.len() - 1);
    out.extend_from_slice(SEPARATOR);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(path: &Path, config: &RunConfig, model: &MiLoraModel) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, encode(config, model))?;
    Ok(())
}

struct Parsed<'a> {
    config: RunConfig,
    tensors: Vec<TensorEntry>,
    payload: &'a [u8],
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>> {
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| load_err("manifest terminator `---` not found"))?;
    let manifest = std::str::from_utf8(&bytes[..split]).map_err(|_| load_err("manifest is not UTF-8"))?;
    let payload = &bytes[split + SEPARATOR.len()..];

    let mut lines = manifest.lines();
    let header = lines.next().unwrap_or_default();
    match header.split_once(' ') {
        Some((FORMAT, v)) if v == VERSION.to_string() => {}
        Some((FORMAT, v)) => return Err(load_err(format!("unsupported checkpoint version {v}, expected {VERSION}"))),
        _ => return Err(load_err("not a checkpoint file")),
    }
    let mut config_text = String::new();
    let mut tensors = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("config ") {
            config_text.push_str(rest);
            config_text.push('\n');
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = rest.split(' ').collect();
            let name = f.first().copied().unwrap_or("?");
            let nums: Vec<usize> = f[1..]
                .iter()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| load_err(format!("tensor {name}: malformed directory entry")))?;
            if nums.len() != 4 {
                return Err(load_err(format!("tensor {name}: malformed directory entry")));
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                rows: nums[0],
                cols: nums[1],
                offset: nums[2],
                len: nums[3],
            });
        } else {
            return Err(load_err(format!("unexpected manifest line `{line}`")));
        }
    }
    let config = RunConfig::parse(&config_text).map_err(|e| load_err(format!("embedded config: {e}")))?;
    Ok(Parsed {
        config,
        tensors,
        payload,
    })
}

/// Checks the directory against the payload and the model the embedded
/// config describes, before anything is materialized.
fn validate(parsed: &Parsed, model: &MiLoraModel) -> Result<()> {
    let expected: Vec<(&str, usize, usize)> = model
        .store
        .iter()
        .map(|(_, p)| (p.name(), p.value.rows(), p.value.cols()))
        .collect();
    let mut offset = 0usize;
    for (i, e) in parsed.tensors.iter().enumerate() {
        let Some(&(name, rows, cols)) = expected.get(i) else {
            return Err(load_err(format!("tensor {}: not part of the configured model", e.name)));
        };
        if e.name != name {
            return Err(load_err(format!("tensor {}: expected `{name}` at position {i}", e.name)));
        }
        if (e.rows, e.cols) != (rows, cols) {
            return Err(load_err(format!(
                "tensor {}: shape {}x{} does not match model shape {rows}x{cols}",
                e.name, e.rows, e.cols
            )));
        }
        if e.len != rows * cols * 8 || e.offset != offset {
            return Err(load_err(format!("tensor {}: inconsistent offset or byte length", e.name)));
        }
        if e.offset + e.len > parsed.payload.len() {
            return Err(load_err(format!(
                "tensor {}: payload truncated ({} bytes, need {})",
                e.name,
                parsed.payload.len(),
                e.offset + e.len
            )));
        }
        offset += e.len;
    }
    if parsed.tensors.len() != expected.len() {
        let missing = expected[parsed.tensors.len()].0;
        return Err(load_err(format!("tensor {missing}: missing from checkpoint")));
    }
    if offset != parsed.payload.len() {
        return Err(load_err(format!(
            "payload has {} trailing bytes after the last tensor",
            parsed.payload.len() - offset
        )));
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<(RunConfig, MiLoraModel)> {
    let parsed = parse(bytes)?;
    let mut model = MiLoraModel::new(parsed.config.model.clone(), parsed.config.seed)?;
    validate(&parsed, &model)?;
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for (id, e) in ids.into_iter().zip(&parsed.tensors) {
        let data = parsed.payload[e.offset..e.offset + e.len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.store.set_value(id, Tensor::new(vec![e.rows, e.cols], data)?)?;
    }
    Ok((parsed.config, model))
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, MiLoraModel)> {
    let bytes = std::fs::read(path).map_err(|e| load_err(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

/// The tensor directory of a checkpoint, without building a model.
pub fn read_directory(bytes: &[u8]) -> Result<Vec<TensorEntry>> {
    Ok(parse(bytes)?.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::NoAdapters;
    use crate::numcore::Graph;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.backbone.d_model = 16;
        cfg.model.backbone.d_ffn = 24;
        cfg.model.backbone.n_heads = 2;
        cfg.model.lora_rank = 2;
        cfg.seed = 4;
        cfg
    }

    fn trained_like(cfg: &RunConfig) -> MiLoraModel {
        let mut m = MiLoraModel::new(cfg.model.clone(), cfg.seed).unwrap();
        let ids: Vec<_> = m.store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let v = m.store.value(id);
            let data = v.data().iter().enumerate().map(|(i, x)| x + ((i * 7 + k) as f64).sin() / 3.0).collect();
            m.store.set_value(id, Tensor::new(v.shape().to_vec(), data).unwrap()).unwrap();
        }
        m
    }

    #[test]
    fn roundtrip_is_byte_and_bit_identical() {
        let cfg = tiny();
        let m = trained_like(&cfg);
        let bytes = encode(&cfg, &m);
        let (cfg2, m2) = decode(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(encode(&cfg2, &m2), bytes);
        for (a, b) in m.store.values().iter().zip(m2.store.values()) {
            let (a, b): (Vec<u64>, Vec<u64>) = (a.data().iter().map(|v| v.to_bits()).collect(), b.data().iter().map(|v| v.to_bits()).collect());
            assert_eq!(a, b);
        }
        let logits = |m: &MiLoraModel| {
            let mut g = Graph::inference(&m.store);
            let out = m.backbone.forward(&mut g, &[1, 2, 3], None, &mut NoAdapters).unwrap();
            g.value(out.logits).clone()
        };
        assert_eq!(logits(&m), logits(&m2));
    }

    #[test]
    fn corrupt_files_fail_cleanly() {
        let cfg = tiny();
        let m = trained_like(&cfg);
        let bytes = encode(&cfg, &m);

        let truncated = &bytes[..bytes.len() - 1];
        let err = decode(truncated).unwrap_err().to_string();
        assert!(err.contains("routers.1.rational_b") && err.contains("truncated"), "{err}");

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Load(_))));

        let text = String::from_utf8_lossy(&bytes[..200]).replace("milora-checkpoint 1", "milora-checkpoint 9");
        let mut bumped = text.into_bytes();
        bumped.extend_from_slice(&bytes[200..]);
        let err = decode(&bumped).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");

        let mut other = cfg.clone();
        other.model.lora_rank = 4;
        let mismatched = encode(&other, &MiLoraModel::new(other.model.clone(), 0).unwrap());
        let sep = mismatched.windows(5).position(|w| w == SEPARATOR).unwrap();
        let manifest = String::from_utf8(mismatched[..sep].to_vec()).unwrap().replace("lora.rank = 4", "lora.rank = 2");
        let mut forged = manifest.into_bytes();
        forged.extend_from_slice(&mismatched[sep..]);
        let err = decode(&forged).unwrap_err().to_string();
        assert!(err.contains("layers.0.lora_q.a") && err.contains("shape"), "{err}");

        assert!(matches!(decode(b"garbage"), Err(Error::Load(_))));
    }
}
