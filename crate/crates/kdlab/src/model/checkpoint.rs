//! Single-file model checkpoints: a text header carrying a magic string,
//! format version and the config as key-value lines, followed by named
//! tensors as little-endian f64 arrays with explicit shape prefixes.
//! `load_model(save_model(m)) == m` bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ModelError, ModelResult, TaskKind};

const MAGIC: &str = "KDLAB-CHECKPOINT";
const VERSION: u32 = 1;

pub fn save_model(model: &Model, path: &Path) -> ModelResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Serializes a model to the checkpoint wire format in memory. Useful for
/// keeping rollback snapshots without touching the filesystem.
pub fn model_to_bytes(model: &Model) -> ModelResult<Vec<u8>> {
    let mut out = Vec::new();
    write_model(model, &mut out)?;
    Ok(out)
}

fn write_model(model: &Model, w: &mut impl Write) -> ModelResult<()> {
    let c = &model.config;
    let named = model.named_parameters();
    writeln!(w, "{}", MAGIC)?;
    writeln!(w, "version {}", VERSION)?;
    writeln!(w, "num_layers {}", c.num_layers)?;
    writeln!(w, "hidden_dim {}", c.hidden_dim)?;
    writeln!(w, "intermediate_dim {}", c.intermediate_dim)?;
    writeln!(w, "num_heads {}", c.num_heads)?;
    writeln!(w, "vocab_size {}", c.vocab_size)?;
    writeln!(w, "max_seq_len {}", c.max_seq_len)?;
    writeln!(w, "num_classes {}", c.num_classes)?;
    writeln!(w, "task_kind {}", c.task_kind.as_str())?;
    writeln!(w, "tensors {}", named.len())?;
    writeln!(w, "end-header")?;
    for (name, tensor) in &named {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.rows() as u32).to_le_bytes())?;
        w.write_all(&(tensor.cols() as u32).to_le_bytes())?;
        for v in tensor.to_vec() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_line(r: &mut impl Read) -> ModelResult<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 256 {
            return Err(ModelError::BadCheckpoint("header line too long".into()));
        }
    }
    String::from_utf8(line).map_err(|_| ModelError::BadCheckpoint("non-utf8 header".into()))
}

fn header_count(line: &str, key: &str) -> ModelResult<usize> {
    let rest = line
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| ModelError::BadCheckpoint(format!("expected '{} <value>', got '{}'", key, line)))?;
    rest.parse()
        .map_err(|_| ModelError::BadCheckpoint(format!("bad value in '{}'", line)))
}

fn read_u32(r: &mut impl Read) -> ModelResult<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Loads a checkpoint into a fresh trainable model. The stored tensor
/// names must exactly cover the parameter registry implied by the stored
/// config, with matching shapes.
pub fn load_model(path: &Path) -> ModelResult<Model> {
    let mut r = BufReader::new(File::open(path)?);
    read_model(&mut r)
}

/// Deserializes a model from in-memory checkpoint bytes, the inverse of
/// [`model_to_bytes`].
pub fn model_from_bytes(bytes: &[u8]) -> ModelResult<Model> {
    let mut r = bytes;
    read_model(&mut r)
}

fn read_model(r: &mut impl Read) -> ModelResult<Model> {
    if read_line(r)? != MAGIC {
        return Err(ModelError::BadCheckpoint("magic string mismatch".into()));
    }
    let version = header_count(&read_line(r)?, "version")?;
    if version != VERSION as usize {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported version {} (expected {})",
            version, VERSION
        )));
    }
    let num_layers = header_count(&read_line(r)?, "num_layers")?;
    let hidden_dim = header_count(&read_line(r)?, "hidden_dim")?;
    let intermediate_dim = header_count(&read_line(r)?, "intermediate_dim")?;
    let num_heads = header_count(&read_line(r)?, "num_heads")?;
    let vocab_size = header_count(&read_line(r)?, "vocab_size")?;
    let max_seq_len = header_count(&read_line(r)?, "max_seq_len")?;
    let num_classes = header_count(&read_line(r)?, "num_classes")?;
    let task_line = read_line(r)?;
    let task_kind = task_line
        .strip_prefix("task_kind ")
        .and_then(TaskKind::parse)
        .ok_or_else(|| ModelError::BadCheckpoint(format!("bad task kind line '{}'", task_line)))?;
    let tensor_count = header_count(&read_line(r)?, "tensors")?;
    if read_line(r)? != "end-header" {
        return Err(ModelError::BadCheckpoint("missing end-header".into()));
    }

    let config = ModelConfig {
        num_layers,
        hidden_dim,
        intermediate_dim,
        num_heads,
        vocab_size,
        max_seq_len,
        num_classes,
        task_kind,
    };
    // Seed value is irrelevant: every tensor is overwritten below.
    let model = Model::new(&config, 0)?;
    let named = model.named_parameters();
    if tensor_count != named.len() {
        return Err(ModelError::BadCheckpoint(format!(
            "checkpoint holds {} tensors, config implies {}",
            tensor_count,
            named.len()
        )));
    }
    for (expected_name, tensor) in &named {
        let name_len = read_u32(r)? as usize;
        if name_len > 256 {
            return Err(ModelError::BadCheckpoint("tensor name too long".into()));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| ModelError::BadCheckpoint("non-utf8 tensor name".into()))?;
        if &name != expected_name {
            return Err(ModelError::BadCheckpoint(format!(
                "tensor order mismatch: expected '{}', found '{}'",
                expected_name, name
            )));
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        if (rows, cols) != tensor.shape() {
            return Err(ModelError::BadCheckpoint(format!(
                "tensor '{}' has shape {}x{}, expected {}x{}",
                name,
                rows,
                cols,
                tensor.rows(),
                tensor.cols()
            )));
        }
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensor.set_data(&data)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ModelError::BadCheckpoint("trailing bytes after tensors".into()));
    }
    Ok(model)
}
