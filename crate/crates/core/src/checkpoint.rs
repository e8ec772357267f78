//! Binary checkpoint formats.
//!
//! Three containers, all little-endian with a 4-byte magic and a u32
//! version:
//!   MPTM — frozen model: config fields then weight tensors in declaration
//!          order as f64.
//!   MPTP — prompt decomposition: l, d, task count, shared matrix, then per
//!          task a length-prefixed UTF-8 id and the u, v vectors.
//!   MPTV — a single vanilla prompt matrix.
//! Loaders reject unknown magics, unknown versions, and trailing bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{FrozenModel, ModelConfig};
use crate::numerics::{Matrix, Vector};
use crate::prompts::{SharedPrompt, TaskFactors, VanillaPrompt};

pub const MODEL_MAGIC: &[u8; 4] = b"MPTM";
pub const DECOMPOSITION_MAGIC: &[u8; 4] = b"MPTP";
pub const VANILLA_MAGIC: &[u8; 4] = b"MPTV";
pub const FORMAT_VERSION: u32 = 1;

fn open_reader(path: &Path, magic: &[u8; 4]) -> Result<BufReader<File>> {
    let file = File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let mut got = [0u8; 4];
    reader
        .read_exact(&mut got)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if &got != magic {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic),
        )));
    }
    let version = reader
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Checkpoint(format!("{}: truncated version", path.display())))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unknown version {version}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    Ok(reader)
}

fn open_writer(path: &Path, magic: &[u8; 4]) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(magic)?;
    writer.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    Ok(writer)
}

fn expect_eof(mut reader: BufReader<File>, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match reader.read(&mut probe) {
        Ok(0) => Ok(()),
        _ => Err(Error::Checkpoint(format!(
            "{}: trailing bytes after payload",
            path.display()
        ))),
    }
}

fn write_floats(writer: &mut impl Write, data: &[f64]) -> Result<()> {
    for &v in data {
        writer.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_matrix(reader: &mut impl Read, rows: usize, cols: usize, path: &Path) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(reader.read_f64::<LittleEndian>().map_err(|_| {
            Error::Checkpoint(format!("{}: truncated tensor data", path.display()))
        })?);
    }
    Matrix::from_vec(rows, cols, data)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn read_vector(reader: &mut impl Read, len: usize, path: &Path) -> Result<Vector> {
    let m = read_matrix(reader, 1, len, path)?;
    Vector::from_vec(m.data().to_vec())
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn read_u32(reader: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    reader
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Checkpoint(format!("{}: truncated {what}", path.display())))
}

pub fn save_model(model: &FrozenModel, path: &Path) -> Result<()> {
    let mut w = open_writer(path, MODEL_MAGIC)?;
    let cfg = model.config();
    for v in [
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_heads,
        cfg.enc_layers,
        cfg.dec_layers,
        cfg.ff_dim,
        cfg.max_src_len,
        cfg.max_tgt_len,
    ] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    model.visit_weights(&mut |data: &[f64]| write_floats(&mut w, data))?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FrozenModel> {
    let mut r = open_reader(path, MODEL_MAGIC)?;
    let mut fields = [0usize; 8];
    for f in fields.iter_mut() {
        *f = read_u32(&mut r, path, "config")? as usize;
    }
    let cfg = ModelConfig {
        vocab_size: fields[0],
        d_model: fields[1],
        n_heads: fields[2],
        enc_layers: fields[3],
        dec_layers: fields[4],
        ff_dim: fields[5],
        max_src_len: fields[6],
        max_tgt_len: fields[7],
    };
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let model = FrozenModel::load_weights(&cfg, &mut |rows, cols| {
        read_matrix(&mut r, rows, cols, path)
    })?;
    expect_eof(r, path)?;
    Ok(model)
}

pub fn save_decomposition(
    shared: &SharedPrompt,
    factors: &[TaskFactors],
    path: &Path,
) -> Result<()> {
    let mut w = open_writer(path, DECOMPOSITION_MAGIC)?;
    let (l, d) = shared.matrix.shape();
    w.write_u32::<LittleEndian>(l as u32)?;
    w.write_u32::<LittleEndian>(d as u32)?;
    w.write_u32::<LittleEndian>(factors.len() as u32)?;
    write_floats(&mut w, shared.matrix.data())?;
    for f in factors {
        let id = f.task_id.as_bytes();
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id)?;
        write_floats(&mut w, f.u.as_slice())?;
        write_floats(&mut w, f.v.as_slice())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_decomposition(path: &Path) -> Result<(SharedPrompt, Vec<TaskFactors>)> {
    let mut r = open_reader(path, DECOMPOSITION_MAGIC)?;
    let l = read_u32(&mut r, path, "prompt length")? as usize;
    let d = read_u32(&mut r, path, "dimension")? as usize;
    let count = read_u32(&mut r, path, "task count")? as usize;
    let shared = SharedPrompt {
        matrix: read_matrix(&mut r, l, d, path)?,
    };
    let mut factors = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(&mut r, path, "task id length")? as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes)
            .map_err(|_| Error::Checkpoint(format!("{}: truncated task id", path.display())))?;
        let task_id = String::from_utf8(id_bytes)
            .map_err(|_| Error::Checkpoint(format!("{}: task id not UTF-8", path.display())))?;
        let u = read_vector(&mut r, l, path)?;
        let v = read_vector(&mut r, d, path)?;
        factors.push(TaskFactors { task_id, u, v });
    }
    expect_eof(r, path)?;
    Ok((shared, factors))
}

pub fn save_vanilla(prompt: &VanillaPrompt, path: &Path) -> Result<()> {
    let mut w = open_writer(path, VANILLA_MAGIC)?;
    let (l, d) = prompt.matrix.shape();
    w.write_u32::<LittleEndian>(l as u32)?;
    w.write_u32::<LittleEndian>(d as u32)?;
    write_floats(&mut w, prompt.matrix.data())?;
    w.flush()?;
    Ok(())
}

pub fn load_vanilla(path: &Path) -> Result<VanillaPrompt> {
    let mut r = open_reader(path, VANILLA_MAGIC)?;
    let l = read_u32(&mut r, path, "prompt length")? as usize;
    let d = read_u32(&mut r, path, "dimension")? as usize;
    let matrix = read_matrix(&mut r, l, d, path)?;
    expect_eof(r, path)?;
    Ok(VanillaPrompt { matrix })
}
