//! Versioned parameter archive.
//!
//! One binary format serves both the frozen encoder stand-ins saved with a
//! dataset and the trainable checkpoints written during training: a magic
//! string, a JSON config section, then named f64 parameter arrays. Values
//! round-trip bit for bit, which the frozen-parameter invariants rely on.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::ParamSet;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"ZTADMDL1";

pub struct Archive {
    pub config_json: String,
    pub params: ParamSet,
}

pub fn save_archive(path: &Path, config_json: &str, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    let config_bytes = config_json.as_bytes();
    buf.extend_from_slice(&(config_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_bytes);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, param) in params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(param.value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(param.value.cols() as u32).to_le_bytes());
        buf.push(u8::from(param.trainable));
        for v in param.value.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Format(format!("{}: truncated archive", path.display())));
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };
    let magic = take(&mut cursor, 8)?;
    if magic != ARCHIVE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let read_u32 = |cursor: &mut usize| -> Result<u32> {
        let b = take(cursor, 4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let config_len = read_u32(&mut cursor)? as usize;
    let config_json = String::from_utf8(take(&mut cursor, config_len)?.to_vec())
        .map_err(|e| Error::Format(format!("{}: config not utf-8: {e}", path.display())))?;
    let count = read_u32(&mut cursor)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut cursor)? as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("{}: name not utf-8: {e}", path.display())))?;
        let rows = read_u32(&mut cursor)? as usize;
        let cols = read_u32(&mut cursor)? as usize;
        let trainable = take(&mut cursor, 1)?[0] != 0;
        let payload = take(&mut cursor, rows * cols * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Matrix::from_vec(rows, cols, data), trainable);
    }
    Ok(Archive {
        config_json,
        params,
    })
}
