//! Named-parameter flat archive with a JSON header, used for every
//! checkpoint. Values are stored as f32 LE; reloading and re-saving an
//! archive reproduces it byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sugar_autodiff::ParamStore;

use crate::error::{Result, SugarError};

const MAGIC: &[u8; 4] = b"SUGP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Save every parameter whose name starts with `prefix` (empty = all), in
/// registration order.
pub fn save_archive<P: AsRef<Path>>(
    path: P,
    header: &serde_json::Value,
    store: &ParamStore,
    prefix: &str,
) -> Result<()> {
    let tmp = path.as_ref().with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header_bytes = serde_json::to_vec(header)?;
        w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        let ids: Vec<_> = store
            .ids()
            .filter(|&id| store.name(id).starts_with(prefix))
            .collect();
        w.write_all(&(ids.len() as u32).to_le_bytes())?;
        for id in ids {
            let name = store.name(id).as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            let value = store.value(id);
            w.write_all(&(value.ndim() as u32).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in value.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path.as_ref())?;
    Ok(())
}

pub fn load_archive<P: AsRef<Path>>(path: P) -> Result<(serde_json::Value, Vec<ArchiveEntry>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;
    let mut offset = 0usize;
    let take = |offset: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *offset + n > data.len() {
            return Err(SugarError::Format {
                offset: *offset as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let slice = &data[*offset..*offset + n];
        *offset += n;
        Ok(slice)
    };
    let magic = take(&mut offset, 4, "magic")?;
    if magic != MAGIC {
        return Err(SugarError::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = u32::from_le_bytes(take(&mut offset, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(SugarError::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let header_len =
        u32::from_le_bytes(take(&mut offset, 4, "header length")?.try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(take(&mut offset, header_len, "header")?)?;
    let count = u32::from_le_bytes(take(&mut offset, 4, "entry count")?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len =
            u32::from_le_bytes(take(&mut offset, 4, "name length")?.try_into().unwrap()) as usize;
        let name_offset = offset;
        let name = String::from_utf8(take(&mut offset, name_len, "name")?.to_vec()).map_err(
            |_| SugarError::Format {
                offset: name_offset as u64,
                msg: "parameter name is not valid UTF-8".into(),
            },
        )?;
        let ndim = u32::from_le_bytes(take(&mut offset, 4, "ndim")?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(
                take(&mut offset, 4, "dimension")?.try_into().unwrap(),
            ) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut offset, len * 4, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|chunk| f32::from_le_bytes(chunk.try_into().unwrap()))
            .collect();
        entries.push(ArchiveEntry {
            name,
            shape,
            values,
        });
    }
    Ok((header, entries))
}

/// Overwrite store values from archive entries, matched by name.
pub fn apply_entries(store: &mut ParamStore, entries: &[ArchiveEntry]) -> Result<()> {
    for entry in entries {
        let id = store.lookup(&entry.name).ok_or_else(|| {
            SugarError::Lookup(format!("store has no parameter {:?}", entry.name))
        })?;
        if store.value(id).shape() != entry.shape.as_slice() {
            return Err(SugarError::Dimension(format!(
                "parameter {:?}: archive shape {:?} vs store shape {:?}",
                entry.name,
                entry.shape,
                store.value(id).shape()
            )));
        }
        let values: Vec<f64> = entry.values.iter().map(|&v| v as f64).collect();
        store.set_value(
            id,
            ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("shape checked"),
        );
    }
    Ok(())
}
