//! Little-endian binary embedding table.
//!
//! Layout: magic, `u32` version, `u64` entity count, `u32` dim, then per
//! entity a `u8` type code, `u64` id and `dim` `f32`s in key order. Relations
//! follow with the same count/dim/record layout, using type code
//! [`RELATION_TAG`] and the relation code as id. A trailer stores the
//! `(toc_epoch, tic_step)` version and the frozen keys.

use std::io::{BufReader, Read, Write};
use std::path::Path;

use super::{EmbeddingModel, ModelVersion};
use crate::error::{Error, Result};
use crate::graph::{EntityType, Relation, Vertex};
use crate::io::{create, open, put_f32s, LeReader};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"TWRC";
pub const EMBEDDING_FORMAT_VERSION: u32 = 1;
const RELATION_TAG: u8 = 0xFF;

impl EmbeddingModel {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let dim = self.dim as u32;
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&EMBEDDING_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&dim.to_le_bytes())?;
        for (k, v) in self.entities() {
            w.write_all(&[k.entity_type.code()])?;
            w.write_all(&k.id.to_le_bytes())?;
            put_f32s(w, v)?;
        }
        w.write_all(&(self.relations.len() as u64).to_le_bytes())?;
        w.write_all(&dim.to_le_bytes())?;
        for (r, v) in self.relations() {
            w.write_all(&[RELATION_TAG])?;
            w.write_all(&(r.code() as u64).to_le_bytes())?;
            put_f32s(w, v)?;
        }
        w.write_all(&self.version.toc_epoch.to_le_bytes())?;
        w.write_all(&self.version.tic_step.to_le_bytes())?;
        w.write_all(&(self.frozen.len() as u64).to_le_bytes())?;
        for k in &self.frozen {
            w.write_all(&[k.entity_type.code()])?;
            w.write_all(&k.id.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = LeReader::new(r);
        if &r.bytes::<4>()? != EMBEDDING_MAGIC {
            return Err(Error::Format("not an embedding table (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != EMBEDDING_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "embedding format version {version} (expected {EMBEDDING_FORMAT_VERSION})"
            )));
        }
        let count = r.u64()?;
        let dim = r.u32()? as usize;
        let mut model = EmbeddingModel::new(dim);
        for _ in 0..count {
            let v = read_vertex(&mut r)?;
            let values = r.f32s(dim)?;
            model
                .set_vector(v, &values)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let rel_count = r.u64()?;
        if r.u32()? as usize != dim {
            return Err(Error::Format("relation dim differs from entity dim".into()));
        }
        for _ in 0..rel_count {
            if r.u8()? != RELATION_TAG {
                return Err(Error::Format("bad relation record tag".into()));
            }
            let code = r.u64()?;
            let rel = u8::try_from(code)
                .ok()
                .and_then(Relation::from_code)
                .ok_or_else(|| Error::Format(format!("unknown relation code {code}")))?;
            let values = r.f32s(dim)?;
            model
                .set_relation(rel, &values)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        model.version = ModelVersion {
            toc_epoch: r.u32()?,
            tic_step: r.u32()?,
        };
        let frozen = r.u64()?;
        for _ in 0..frozen {
            let v = read_vertex(&mut r)?;
            if !model.contains(&v) {
                return Err(Error::Format(format!("frozen key {v:?} has no vector")));
            }
            model.frozen.insert(v);
        }
        r.expect_end()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(open(path)?))
    }
}

fn read_vertex<R: Read>(r: &mut LeReader<R>) -> Result<Vertex> {
    let code = r.u8()?;
    let entity_type = EntityType::from_code(code)
        .ok_or_else(|| Error::Format(format!("unknown entity type code {code}")))?;
    Ok(Vertex {
        entity_type,
        id: r.u64()?,
    })
}
