//! Little-endian binary index file.
//!
//! Header: magic, `u32` version, `u32` metric code, `u32` M, `u32`
//! ef_construction, `u64` count, `u32` dim. Vectors block: per item a `u64`
//! id and `dim` `f64`s. Adjacency block: per item a `u32` level count, then
//! per level a `u32` neighbor count and that many `u64` item positions. An
//! exhaustive index stores zero levels for every item.

use std::io::{BufReader, Read, Write};
use std::path::Path;

use super::hnsw::HnswGraph;
use super::{AnnIndex, HnswParams, Metric, Structure};
use crate::error::{Error, Result};
use crate::io::{create, open, LeReader};

pub const ANN_MAGIC: &[u8; 4] = b"TWAN";
pub const ANN_FORMAT_VERSION: u32 = 1;

impl AnnIndex {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(ANN_MAGIC)?;
        w.write_all(&ANN_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.params.metric.code().to_le_bytes())?;
        w.write_all(&(self.params.m as u32).to_le_bytes())?;
        w.write_all(&(self.params.ef_construction as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_all(&id.to_le_bytes())?;
            for x in self.vector(i) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for i in 0..self.ids.len() {
            match &self.structure {
                Structure::Exact => w.write_all(&0u32.to_le_bytes())?,
                Structure::Hnsw(g) => {
                    w.write_all(&(g.links[i].len() as u32).to_le_bytes())?;
                    for level in &g.links[i] {
                        w.write_all(&(level.len() as u32).to_le_bytes())?;
                        for &n in level {
                            w.write_all(&(n as u64).to_le_bytes())?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = LeReader::new(r);
        if &r.bytes::<4>()? != ANN_MAGIC {
            return Err(Error::Format("not an ANN index (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != ANN_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "index format version {version} (expected {ANN_FORMAT_VERSION})"
            )));
        }
        let metric_code = r.u32()?;
        let metric = Metric::from_code(metric_code)
            .ok_or_else(|| Error::Format(format!("unknown metric code {metric_code}")))?;
        let params = HnswParams {
            m: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            metric,
            ..HnswParams::default()
        };
        let count =
            usize::try_from(r.u64()?).map_err(|_| Error::Format("item count overflows".into()))?;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format("index dim is zero".into()));
        }
        let mut ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count * dim);
        for _ in 0..count {
            ids.push(r.u64()?);
            vectors.extend(r.f64s(dim)?);
        }
        let mut links: Vec<Vec<Vec<u32>>> = Vec::with_capacity(count);
        for _ in 0..count {
            let levels = r.u32()? as usize;
            let mut node = Vec::with_capacity(levels);
            for _ in 0..levels {
                let n = r.u32()? as usize;
                let level = (0..n)
                    .map(|_| {
                        let p = r.u64()?;
                        if p as usize >= count {
                            return Err(Error::Format(format!(
                                "neighbor position {p} out of range"
                            )));
                        }
                        Ok(p as u32)
                    })
                    .collect::<Result<Vec<u32>>>()?;
                node.push(level);
            }
            links.push(node);
        }
        r.expect_end()?;
        let exact = links.iter().all(Vec::is_empty);
        let hnsw = links.iter().all(|l| !l.is_empty());
        let structure = if exact {
            Structure::Exact
        } else if hnsw {
            Structure::Hnsw(HnswGraph::from_links(links))
        } else {
            return Err(Error::Format(
                "index mixes exhaustive and graph nodes".into(),
            ));
        };
        Ok(AnnIndex {
            ids,
            dim,
            vectors,
            params,
            structure,
        })
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
