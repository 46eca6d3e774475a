//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "LDCK"  u32 version  u32 base_width  u32 layer_count
//! layer_count x { u32 kind_id  u32 ndim  ndim x u32 extent }
//! u32 metadata_len  metadata_len bytes of UTF-8 `key=value` lines
//! f32 payload (conv weight then bias, norm scale then shift, per layer)
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::unet::{LayerKind, LayerSpec, UNet};
use crate::error::{Error, Result};
use crate::imgstore::write_file;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Network weights plus training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: UNet<f32>,
    pub metadata: Vec<(String, String)>,
}

impl ModelCheckpoint {
    pub fn new(model: UNet<f32>) -> Self {
        ModelCheckpoint {
            model,
            metadata: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let u32_of = |v: usize| {
            u32::try_from(v).map_err(|_| Error::LayerTable(format!("{v} does not fit in u32")))
        };
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.model.base_width())?.to_le_bytes());
        let table = self.model.layer_table();
        out.extend_from_slice(&u32_of(table.len())?.to_le_bytes());
        for spec in &table {
            out.extend_from_slice(&(spec.kind as u32).to_le_bytes());
            out.extend_from_slice(&u32_of(spec.extents.len())?.to_le_bytes());
            for &e in &spec.extents {
                out.extend_from_slice(&u32_of(e)?.to_le_bytes());
            }
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::LayerTable(format!(
                    "metadata entry {k:?} is not a single key=value line"
                )));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&u32_of(meta.len())?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for t in self.model.params() {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let base_width = r.u32("base width")? as usize;
        let count = r.u32("layer count")? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let id = r.u32("layer kind")?;
            let kind = LayerKind::from_id(id)
                .ok_or_else(|| Error::LayerTable(format!("layer {i}: unknown kind id {id}")))?;
            let ndim = r.u32("layer rank")? as usize;
            if ndim > 8 {
                return Err(Error::LayerTable(format!("layer {i}: rank {ndim}")));
            }
            let extents = (0..ndim)
                .map(|_| r.u32("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push(LayerSpec { kind, extents });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| Error::LayerTable("metadata is not UTF-8".into()))?;
        let metadata = meta
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();

        let expected: usize = table.iter().map(LayerSpec::param_count).sum();
        let remaining = bytes.len().saturating_sub(r.pos);
        if remaining < 4 {
            return Err(Error::Truncated("missing CRC trailer".into()));
        }
        let payload_bytes = remaining - 4;
        if payload_bytes % 4 != 0 || payload_bytes / 4 != expected {
            return Err(Error::ParamCount {
                expected,
                actual: payload_bytes / 4,
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }

        let mut model = UNet::<f32>::new(base_width, 0)?;
        let arch = model.layer_table();
        if arch != table {
            return Err(Error::LayerTable(format!(
                "file declares {} layers, base width {base_width} implies {}",
                table.len(),
                arch.len()
            )));
        }
        let mut floats = body[r.pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for t in model.params_mut() {
            for v in t.data_mut() {
                *v = floats.next().expect("count checked");
            }
        }
        Ok(ModelCheckpoint { model, metadata })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated(format!("file ends inside {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    write_file(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}
