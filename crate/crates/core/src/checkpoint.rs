//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes   "ALBSEQCK"
//! byte order   1 byte    1 = little endian, 2 = big endian (applies to
//!                        every multi-byte field that follows)
//! version      u32       currently 1
//! config       5 × u64   num_identities, feature_dim, scene_dim,
//!                        embed_dim, hidden_dim
//!              u8        embedding mode (0 = addition, 1 = max)
//!              u8        use_scene (0/1)
//! metadata     u64 len + UTF-8 bytes, `key=value` lines sorted by key
//! tensors      u32 count, then per tensor:
//!              u16 name len + name, u64 rows, u64 cols, rows·cols × f64
//! ```
//!
//! Tensors appear in the order of [`ModelParams::slices`]. Vectors are
//! stored with `cols = 1`. Writers always emit little endian; readers accept
//! either order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::EmbeddingMode;
use crate::seqmodel::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"ALBSEQCK";
pub const VERSION: u32 = 1;
const LITTLE_ENDIAN: u8 = 1;
const BIG_ENDIAN: u8 = 2;

const TENSOR_NAMES: [&str; 8] = [
    "embedding.label",
    "embedding.feature",
    "embedding.scene",
    "lstm.input_weights",
    "lstm.hidden_weights",
    "lstm.bias",
    "classifier.weight",
    "classifier.bias",
];

/// Model parameters plus free-form string metadata (training regions, seed...).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(LITTLE_ENDIAN);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = &self.params.config;
        for d in [
            cfg.num_identities,
            cfg.feature_dim,
            cfg.scene_dim,
            cfg.embed_dim,
            cfg.hidden_dim,
        ] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(match cfg.mode {
            EmbeddingMode::Addition => 0,
            EmbeddingMode::ElementwiseMax => 1,
        });
        out.push(cfg.use_scene as u8);

        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("metadata entry `{k}` is not line-safe")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());

        let shapes = tensor_shapes(&self.params);
        out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        for ((name, (rows, cols)), data) in TENSOR_NAMES.iter().zip(shapes).zip(self.params.slices()) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(rows as u64).to_le_bytes());
            out.extend_from_slice(&(cols as u64).to_le_bytes());
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, big_endian: false };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        r.big_endian = match r.u8()? {
            LITTLE_ENDIAN => false,
            BIG_ENDIAN => true,
            other => return Err(Error::Format(format!("unknown byte order tag {other}"))),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = r.u64()? as usize;
        }
        let mode = match r.u8()? {
            0 => EmbeddingMode::Addition,
            1 => EmbeddingMode::ElementwiseMax,
            other => return Err(Error::Format(format!("unknown embedding mode {other}"))),
        };
        let use_scene = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad use_scene flag {other}"))),
        };
        let config = ModelConfig {
            num_identities: dims[0],
            feature_dim: dims[1],
            scene_dim: dims[2],
            embed_dim: dims[3],
            hidden_dim: dims[4],
            mode,
            use_scene,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;

        let meta_len = r.u64()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("metadata line `{line}` lacks `=`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }

        let mut params = ModelParams::zeros(config)?;
        let shapes = tensor_shapes(&params);
        let count = r.u32()? as usize;
        if count != shapes.len() {
            return Err(Error::Format(format!("expected {} tensors, found {count}", shapes.len())));
        }
        for ((name, (rows, cols)), slot) in TENSOR_NAMES.iter().zip(shapes).zip(params.slices_mut()) {
            let name_len = r.u16()? as usize;
            let found = r.take(name_len)?;
            if found != name.as_bytes() {
                return Err(Error::Format(format!(
                    "expected tensor `{name}`, found `{}`",
                    String::from_utf8_lossy(found)
                )));
            }
            let (fr, fc) = (r.u64()? as usize, r.u64()? as usize);
            if (fr, fc) != (rows, cols) {
                return Err(Error::Format(format!(
                    "tensor `{name}` is {fr}x{fc}, config implies {rows}x{cols}"
                )));
            }
            for x in slot.iter_mut() {
                *x = r.f64()?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if !params.is_finite() {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(Checkpoint { params, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn tensor_shapes(p: &ModelParams) -> [(usize, usize); 8] {
    let e = &p.embedding;
    let l = &p.lstm;
    let c = &p.classifier;
    [
        (e.label.rows(), e.label.cols()),
        (e.feature.rows(), e.feature.cols()),
        (e.scene.rows(), e.scene.cols()),
        (l.input_weights.rows(), l.input_weights.cols()),
        (l.hidden_weights.rows(), l.hidden_weights.cols()),
        (l.bias.dim(), 1),
        (c.weight.rows(), c.weight.cols()),
        (c.bias.dim(), 1),
    ]
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    big_endian: bool,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let a = self.array()?;
        Ok(if self.big_endian { u16::from_be_bytes(a) } else { u16::from_le_bytes(a) })
    }

    fn u32(&mut self) -> Result<u32> {
        let a = self.array()?;
        Ok(if self.big_endian { u32::from_be_bytes(a) } else { u32::from_le_bytes(a) })
    }

    fn u64(&mut self) -> Result<u64> {
        let a = self.array()?;
        Ok(if self.big_endian { u64::from_be_bytes(a) } else { u64::from_le_bytes(a) })
    }

    fn f64(&mut self) -> Result<f64> {
        let a = self.array()?;
        Ok(if self.big_endian { f64::from_be_bytes(a) } else { f64::from_le_bytes(a) })
    }
}
