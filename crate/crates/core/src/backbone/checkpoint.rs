//! `MBCK1` checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MBCK1"
//! u8 topology, u8 mixer kind
//! u32 × 10: L, N, D, input_dim, state_dim, head_dim, expand, conv_width,
//!           n_attn_heads, ffn_mult
//! f64 norm_eps, f64 dropout
//! u32 epoch, f64 dev_loss
//! u32 parameter count, then per parameter:
//!     u32 name length, UTF-8 name, u32 rows, u32 cols, rows·cols × f32
//! ```

use std::fs;
use std::path::Path;

use crate::mixers::{MixerConfig, MixerKind};
use crate::params::ParamSet;
use crate::{Error, Result};

use super::{Backbone, BackboneConfig, Topology};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MBCK1";

/// Trained parameters plus the metadata needed to rebuild and rank them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    pub epoch: usize,
    pub dev_loss: f64,
    pub params: ParamSet<f32>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(
            Error::Truncated {
                expected: (self.pos as u64).saturating_add(n as u64),
                found: self.buf.len() as u64,
            },
        )?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn new(model: &Backbone, params: ParamSet<f32>, epoch: usize, dev_loss: f64) -> Self {
        Self {
            config: model.config.clone(),
            epoch,
            dev_loss,
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let m = &c.mixer;
        let mut out = Vec::with_capacity(64 + 4 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(c.topology.code());
        out.push(m.kind.code());
        for v in [
            c.layers,
            c.n,
            c.d_model,
            c.input_dim,
            m.state_dim,
            m.head_dim,
            m.expand,
            m.conv_width,
            c.n_attn_heads,
            c.ffn_mult,
        ] {
            put_u32(&mut out, v)?;
        }
        out.extend_from_slice(&c.norm_eps.to_le_bytes());
        out.extend_from_slice(&c.dropout.to_le_bytes());
        put_u32(&mut out, self.epoch)?;
        out.extend_from_slice(&self.dev_loss.to_le_bytes());
        put_u32(&mut out, self.params.len())?;
        for p in self.params.iter() {
            put_u32(&mut out, p.name.len())?;
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.nrows())?;
            put_u32(&mut out, p.value.ncols())?;
            for v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Decodes a checkpoint; parameter names and shapes must match the ones
    /// the stored configuration declares.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < CHECKPOINT_MAGIC.len() || &buf[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: "MBCK1" });
        }
        let mut r = Reader {
            buf,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let topology = r.u8()?;
        let topology = Topology::from_code(topology)
            .ok_or_else(|| Error::Malformed(format!("unknown topology code {topology}")))?;
        let kind = r.u8()?;
        let kind = MixerKind::from_code(kind)
            .ok_or_else(|| Error::Malformed(format!("unknown mixer code {kind}")))?;
        let mut dims = [0usize; 10];
        for d in &mut dims {
            *d = r.usize()?;
        }
        let [layers, n, d_model, input_dim, state_dim, head_dim, expand, conv_width, heads, ffn] = dims;
        let config = BackboneConfig {
            topology,
            layers,
            n,
            d_model,
            input_dim,
            mixer: MixerConfig {
                kind,
                state_dim,
                head_dim,
                expand,
                conv_width,
            },
            n_attn_heads: heads,
            ffn_mult: ffn,
            norm_eps: r.f64()?,
            dropout: r.f64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Malformed(format!("stored configuration: {e}")))?;
        let epoch = r.usize()?;
        let dev_loss = r.f64()?;

        let (_, mut params) = Backbone::new::<f32>(&config, 0)?;
        let count = r.usize()?;
        if count != params.len() {
            return Err(Error::Malformed(format!(
                "{count} parameter blobs, configuration declares {}",
                params.len()
            )));
        }
        for id in params.ids().collect::<Vec<_>>() {
            let name_len = r.usize()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Malformed("parameter name is not UTF-8".into()))?;
            let rows = r.usize()?;
            let cols = r.usize()?;
            let expected = params.get(id);
            if name != expected.name || (rows, cols) != expected.value.dim() {
                return Err(Error::Malformed(format!(
                    "blob {name:?} {rows}x{cols} does not match declared {:?} {:?}",
                    expected.name,
                    expected.value.dim()
                )));
            }
            let bytes = r.take(rows * cols * 4)?;
            let dst = params.value_mut(id);
            for (v, chunk) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after the last parameter",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            epoch,
            dev_loss,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| e.at_path(path))
    }

    /// Rebuilds the model structure described by the stored configuration.
    pub fn model(&self) -> Result<Backbone> {
        let mut scratch = ParamSet::<f32>::new();
        Backbone::declare(&mut scratch, &self.config, 0)
    }
}
