//! Versioned model container.
//!
//! Layout after the `PSCK` magic and version: sections `SPEC` (backbone
//! size, embedding dim, image size), `OIMC` (identity-loss config), `PARM`
//! (named tensors in name order, 64-bit), `LUTB` (exported table bytes,
//! frozen flag, skipped-write count), `QUEU` (unlabeled queue) and `STEP`.

use std::path::Path;

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::oim::{LookupTable, OimConfig, UnlabeledQueue};
use crate::params::ParamStore;
use crate::psmodel::{BackboneSize, BackboneSpec, PersonSearchModel};

const MAGIC: &[u8; 4] = b"PSCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PersonSearchModel,
    pub oim: OimConfig,
    pub lut: LookupTable,
    pub queue: UnlabeledQueue,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.begin(b"SPEC");
        w.u32(match self.model.spec.size {
            BackboneSize::Large => 0,
            BackboneSize::Small => 1,
        });
        w.u32(self.model.spec.embedding_dim as u32);
        w.u32(self.model.spec.image_size as u32);

        w.begin(b"OIMC");
        let o = &self.oim;
        w.u32(o.dim as u32);
        w.u32(o.num_labeled as u32);
        w.u32(o.queue_size as u32);
        w.f64(o.temperature);
        w.f64(o.lut_momentum);
        w.u32(u32::from(o.weight.is_some()));
        w.f64(o.weight.unwrap_or(0.0));
        w.u32(u32::from(o.freeze_queue_with_lut));

        w.begin(b"PARM");
        w.len_prefixed(self.model.params.len());
        for (name, t) in self.model.params.iter() {
            w.str(name);
            w.len_prefixed(t.shape().len());
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.f64(v);
            }
        }

        w.begin(b"LUTB");
        w.bytes(&self.lut.to_bytes());
        w.u32(u32::from(self.lut.is_frozen()));
        w.u64(self.lut.skipped_writes());

        w.begin(b"QUEU");
        w.u32(self.queue.dim() as u32);
        w.u32(self.queue.capacity() as u32);
        w.u32(self.queue.cursor() as u32);
        w.len_prefixed(self.queue.len());
        for e in self.queue.entries() {
            for &v in e {
                w.f64(v);
            }
        }

        w.begin(b"STEP");
        w.u64(self.step);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, "checkpoint", MAGIC)?;
        if version != VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        r.section(b"SPEC")?;
        let at = r.offset();
        let size = match r.u32()? {
            0 => BackboneSize::Large,
            1 => BackboneSize::Small,
            s => return Err(r.err_at(at, format!("unknown backbone size {s}"))),
        };
        let dim = r.u32()? as usize;
        let image_size = r.u32()? as usize;
        let spec = BackboneSpec::new(size, dim, image_size);

        r.section(b"OIMC")?;
        let oim = OimConfig {
            dim: r.u32()? as usize,
            num_labeled: r.u32()? as usize,
            queue_size: r.u32()? as usize,
            temperature: r.f64()?,
            lut_momentum: r.f64()?,
            weight: {
                let some = r.u32()? != 0;
                let w = r.f64()?;
                some.then_some(w)
            },
            freeze_queue_with_lut: r.u32()? != 0,
        };

        r.section(b"PARM")?;
        let mut params = ParamStore::new();
        let n = r.count(8)?;
        for _ in 0..n {
            let name = r.str()?;
            let nd = r.count(4)?;
            let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let at = r.offset();
            if numel.saturating_mul(8) > bytes.len() - at {
                return Err(r.err_at(at, format!("tensor `{name}` of shape {shape:?} exceeds file size")));
            }
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::new(shape, data)?);
        }
        let fresh = PersonSearchModel::new(spec.clone(), 0);
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::DimensionMismatch(format!(
                        "parameter `{name}` has shape {:?}, architecture expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::DimensionMismatch(format!("parameter `{name}` missing"))),
            }
        }

        r.section(b"LUTB")?;
        let mut lut = LookupTable::from_bytes(r.bytes()?)?;
        let frozen = r.u32()? != 0;
        lut.restore_state(frozen, r.u64()?);
        if lut.dim() != oim.dim || lut.num_labeled() != oim.num_labeled {
            return Err(Error::DimensionMismatch(format!(
                "stored table is {}×{}, config says {}×{}",
                lut.dim(),
                lut.num_labeled(),
                oim.dim,
                oim.num_labeled
            )));
        }

        r.section(b"QUEU")?;
        let qdim = r.u32()? as usize;
        let cap = r.u32()? as usize;
        let cursor = r.u32()? as usize;
        let len = r.count(8 * qdim.max(1))?;
        let entries = (0..len)
            .map(|_| (0..qdim).map(|_| r.f64()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let queue = UnlabeledQueue::from_parts(qdim, cap, entries, cursor)?;

        r.section(b"STEP")?;
        let step = r.u64()?;
        r.finish()?;
        Ok(Checkpoint {
            model: PersonSearchModel { spec, params },
            oim,
            lut,
            queue,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
