//! Online Instance Matching: embeddings are scored against a lookup table
//! of labeled identity prototypes and a circular queue of recent unlabeled
//! features.
//!
//! The table stores its prototypes at 32-bit precision so that the exported
//! file and the in-memory table describe exactly the same values.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::stream;

const LUT_MAGIC: &[u8; 4] = b"PLUT";
const LUT_VERSION: u32 = 1;
const LUT_PRECISION: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OimConfig {
    pub dim: usize,
    pub num_labeled: usize,
    pub queue_size: usize,
    pub temperature: f64,
    pub lut_momentum: f64,
    /// Loss weight λ_oim; unset means 1, or the distillation default when
    /// the table is a frozen teacher copy.
    pub weight: Option<f64>,
    /// When the table is frozen, also stop writing to the unlabeled queue.
    pub freeze_queue_with_lut: bool,
}

impl Default for OimConfig {
    fn default() -> Self {
        OimConfig {
            dim: 32,
            num_labeled: 16,
            queue_size: 32,
            temperature: 0.1,
            lut_momentum: 0.5,
            weight: None,
            freeze_queue_with_lut: false,
        }
    }
}

impl OimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("oim: {m}")));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.lut_momentum) {
            return bad(format!("lut_momentum must be in [0, 1), got {}", self.lut_momentum));
        }
        if let Some(w) = self.weight {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("weight must be nonnegative, got {w}"));
            }
        }
        if self.dim == 0 || self.num_labeled == 0 {
            return bad("dim and num_labeled must be positive".into());
        }
        Ok(())
    }

    pub fn effective_weight(&self, frozen_teacher_table: bool) -> f64 {
        self.weight
            .unwrap_or(if frozen_teacher_table { crate::kd::KD_REID_OIM_WEIGHT } else { 1.0 })
    }
}

/// `D × P` prototype matrix, one unit-norm column per labeled identity.
#[derive(Clone, Debug, PartialEq)]
pub struct LookupTable {
    dim: usize,
    /// Column-major: column `p` occupies `cols[p*dim..(p+1)*dim]`.
    cols: Vec<f32>,
    frozen: bool,
    skipped: u64,
}

fn normalized(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = v.collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|a| a / n).collect()
}

impl LookupTable {
    /// Random unit-norm columns; not frozen.
    pub fn random(dim: usize, num_labeled: usize, seed: u64) -> Result<Self> {
        if dim == 0 || num_labeled == 0 {
            return Err(Error::invalid("init_lut", "dim and num_labeled must be positive"));
        }
        let mut rng = stream(seed, "oim/lut", 0);
        let mut cols = Vec::with_capacity(dim * num_labeled);
        for _ in 0..num_labeled {
            let v = normalized((0..dim).map(|_| StandardNormal.sample(&mut rng)));
            cols.extend(v.into_iter().map(|a| a as f32));
        }
        Ok(LookupTable {
            dim,
            cols,
            frozen: false,
            skipped: 0,
        })
    }

    /// Table from explicit columns, each normalized to unit length; not
    /// frozen.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let dim = columns.first().map_or(0, Vec::len);
        if dim == 0 || columns.iter().any(|c| c.len() != dim) {
            return Err(Error::invalid("lookup table", "columns must be non-empty and equally long"));
        }
        if columns.iter().any(|c| c.iter().all(|&v| v == 0.0) || c.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("lookup table", "columns must be finite and nonzero"));
        }
        let cols = columns
            .iter()
            .flat_map(|c| normalized(c.iter().copied()))
            .map(|a| a as f32)
            .collect();
        Ok(LookupTable {
            dim,
            cols,
            frozen: false,
            skipped: 0,
        })
    }

    /// Frozen copy of `source`, which must have exactly `dim × num_labeled`.
    pub fn copy_frozen(source: &LookupTable, dim: usize, num_labeled: usize) -> Result<Self> {
        if source.dim() != dim || source.num_labeled() != num_labeled {
            return Err(Error::DimensionMismatch(format!(
                "lookup table is {}×{}, student expects {dim}×{num_labeled}",
                source.dim(),
                source.num_labeled()
            )));
        }
        Ok(LookupTable {
            dim,
            cols: source.cols.clone(),
            frozen: true,
            skipped: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_labeled(&self) -> usize {
        self.cols.len() / self.dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Labeled samples whose update was skipped because the table is frozen.
    pub fn skipped_writes(&self) -> u64 {
        self.skipped
    }

    pub(crate) fn restore_state(&mut self, frozen: bool, skipped: u64) {
        self.frozen = frozen;
        self.skipped = skipped;
    }

    pub fn column(&self, p: usize) -> &[f32] {
        &self.cols[p * self.dim..(p + 1) * self.dim]
    }

    /// Prototypes as a `[P, D]` tensor.
    pub fn tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.num_labeled(), self.dim],
            self.cols.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(LUT_MAGIC, LUT_VERSION);
        w.u32(self.dim as u32);
        w.u32(self.num_labeled() as u32);
        w.u32(LUT_PRECISION);
        for &v in &self.cols {
            w.f32(v);
        }
        w.finish()
    }

    /// Parses an exported table. The result is not frozen.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, "lookup-table", LUT_MAGIC)?;
        if version != LUT_VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        let p = r.u32()? as usize;
        let at = r.offset();
        let precision = r.u32()?;
        if precision != LUT_PRECISION {
            return Err(r.err_at(at, format!("unsupported precision {precision}")));
        }
        if dim == 0 || p == 0 {
            return Err(r.err_at(at, format!("empty table {dim}×{p}")));
        }
        let expected = dim.checked_mul(p).and_then(|n| n.checked_mul(4));
        let left = bytes.len() - r.offset();
        if expected != Some(left) {
            return Err(r.err_at(r.offset(), format!("{dim}×{p} table needs {expected:?} bytes, found {left}")));
        }
        let cols = (0..dim * p).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(LookupTable {
            dim,
            cols,
            frozen: false,
            skipped: 0,
        })
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn import(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    fn update_column(&mut self, p: usize, x: &[f64], momentum: f64) {
        if momentum >= 1.0 {
            return;
        }
        let col = &mut self.cols[p * self.dim..(p + 1) * self.dim];
        let v = normalized(col.iter().zip(x).map(|(&c, &a)| momentum * c as f64 + (1.0 - momentum) * a));
        for (c, a) in col.iter_mut().zip(v) {
            *c = a as f32;
        }
    }
}

/// Circular queue of the most recent unlabeled features.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledQueue {
    dim: usize,
    capacity: usize,
    entries: Vec<Vec<f64>>,
    cursor: usize,
}

impl UnlabeledQueue {
    pub fn new(dim: usize, capacity: usize) -> Self {
        UnlabeledQueue {
            dim,
            capacity,
            entries: Vec::with_capacity(capacity),
            cursor: 0,
        }
    }

    pub(crate) fn from_parts(dim: usize, capacity: usize, entries: Vec<Vec<f64>>, cursor: usize) -> Result<Self> {
        if entries.len() > capacity || (capacity > 0 && cursor >= capacity) || entries.iter().any(|e| e.len() != dim) {
            return Err(Error::invalid("unlabeled queue", "inconsistent queue state"));
        }
        Ok(UnlabeledQueue {
            dim,
            capacity,
            entries,
            cursor,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Stored features in slot order.
    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn push(&mut self, x: &[f64]) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() < self.capacity {
            self.entries.push(x.to_vec());
        } else {
            self.entries[self.cursor] = x.to_vec();
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OimOutput {
    pub loss: Var,
    /// `[n, P + filled queue slots]` probabilities.
    pub probs: Var,
}

/// OIM loss of embeddings `x` (`[n, D]`, unit rows). `labels[i]` is the
/// identity of row `i` or `None` when unlabeled. The table and queue enter
/// the graph as constants.
pub fn oim_forward(
    g: &mut Graph,
    x: Var,
    labels: &[Option<usize>],
    lut: &LookupTable,
    queue: &UnlabeledQueue,
    temperature: f64,
) -> Result<OimOutput> {
    let s = g.value(x).shape().to_vec();
    if s.len() != 2 || s[0] != labels.len() || s[1] != lut.dim() {
        return Err(Error::ShapeMismatch {
            op: "oim_forward",
            lhs: vec![labels.len(), lut.dim()],
            rhs: s,
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("oim_forward", format!("temperature must be positive, got {temperature}")));
    }
    let p = lut.num_labeled();
    if let Some(l) = labels.iter().flatten().find(|&&l| l >= p) {
        return Err(Error::invalid("oim_forward", format!("label {l} out of range for {p} identities")));
    }
    let n_entries = p + queue.len();
    let d = lut.dim();
    // [D, P + Q] with prototypes then queue entries as columns
    let mut mt = vec![0.0; d * n_entries];
    for j in 0..p {
        for (k, &v) in lut.column(j).iter().enumerate() {
            mt[k * n_entries + j] = v as f64;
        }
    }
    for (j, e) in queue.entries().iter().enumerate() {
        for (k, &v) in e.iter().enumerate() {
            mt[k * n_entries + p + j] = v;
        }
    }
    let mt = g.constant(Tensor::new(vec![d, n_entries], mt)?);
    let logits = g.matmul(x, mt)?;
    let probs = g.softmax(logits, temperature)?;
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|t| i * n_entries + t))
        .collect();
    let loss = if idx.is_empty() {
        static WARNED: std::sync::Once = std::sync::Once::new();
        WARNED.call_once(|| log::warn!("oim_forward: batch has no labeled samples, loss is 0 (further occurrences not reported)"));
        g.constant(Tensor::scalar(0.0))
    } else {
        let logp = g.log_softmax(logits, temperature)?;
        let n = idx.len();
        let picked = g.gather(logp, idx, vec![n])?;
        let m = g.mean(picked);
        g.scale(m, -1.0)
    };
    Ok(OimOutput { loss, probs })
}

/// Moving-average table update and queue enqueue for one optimizer step.
/// A frozen table is left untouched and counts the skipped writes.
pub fn oim_update(
    x: &Tensor,
    labels: &[Option<usize>],
    lut: &mut LookupTable,
    queue: &mut UnlabeledQueue,
    cfg: &OimConfig,
) -> Result<()> {
    if x.shape() != [labels.len(), lut.dim()] {
        return Err(Error::ShapeMismatch {
            op: "oim_update",
            lhs: vec![labels.len(), lut.dim()],
            rhs: x.shape().to_vec(),
        });
    }
    let p = lut.num_labeled();
    if let Some(l) = labels.iter().flatten().find(|&&l| l >= p) {
        return Err(Error::invalid("oim_update", format!("label {l} out of range for {p} identities")));
    }
    for (i, l) in labels.iter().enumerate() {
        match l {
            Some(_) if lut.frozen => lut.skipped += 1,
            Some(t) => lut.update_column(*t, x.row(i), cfg.lut_momentum),
            None if lut.frozen && cfg.freeze_queue_with_lut => {}
            None => queue.push(x.row(i)),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(cols: &[&[f32]]) -> LookupTable {
        LookupTable {
            dim: cols[0].len(),
            cols: cols.iter().flat_map(|c| c.iter().copied()).collect(),
            frozen: false,
            skipped: 0,
        }
    }

    #[test]
    fn moving_average_then_normalize() {
        let mut lut = table(&[&[1.0, 0.0]]);
        let mut q = UnlabeledQueue::new(2, 0);
        let cfg = OimConfig::default();
        oim_update(&Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(), &[Some(0)], &mut lut, &mut q, &cfg).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((lut.column(0)[0] - h).abs() < 1e-6 && (lut.column(0)[1] - h).abs() < 1e-6);
    }

    #[test]
    fn circular_queue_overwrites_oldest() {
        let mut q = UnlabeledQueue::new(1, 2);
        for v in [1.0, 2.0, 3.0] {
            q.push(&[v]);
        }
        assert_eq!(q.entries(), &[vec![3.0], vec![2.0]]);
        assert_eq!(q.cursor(), 1);
    }

    #[test]
    fn frozen_table_counts_skips() {
        let src = table(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mut lut = LookupTable::copy_frozen(&src, 2, 2).unwrap();
        let mut q = UnlabeledQueue::new(2, 4);
        let x = Tensor::new(vec![3, 2], vec![0.6, 0.8, 0.8, 0.6, 1.0, 0.0]).unwrap();
        oim_update(&x, &[Some(0), None, Some(1)], &mut lut, &mut q, &OimConfig::default()).unwrap();
        assert_eq!(lut.to_bytes(), src.to_bytes());
        assert_eq!(lut.skipped_writes(), 2);
        assert_eq!(q.len(), 1);
        assert!(matches!(
            LookupTable::copy_frozen(&src, 3, 2),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn bad_config_rejected() {
        assert!(OimConfig { temperature: 0.0, ..OimConfig::default() }.validate().is_err());
        assert!(OimConfig { lut_momentum: 1.0, ..OimConfig::default() }.validate().is_err());
        assert!(OimConfig::default().validate().is_ok());
    }
}
