//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes  "GPCK"
//! version    u8
//! kind       u8       1 = supernet, 2 = static network
//! dtype      u8       4 = f32, 8 = f64
//! hash       32 bytes SHA-256 of the canonical model description
//! epochs     u64      epochs completed
//! seed       u64
//! classes    u32
//! aggregator u8       0 = graph, 1 = node-only
//! hidden     u8       1 if generators have a hidden layer
//! grid       u32 count, then f64 values
//! calibrated u8 flag, then u32 count and f64 ratios when set
//! tensors    u32 count, then per tensor:
//!              u32 name length, name bytes, u32 rank, u64 dims, values
//! bn states  u32 count, then per state:
//!              u64 node, u64 bucket, u64 channels, scale, shift,
//!              moving mean, moving var (channels values each),
//!              eps value, u64 calibrated batches
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::mem::size_of;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gcn::AggregatorKind;
use crate::graph::{ModelGraph, RatioAssignment};
use crate::network::{BnKey, Supernet, SupernetOptions};
use crate::tensor::{BatchNormState, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"GPCK";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Supernet = 1,
    Static = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingMeta {
    pub epochs_completed: usize,
    pub seed: u64,
}

/// Everything a checkpoint holds, independent of the network type.
#[derive(Debug, Clone, PartialEq)]
pub struct Container<T> {
    pub kind: Kind,
    pub hash: [u8; 32],
    pub meta: TrainingMeta,
    pub options: SupernetOptions,
    pub calibrated_for: Option<Vec<f64>>,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub bn: BTreeMap<BnKey, BatchNormState<T>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn value<T: Scalar>(&mut self, v: T) {
        if size_of::<T>() == 4 {
            self.0.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            self.f64(v.as_f64());
        }
    }
    fn values<T: Scalar>(&mut self, vs: &[T]) {
        vs.iter().for_each(|&v| self.value(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn value<T: Scalar>(&mut self) -> Result<T> {
        if size_of::<T>() == 4 {
            let v = f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
            Ok(T::of(v as f64))
        } else {
            Ok(T::of(self.f64()?))
        }
    }
    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        // bound the allocation by what the buffer can still hold
        if n.saturating_mul(size_of::<T>()) > self.buf.len() - self.pos {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        (0..n).map(|_| self.value()).collect()
    }
}

impl<T: Scalar> Container<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u8(FORMAT_VERSION);
        w.u8(self.kind as u8);
        w.u8(size_of::<T>() as u8);
        w.0.extend_from_slice(&self.hash);
        w.u64(self.meta.epochs_completed as u64);
        w.u64(self.meta.seed);
        w.u32(self.options.classes);
        w.u8(match self.options.aggregator {
            AggregatorKind::Graph => 0,
            AggregatorKind::NodeOnly => 1,
        });
        w.u8(self.options.hidden_layer as u8);
        w.u32(self.options.grid.len());
        self.options.grid.iter().for_each(|&g| w.f64(g));
        match &self.calibrated_for {
            None => w.u8(0),
            Some(r) => {
                w.u8(1);
                w.u32(r.len());
                r.iter().for_each(|&v| w.f64(v));
            }
        }
        w.u32(self.tensors.len());
        for (name, t) in &self.tensors {
            w.u32(name.len());
            w.0.extend_from_slice(name.as_bytes());
            w.u32(t.shape().len());
            t.shape().iter().for_each(|&d| w.u64(d as u64));
            w.values(t.data());
        }
        w.u32(self.bn.len());
        for (&(node, bucket), s) in &self.bn {
            w.u64(node as u64);
            w.u64(bucket as u64);
            w.u64(s.channels() as u64);
            w.values(s.scale.data());
            w.values(s.shift.data());
            w.values(&s.moving_mean);
            w.values(&s.moving_var);
            w.value(s.eps);
            w.u64(s.calibrated_batches as u64);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let kind = match r.u8()? {
            1 => Kind::Supernet,
            2 => Kind::Static,
            k => return Err(Error::Checkpoint(format!("unknown checkpoint kind {k}"))),
        };
        let dtype = r.u8()? as usize;
        if dtype != size_of::<T>() {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {}-byte floats, expected {}",
                dtype,
                size_of::<T>()
            )));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let meta = TrainingMeta {
            epochs_completed: r.u64()? as usize,
            seed: r.u64()?,
        };
        let classes = r.u32()?;
        let aggregator = match r.u8()? {
            0 => AggregatorKind::Graph,
            1 => AggregatorKind::NodeOnly,
            k => return Err(Error::Checkpoint(format!("unknown aggregator kind {k}"))),
        };
        let hidden_layer = r.u8()? == 1;
        let n = r.u32()?;
        let grid = r.values::<f64>(n)?;
        let calibrated_for = match r.u8()? {
            0 => None,
            _ => {
                let n = r.u32()?;
                Some(r.values::<f64>(n)?)
            }
        };
        let mut tensors = Vec::new();
        for _ in 0..r.u32()? {
            let len = r.u32()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let count = count.ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let data = r.values::<T>(count)?;
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        let mut bn = BTreeMap::new();
        for _ in 0..r.u32()? {
            let key = (r.u64()? as usize, r.u64()? as usize);
            let c = r.u64()? as usize;
            let mut s = BatchNormState::new(0, key.1);
            s.scale = Tensor::new(&[c], r.values(c)?)?;
            s.shift = Tensor::new(&[c], r.values(c)?)?;
            s.moving_mean = r.values(c)?;
            s.moving_var = r.values(c)?;
            s.eps = r.value()?;
            s.calibrated_batches = r.u64()? as usize;
            bn.insert(key, s);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            kind,
            hash,
            meta,
            options: SupernetOptions {
                classes,
                grid,
                aggregator,
                hidden_layer,
            },
            calibrated_for,
            tensors,
            bn,
        })
    }

    /// Errors unless the container was written for `g` and holds `kind`.
    pub fn check(&self, g: &ModelGraph, kind: Kind) -> Result<()> {
        if self.hash != g.description_hash() {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different model description".into(),
            ));
        }
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    /// Moves the stored tensors into `dst`, matching by name and shape.
    pub fn fill(&self, dst: Vec<(String, &mut Tensor<T>)>) -> Result<()> {
        let stored: BTreeMap<&str, &Tensor<T>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if stored.len() != dst.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, network expects {}",
                stored.len(),
                dst.len()
            )));
        }
        for (name, t) in dst {
            let src = stored
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = (*src).clone();
        }
        Ok(())
    }

    /// Replaces `dst` with the stored states after checking keys and widths.
    pub fn fill_bn(&self, dst: &mut BTreeMap<BnKey, BatchNormState<T>>) -> Result<()> {
        if dst.len() != self.bn.len() || dst.iter().zip(&self.bn).any(|(a, b)| a.0 != b.0 || a.1.channels() != b.1.channels()) {
            return Err(Error::Checkpoint("batch-norm states do not match the network".into()));
        }
        *dst = self.bn.clone();
        Ok(())
    }
}

pub fn supernet_tensors<T: Scalar>(net: &Supernet<T>) -> Vec<(String, Tensor<T>)> {
    let mut out: Vec<(String, Tensor<T>)> = net
        .aggregator
        .tensors()
        .into_iter()
        .chain(net.hypernet.tensors())
        .map(|(n, t)| (n, t.clone()))
        .collect();
    out.push(("classifier.w".into(), net.classifier_w.clone()));
    out.push(("classifier.b".into(), net.classifier_b.clone()));
    out
}

pub fn supernet_container<T: Scalar>(net: &Supernet<T>, meta: TrainingMeta) -> Container<T> {
    Container {
        kind: Kind::Supernet,
        hash: net.graph.description_hash(),
        meta,
        options: net.options(),
        calibrated_for: net.calibrated_for().map(|r| r.ratios().to_vec()),
        tensors: supernet_tensors(net),
        bn: net.bn.clone(),
    }
}

pub fn supernet_from_container<T: Scalar>(g: &ModelGraph, c: &Container<T>) -> Result<Supernet<T>> {
    c.check(g, Kind::Supernet)?;
    let mut net = Supernet::new(g.clone(), &c.options, 0)?;
    let mut dst: Vec<(String, &mut Tensor<T>)> = net.aggregator.tensors_mut();
    dst.extend(net.hypernet.tensors_mut());
    dst.push(("classifier.w".into(), &mut net.classifier_w));
    dst.push(("classifier.b".into(), &mut net.classifier_b));
    c.fill(dst)?;
    c.fill_bn(&mut net.bn)?;
    if let Some(r) = &c.calibrated_for {
        net.set_calibrated(Some(RatioAssignment::from_per_node(g, r)?));
    }
    Ok(net)
}

pub fn save_supernet<T: Scalar>(path: &Path, net: &Supernet<T>, meta: TrainingMeta) -> Result<()> {
    write_bytes(path, &supernet_container(net, meta).to_bytes())
}

pub fn load_supernet<T: Scalar>(path: &Path, g: &ModelGraph) -> Result<(Supernet<T>, TrainingMeta)> {
    let c = Container::<T>::from_bytes(&read_bytes(path)?)?;
    Ok((supernet_from_container(g, &c)?, c.meta))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
