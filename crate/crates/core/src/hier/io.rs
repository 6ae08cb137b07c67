//! Binary model container.
//!
//! Layout: the magic string, a kind byte, the training configuration, the
//! station index, then each network as shapes followed by row-major values.
//! Integers are little-endian `u64`, floats little-endian `f64` bits.

use std::fs;
use std::path::Path;

use super::{FlatModel, HierError, HierModel};
use crate::encode::StationIndex;
use crate::geo::GeoPoint;
use crate::nn::{CnnModel, LayerOrder, LrnParams, NetConfig, Tensor, TrainConfig};

pub const MAGIC: &[u8; 7] = b"DSPACE1";

const KIND_HIER: u8 = 0;
const KIND_FLAT: u8 = 1;

/// Either kind of trained predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Hier(HierModel),
    Flat(FlatModel),
}

impl SavedModel {
    pub fn index(&self) -> &StationIndex {
        match self {
            SavedModel::Hier(h) => &h.index,
            SavedModel::Flat(f) => &f.index,
        }
    }

    pub fn cfg(&self) -> &TrainConfig {
        match self {
            SavedModel::Hier(h) => &h.cfg,
            SavedModel::Flat(f) => &f.cfg,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        match self {
            SavedModel::Hier(h) => {
                w.u8(KIND_HIER);
                w.cfg(&h.cfg);
                w.index(&h.index);
                w.model(&h.coarse);
                w.usize(h.fines.len());
                for f in &h.fines {
                    w.model(f);
                }
            }
            SavedModel::Flat(f) => {
                w.u8(KIND_FLAT);
                w.cfg(&f.cfg);
                w.index(&f.index);
                w.model(&f.model);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HierError> {
        let head = &bytes[..bytes.len().min(MAGIC.len())];
        if head != &MAGIC[..head.len()] {
            return Err(HierError::VersionMismatch("missing DSPACE1 header".into()));
        }
        let mut r = Reader { buf: bytes, pos: head.len() };
        if head.len() < MAGIC.len() {
            return Err(corrupt("truncated header"));
        }
        let kind = r.u8()?;
        let cfg = r.cfg()?;
        let index = r.index()?;
        let out = match kind {
            KIND_HIER => {
                let coarse = r.model()?;
                let n = r.usize()?;
                if n != index.n_coarse() {
                    return Err(corrupt("fine model count"));
                }
                let fines = (0..n).map(|_| r.model()).collect::<Result<_, _>>()?;
                SavedModel::Hier(HierModel::from_parts(coarse, fines, index, cfg)?)
            }
            KIND_FLAT => {
                let model = r.model()?;
                if model.in_channels != index.n_fine() || model.classes != index.n_fine() {
                    return Err(corrupt("flat model does not match the index"));
                }
                SavedModel::Flat(FlatModel { model, index, cfg })
            }
            k => return Err(corrupt(&format!("unknown model kind {k}"))),
        };
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(out)
    }
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<(), HierError> {
    Ok(fs::write(path, model.to_bytes())?)
}

pub fn load_model(path: &Path) -> Result<SavedModel, HierError> {
    SavedModel::from_bytes(&fs::read(path)?)
}

fn corrupt(what: &str) -> HierError {
    HierError::CorruptFile(what.to_string())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn lrn(&mut self, p: &Option<LrnParams>) {
        match p {
            None => self.u8(0),
            Some(p) => {
                self.u8(1);
                self.f64(p.k);
                self.usize(p.n_neighbors);
                self.f64(p.alpha);
                self.f64(p.beta);
            }
        }
    }

    fn order(&mut self, o: LayerOrder) {
        self.u8(match o {
            LayerOrder::PoolThenNorm => 0,
            LayerOrder::NormThenPool => 1,
        });
    }

    fn cfg(&mut self, c: &TrainConfig) {
        self.f64(c.learning_rate);
        self.usize(c.batch_size);
        self.usize(c.epochs);
        self.u64(c.seed);
        self.usize(c.window);
        self.f64(c.train_fraction);
        self.usize(c.net.kernel_width);
        self.usize(c.net.pool_width);
        self.usize(c.net.pool_stride);
        self.lrn(&c.net.lrn);
        self.order(c.net.order);
    }

    fn index(&mut self, idx: &StationIndex) {
        self.usize(idx.n_fine());
        for (f, p) in idx.points().iter().enumerate() {
            self.f64(p.longitude);
            self.f64(p.latitude);
            self.usize(idx.coarse_of(f));
        }
        self.usize(idx.n_coarse());
        for l in idx.lacids() {
            self.str(l);
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.usize(t.rank());
        for &d in t.shape() {
            self.usize(d);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    fn model(&mut self, m: &CnnModel) {
        self.usize(m.in_channels);
        self.usize(m.classes);
        self.usize(m.window);
        self.usize(m.kernel_width);
        self.usize(m.pool_width);
        self.usize(m.pool_stride);
        self.lrn(&m.lrn);
        self.order(m.order);
        self.f64(m.learning_rate);
        self.u64(m.seed);
        for t in m.params() {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], HierError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, HierError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, HierError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn usize(&mut self) -> Result<usize, HierError> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("size overflow"))
    }

    /// A count of items each at least `min_bytes` long, bounded by what is left.
    fn count(&mut self, min_bytes: usize) -> Result<usize, HierError> {
        let n = self.usize()?;
        if n.saturating_mul(min_bytes) > self.buf.len() - self.pos {
            return Err(corrupt("length exceeds file size"));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64, HierError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn str(&mut self) -> Result<String, HierError> {
        let n = self.count(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
    }

    fn lrn(&mut self) -> Result<Option<LrnParams>, HierError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(LrnParams { k: self.f64()?, n_neighbors: self.usize()?, alpha: self.f64()?, beta: self.f64()? })),
            _ => Err(corrupt("bad normalization flag")),
        }
    }

    fn order(&mut self) -> Result<LayerOrder, HierError> {
        match self.u8()? {
            0 => Ok(LayerOrder::PoolThenNorm),
            1 => Ok(LayerOrder::NormThenPool),
            _ => Err(corrupt("bad layer order")),
        }
    }

    fn cfg(&mut self) -> Result<TrainConfig, HierError> {
        let cfg = TrainConfig {
            learning_rate: self.f64()?,
            batch_size: self.usize()?,
            epochs: self.usize()?,
            seed: self.u64()?,
            window: self.usize()?,
            train_fraction: self.f64()?,
            net: NetConfig {
                kernel_width: self.usize()?,
                pool_width: self.usize()?,
                pool_stride: self.usize()?,
                lrn: self.lrn()?,
                order: self.order()?,
            },
        };
        cfg.validate().map_err(|e| corrupt(&e.to_string()))?;
        Ok(cfg)
    }

    fn index(&mut self) -> Result<StationIndex, HierError> {
        let n = self.count(24)?;
        let mut points = Vec::with_capacity(n);
        let mut parents = Vec::with_capacity(n);
        for _ in 0..n {
            let (lon, lat) = (self.f64()?, self.f64()?);
            points.push(GeoPoint::new(lon, lat).map_err(|e| corrupt(&e.to_string()))?);
            parents.push(self.usize()?);
        }
        let nc = self.count(8)?;
        let lacids = (0..nc).map(|_| self.str()).collect::<Result<_, _>>()?;
        StationIndex::from_parts(points, parents, lacids).map_err(|e| corrupt(&e.to_string()))
    }

    fn tensor(&mut self) -> Result<Tensor, HierError> {
        let rank = self.count(8)?;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor too large"))?;
        if len.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(corrupt("unexpected end of file"));
        }
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Tensor::from_vec(&shape, data).map_err(|e| corrupt(&e.to_string()))
    }

    fn model(&mut self) -> Result<CnnModel, HierError> {
        let mut m = CnnModel {
            in_channels: self.usize()?,
            classes: self.usize()?,
            window: self.usize()?,
            kernel_width: self.usize()?,
            pool_width: self.usize()?,
            pool_stride: self.usize()?,
            lrn: self.lrn()?,
            order: self.order()?,
            learning_rate: self.f64()?,
            seed: self.u64()?,
            conv_kernels: Tensor::zeros(&[1]),
            conv_bias: Tensor::zeros(&[1]),
            prelu_slopes: Tensor::zeros(&[1]),
            softmax_w: Tensor::zeros(&[1]),
        };
        m.conv_kernels = self.tensor()?;
        m.conv_bias = self.tensor()?;
        m.prelu_slopes = self.tensor()?;
        m.softmax_w = self.tensor()?;
        // the stored shapes must match a freshly built network of the same hyperparameters
        let expected = m.window.checked_sub(m.kernel_width).map(|c| c + 1).filter(|&c| {
            m.kernel_width > 0 && m.pool_width > 0 && m.pool_stride > 0 && c >= m.pool_width
        });
        let Some(conv_len) = expected else { return Err(corrupt("inconsistent layer sizes")) };
        let feats = crate::nn::HIDDEN_UNITS * crate::nn::layers::pool_len(conv_len, m.pool_width, m.pool_stride);
        let h = crate::nn::HIDDEN_UNITS;
        if m.conv_kernels.shape() != [h, m.in_channels, m.kernel_width]
            || m.conv_bias.shape() != [h]
            || m.prelu_slopes.shape() != [h]
            || m.softmax_w.shape() != [m.classes, feats]
        {
            return Err(corrupt("parameter shapes do not match the network"));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hier::tests::{index_from_parents, small_cfg};

    fn hier() -> SavedModel {
        let mut cfg = small_cfg(7, 11);
        cfg.net.order = LayerOrder::NormThenPool;
        SavedModel::Hier(HierModel::new(index_from_parents(&[0, 1, 1, 2, 0]), cfg).unwrap())
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let flat = SavedModel::Flat(FlatModel::new(index_from_parents(&[0, 0, 1]), {
            let mut c = small_cfg(5, 2);
            c.net.lrn = None;
            c
        }).unwrap());
        for m in [hier(), flat] {
            let bytes = m.to_bytes();
            let back = SavedModel::from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_model(&p, &hier()).unwrap();
        assert_eq!(load_model(&p).unwrap(), hier());
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = hier().to_bytes();
        for cut in [0, 3, 7, 8, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(SavedModel::from_bytes(&bytes[..cut]), Err(HierError::CorruptFile(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(SavedModel::from_bytes(&long), Err(HierError::CorruptFile(_))));
    }

    #[test]
    fn wrong_magic_is_version_mismatch() {
        let mut bytes = hier().to_bytes();
        bytes[6] = b'2';
        assert!(matches!(SavedModel::from_bytes(&bytes), Err(HierError::VersionMismatch(_))));
        assert!(matches!(SavedModel::from_bytes(b"PK\x03\x04"), Err(HierError::VersionMismatch(_))));
    }
}
