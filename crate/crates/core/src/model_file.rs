//! Binary model files: a MoICA model and, optionally, the whitening it was
//! trained behind. Layout is in `docs/model-format.md`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::manifold::ObliqueMatrix;
use crate::moica::{IcaComponent, MogSource, MoicaModel};
use crate::whitening::WhiteningTransform;

pub const MAGIC: &[u8; 8] = b"MOICAMDL";
pub const VERSION: u32 = 1;
const FLAG_WHITENING: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub model: MoicaModel,
    pub whitening: Option<WhiteningTransform>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::format("model file", reason)
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        // Anything this large cannot be backed by the remaining bytes anyway.
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("implausible count {v}")))
    }

    fn f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().unwrap());
        if v.is_finite() {
            Ok(v)
        } else {
            Err(corrupt(format!(
                "non-finite value at byte {}",
                self.pos - 8
            )))
        }
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(corrupt(format!("truncated at byte {}", self.pos)));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

impl SavedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.model;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(if self.whitening.is_some() {
            FLAG_WHITENING
        } else {
            0
        });
        w.u64(model.dim());
        w.u64(model.dim());
        w.u64(model.n_components());
        w.f64s(model.priors());
        for comp in model.components() {
            w.f64s(comp.mixing().as_matrix().as_slice());
            for src in comp.sources() {
                w.u64(src.len());
                w.f64s(src.weights());
                w.f64s(src.means());
                w.f64s(src.stdevs());
            }
        }
        if let Some(tf) = &self.whitening {
            w.u64(tf.input_dim());
            w.u64(tf.output_dim());
            w.f64s([tf.eps(), tf.total_variance()].iter());
            w.f64s(tf.mean().as_slice());
            w.f64s(tf.eigenvalues().as_slice());
            w.f64s(tf.basis().as_slice());
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let flags = r.u32()?;
        if flags & !FLAG_WHITENING != 0 {
            return Err(corrupt(format!("unknown flags {flags:#x}")));
        }
        let (m, l, k) = (r.u64()?, r.u64()?, r.u64()?);
        if m != l {
            return Err(corrupt(format!(
                "only square models are supported (M = {m}, L = {l})"
            )));
        }
        if m == 0 || k == 0 {
            return Err(corrupt("empty model"));
        }
        let priors = r.f64s(k)?;
        let mut components = Vec::with_capacity(k);
        for _ in 0..k {
            let a = DMatrix::from_vec(m, l, r.f64s(m * l)?);
            let mut sources = Vec::with_capacity(l);
            for _ in 0..l {
                let n = r.u64()?;
                sources.push(MogSource::new(r.f64s(n)?, r.f64s(n)?, r.f64s(n)?)?);
            }
            components.push(IcaComponent::new(ObliqueMatrix::new(a)?, sources)?);
        }
        let model = MoicaModel::new(components, priors)?;
        let whitening = if flags & FLAG_WHITENING != 0 {
            let (big_d, d) = (r.u64()?, r.u64()?);
            let eps = r.f64()?;
            let total = r.f64()?;
            let mean = DVector::from_vec(r.f64s(big_d)?);
            let eig = DVector::from_vec(r.f64s(d)?);
            let basis = DMatrix::from_vec(big_d, d, r.f64s(big_d * d)?);
            let tf = WhiteningTransform::from_parts(mean, basis, eig, eps, total)?;
            if tf.output_dim() != m {
                return Err(corrupt(format!(
                    "whitening output {} does not match M = {m}",
                    tf.output_dim()
                )));
            }
            Some(tf)
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(SavedModel { model, whitening })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
