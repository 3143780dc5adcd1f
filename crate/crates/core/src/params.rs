use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Kernel,
    Bias,
    Weight,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Kernel => "kernel",
            ParamRole::Bias => "bias",
            ParamRole::Weight => "weight",
        }
    }
}

/// One parameter tensor of a model: owning layer index, role and shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParamEntry {
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Canonical ordered listing of a model's parameter tensors. Layer order,
/// kernel/weight before bias.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Manifest {
    entries: Vec<ParamEntry>,
    offsets: Vec<usize>,
    total: usize,
}

impl Manifest {
    pub fn new(entries: Vec<ParamEntry>) -> Self {
        let mut offsets = Vec::with_capacity(entries.len());
        let mut total = 0;
        for e in &entries {
            offsets.push(total);
            total += e.len();
        }
        Self {
            entries,
            offsets,
            total,
        }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.total
    }

    pub fn range(&self, entry: usize) -> std::ops::Range<usize> {
        let start = self.offsets[entry];
        start..start + self.entries[entry].len()
    }

    /// SHA-256 of the canonical text form.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_string().as_bytes()).into()
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            write!(f, "{}:{}:{}", e.layer, e.role.as_str(), dims.join("x"))?;
        }
        Ok(())
    }
}

/// Flat parameter vector with its manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    manifest: Arc<Manifest>,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn new(manifest: Arc<Manifest>, values: Vec<f64>) -> Result<Self> {
        if values.len() != manifest.param_count() {
            return Err(Error::dim(format!(
                "manifest describes {} parameters, got {}",
                manifest.param_count(),
                values.len()
            )));
        }
        Ok(Self { manifest, values })
    }

    pub fn zeros(manifest: Arc<Manifest>) -> Self {
        let values = vec![0.0; manifest.param_count()];
        Self { manifest, values }
    }

    pub fn manifest(&self) -> &Arc<Manifest> {
        &self.manifest
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Aggregation compatibility: identical manifests.
    pub fn is_compatible(&self, other: &ParamSet) -> bool {
        Arc::ptr_eq(&self.manifest, &other.manifest) || self.manifest == other.manifest
    }

    pub(crate) fn ensure_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::Incompatible(format!(
                "manifest [{}] vs [{}]",
                self.manifest, other.manifest
            )))
        }
    }

    pub fn segment(&self, entry: usize) -> &[f64] {
        &self.values[self.manifest.range(entry)]
    }

    pub fn segment_mut(&mut self, entry: usize) -> &mut [f64] {
        let range = self.manifest.range(entry);
        &mut self.values[range]
    }

    /// Copies one parameter tensor out with its shape.
    pub fn tensor(&self, entry: usize) -> Tensor {
        Tensor::from_parts(
            self.manifest.entries()[entry].shape.clone(),
            self.segment(entry).to_vec(),
        )
    }
}

/// `params - lr * grads`, element-wise.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
    params.ensure_compatible(grads)?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::arg(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    let values = params
        .values
        .iter()
        .zip(&grads.values)
        .map(|(p, g)| p - lr * g)
        .collect();
    Ok(ParamSet {
        manifest: params.manifest.clone(),
        values,
    })
}

/// Binary payload of a [`ParamSet`], little-endian throughout:
///
/// | offset | size | field                                  |
/// |--------|------|----------------------------------------|
/// | 0      | 4    | magic `PFES`                           |
/// | 4      | 2    | format version (1)                     |
/// | 6      | 2    | reserved, zero                         |
/// | 8      | 32   | SHA-256 of the canonical manifest text |
/// | 40     | 8    | parameter count (u64)                  |
/// | 48     | 4·n  | parameters as IEEE-754 `f32`           |
pub mod codec {
    use super::*;

    pub const MAGIC: [u8; 4] = *b"PFES";
    pub const VERSION: u16 = 1;
    pub const HEADER_LEN: usize = 48;
    pub const BYTES_PER_PARAM: usize = 4;

    pub fn encoded_len(param_count: usize) -> usize {
        HEADER_LEN + BYTES_PER_PARAM * param_count
    }

    pub fn serialize_params(params: &ParamSet) -> Vec<u8> {
        let mut out = Vec::with_capacity(encoded_len(params.len()));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&params.manifest.digest());
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for &v in &params.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn deserialize_params(bytes: &[u8], expected: &Arc<Manifest>) -> Result<ParamSet> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Codec(format!("payload of {} bytes has no header", bytes.len())));
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Codec("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Codec(format!("unsupported format version {version}")));
        }
        if bytes[8..40] != expected.digest() {
            return Err(Error::Codec("manifest digest does not match the expected model".into()));
        }
        let count = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes"));
        if count != expected.param_count() as u64 {
            return Err(Error::Codec(format!(
                "payload holds {count} parameters, manifest needs {}",
                expected.param_count()
            )));
        }
        if bytes.len() != encoded_len(expected.param_count()) {
            return Err(Error::Codec(format!(
                "payload is {} bytes, expected {}",
                bytes.len(),
                encoded_len(expected.param_count())
            )));
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(BYTES_PER_PARAM)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        ParamSet::new(expected.clone(), values)
    }
}
