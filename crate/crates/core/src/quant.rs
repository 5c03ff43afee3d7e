//! Half-precision weight storage and the versioned model file.
//!
//! Model file layout, all integers little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `LWMD` |
//! | 1 | format version (`0x01`) |
//! | 1 | kind: 0 vae-full, 1 vae-encoder, 2 gbdt |
//! | 1 | precision: 0 f32, 1 f16, 2 f64 |
//! | 8 | payload length |
//! | n | payload |
//! | 4 | CRC-32 of every preceding byte |
//!
//! A VAE payload holds the seven `VaeConfig` fields as `u32`, the pipeline
//! config hash (`u16` length + UTF-8), the source checksum (`u32`), the
//! tensor count (`u32`) and then per tensor: name (`u16` length + UTF-8),
//! trainable flag (`u8`), rank (`u8`), dims (`u32` each) and the values at
//! the stored precision.

use std::fmt;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::bytes::{crc32, put_short_str, Reader};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::vae::{EncoderOutput, VaeConfig, VaeModel};

pub const MODEL_MAGIC: &[u8; 4] = b"LWMD";
pub const MODEL_VERSION: u8 = 1;
pub const SUPPORTED_MODEL_VERSIONS: &[u8] = &[MODEL_VERSION];

/// Largest finite half-precision value.
pub const F16_MAX: f32 = 65504.0;

const HEADER_LEN: usize = 4 + 1 + 1 + 1 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F16,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F16 => 1,
            Precision::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Precision::F32),
            1 => Ok(Precision::F16),
            2 => Ok(Precision::F64),
            t => Err(Error::Protocol(format!("unknown precision tag {t}"))),
        }
    }

    pub fn bytes_per_value(self) -> usize {
        match self {
            Precision::F16 => 2,
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F16 => "f16",
            Precision::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f16" => Ok(Precision::F16),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Invalid(format!("unknown precision {other:?} (expected f16, f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    VaeFull,
    VaeEncoder,
    Gbdt,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::VaeFull => 0,
            ModelKind::VaeEncoder => 1,
            ModelKind::Gbdt => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::VaeFull),
            1 => Ok(ModelKind::VaeEncoder),
            2 => Ok(ModelKind::Gbdt),
            t => Err(Error::Protocol(format!("unknown model kind tag {t}"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::VaeFull => "vae-full",
            ModelKind::VaeEncoder => "vae-encoder",
            ModelKind::Gbdt => "gbdt",
        })
    }
}

/// A checksummed, versioned model container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub precision: Precision,
    pub payload: Vec<u8>,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + 4);
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.push(self.kind.tag());
        out.push(self.precision.tag());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses and verifies a model file. Magic and version are checked
    /// before the checksum so an unknown version is reported as such.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::Protocol("not a model file (bad magic)".into()));
        }
        if !SUPPORTED_MODEL_VERSIONS.contains(&bytes[4]) {
            return Err(Error::Version {
                found: bytes[4],
                supported: SUPPORTED_MODEL_VERSIONS.to_vec(),
            });
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(Error::Integrity(format!("model file truncated at {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
        let actual = crc32(body);
        if stored != actual {
            return Err(Error::Integrity(format!(
                "model file checksum {stored:08x} does not match contents {actual:08x}"
            )));
        }
        let mut r = Reader::new(&body[5..]);
        let kind = ModelKind::from_tag(r.u8()?)?;
        let precision = Precision::from_tag(r.u8()?)?;
        let len = r.u64()? as usize;
        if len != r.remaining() {
            return Err(Error::Integrity(format!(
                "payload length {len} disagrees with {} bytes present",
                r.remaining()
            )));
        }
        Ok(ModelFile {
            kind,
            precision,
            payload: r.take(len)?.to_vec(),
        })
    }

    /// Fails with a kind error unless the file holds one of `accepted`.
    pub fn expect_kind(&self, accepted: &[ModelKind]) -> Result<()> {
        if accepted.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::Kind {
                expected: accepted.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" or "),
                found: self.kind.to_string(),
            })
        }
    }
}

pub fn save_model(file: &ModelFile, path: &Path) -> Result<()> {
    std::fs::write(path, file.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a model file and checks that it holds one of `accepted`.
pub fn load_model(path: &Path, accepted: &[ModelKind]) -> Result<ModelFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let file = ModelFile::from_bytes(&bytes)?;
    file.expect_kind(accepted)?;
    Ok(file)
}

/// `(1 - after / before) * 100`.
pub fn size_report(before_bytes: u64, after_bytes: u64) -> f64 {
    if before_bytes == 0 {
        return 0.0;
    }
    (1.0 - after_bytes as f64 / before_bytes as f64) * 100.0
}

/// Rounds to the nearest half-precision value (ties to even). Magnitudes
/// beyond [`F16_MAX`] saturate; the flag reports that it happened.
pub fn to_f16_saturating(v: f32) -> Result<(f16, bool)> {
    if v.is_nan() {
        return Err(Error::Invalid("NaN weight".into()));
    }
    if v.abs() > F16_MAX {
        return Ok((f16::from_f32(F16_MAX.copysign(v)), true));
    }
    Ok((f16::from_f32(v), false))
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PackedTensor {
    name: String,
    trainable: bool,
    shape: Vec<usize>,
    bits: Vec<u8>,
}

/// A VAE whose weights are stored at `precision` and expanded to `f32` for
/// computation.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    precision: Precision,
    encoder_only: bool,
    config: VaeConfig,
    /// Hash of the pipeline configuration that produced the model.
    pub config_hash: String,
    /// CRC-32 over the little-endian `f32` weights of the source model.
    source_checksum: u32,
    saturated: usize,
    tensors: Vec<PackedTensor>,
    expanded: VaeModel,
}

fn weights_checksum(params: &ParamStore<f32>) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (_, p) in params.iter() {
        for v in p.value.data() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finalize()
}

/// Packs every parameter and buffer of `model` at `precision`. Half
/// precision rounds to nearest even and saturates out-of-range magnitudes;
/// [`QuantizedModel::saturated`] counts them. A NaN anywhere is an error.
pub fn quantize(model: &VaeModel, precision: Precision) -> Result<QuantizedModel> {
    if precision == Precision::F64 {
        return Err(Error::Invalid("vae weights are stored as f32 or f16".into()));
    }
    let mut saturated = 0;
    let mut tensors = Vec::with_capacity(model.params().len());
    let mut expanded = ParamStore::new();
    for (_, p) in model.params().iter() {
        let data = p.value.data();
        let mut bits = Vec::with_capacity(data.len() * precision.bytes_per_value());
        let mut values = Vec::with_capacity(data.len());
        for v in data {
            match precision {
                Precision::F16 => {
                    let (h, sat) = to_f16_saturating(*v).map_err(|_| Error::Invalid(format!("corrupt model: NaN in {}", p.name)))?;
                    if sat {
                        saturated += 1;
                    }
                    bits.extend_from_slice(&h.to_le_bytes());
                    values.push(h.to_f32());
                }
                _ => {
                    if v.is_nan() {
                        return Err(Error::Invalid(format!("corrupt model: NaN in {}", p.name)));
                    }
                    bits.extend_from_slice(&v.to_le_bytes());
                    values.push(*v);
                }
            }
        }
        expanded.add(p.name.clone(), Tensor::new(p.value.shape(), values)?, p.trainable);
        tensors.push(PackedTensor {
            name: p.name.clone(),
            trainable: p.trainable,
            shape: p.value.shape().to_vec(),
            bits,
        });
    }
    if saturated > 0 {
        log::warn!("{saturated} weights exceeded the half-precision range and were saturated");
    }
    Ok(QuantizedModel {
        precision,
        encoder_only: model.is_encoder_only(),
        config: model.config().clone(),
        config_hash: String::new(),
        source_checksum: weights_checksum(model.params()),
        saturated,
        tensors,
        expanded: VaeModel::from_parts(model.config().clone(), expanded, model.is_encoder_only())?,
    })
}

impl QuantizedModel {
    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn kind(&self) -> ModelKind {
        if self.encoder_only {
            ModelKind::VaeEncoder
        } else {
            ModelKind::VaeFull
        }
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn source_checksum(&self) -> u32 {
        self.source_checksum
    }

    /// Weights that were clamped to the half-precision range.
    pub fn saturated(&self) -> usize {
        self.saturated
    }

    /// The model with weights expanded to `f32`.
    pub fn model(&self) -> &VaeModel {
        &self.expanded
    }

    pub fn into_model(self) -> VaeModel {
        self.expanded
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = hash.into();
        self
    }

    pub fn to_file(&self) -> Result<ModelFile> {
        let mut p = Vec::new();
        let c = &self.config;
        for v in [
            c.latent_dim,
            c.in_channels,
            c.freq_bins,
            c.time_frames,
            c.base_channels,
            c.blocks_per_stage,
            c.stages,
        ] {
            p.extend_from_slice(&(v as u32).to_le_bytes());
        }
        put_short_str(&mut p, &self.config_hash)?;
        p.extend_from_slice(&self.source_checksum.to_le_bytes());
        p.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_short_str(&mut p, &t.name)?;
            p.push(t.trainable as u8);
            p.push(t.shape.len() as u8);
            for d in &t.shape {
                p.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            p.extend_from_slice(&t.bits);
        }
        Ok(ModelFile {
            kind: self.kind(),
            precision: self.precision,
            payload: p,
        })
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        file.expect_kind(&[ModelKind::VaeFull, ModelKind::VaeEncoder])?;
        let precision = file.precision;
        if precision == Precision::F64 {
            return Err(Error::Invalid("vae model files hold f32 or f16 weights".into()));
        }
        parse_vae_payload(&file.payload, precision, file.kind == ModelKind::VaeEncoder).map_err(|e| match e {
            Error::Incomplete { .. } => Error::Integrity("vae payload ends early".into()),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(&self.to_file()?, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&load_model(path, &[ModelKind::VaeFull, ModelKind::VaeEncoder])?)
    }
}

fn parse_vae_payload(payload: &[u8], precision: Precision, encoder_only: bool) -> Result<QuantizedModel> {
    let mut r = Reader::new(payload);
    let mut f = [0usize; 7];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = VaeConfig {
        latent_dim: f[0],
        in_channels: f[1],
        freq_bins: f[2],
        time_frames: f[3],
        base_channels: f[4],
        blocks_per_stage: f[5],
        stages: f[6],
    };
    let config_hash = r.short_str()?;
    let source_checksum = r.u32()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.short_str()?;
        let trainable = r.u8()? != 0;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let n_bytes = len
            .and_then(|l| l.checked_mul(precision.bytes_per_value()))
            .ok_or_else(|| Error::Invalid(format!("tensor {name} is too large")))?;
        let bits = r.take(n_bytes)?.to_vec();
        let values: Vec<f32> = match precision {
            Precision::F16 => bits.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
            _ => bits
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        };
        store.add(name.clone(), Tensor::new(&shape, values)?, trainable);
        tensors.push(PackedTensor {
            name,
            trainable,
            shape,
            bits,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Integrity(format!("{} unexpected bytes after the last tensor", r.remaining())));
    }
    let expanded = VaeModel::from_parts(config.clone(), store, encoder_only)?;
    Ok(QuantizedModel {
        precision,
        encoder_only,
        config,
        config_hash,
        source_checksum,
        saturated: 0,
        tensors,
        expanded,
    })
}

/// Encodes with weights expanded from storage precision; computation runs
/// in `f32`.
pub fn quantized_encode(model: &QuantizedModel, x: &Spectrogram) -> Result<EncoderOutput> {
    model.model().encode(x)
}

/// The encoder half of `model`, ready to be quantized for the edge device.
pub fn extract_encoder(model: &VaeModel) -> VaeModel {
    model.extract_encoder()
}
