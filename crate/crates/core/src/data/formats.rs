//! Little-endian binary formats with a CRC32 trailer over all preceding bytes.
//!
//! Dataset (`LRTD`):
//!
//! | bytes | field |
//! |---|---|
//! | 0..4 | magic `LRTD` |
//! | 4..8 | version u32 |
//! | 8..24 | D, C, N, M as u32 |
//! | 24.. | D·C·N·M pixels f32, then D labels u32 |
//! | last 4 | CRC32 |
//!
//! Attack (`LRAT`): magic, version u32, kind u8 (0 full, 1 factored),
//! D, C, N, M u32, rank u32 (0 when full), tau f64, norm u8
//! (0 frobenius, 1 linf, 2 nuclear), then the payload from byte 38: full is
//! D·C·N·M f32; factored is the D·C·N·r left factor then the D·C·r·M right
//! factor, both f32. CRC32 trailer.
//!
//! Model (`LRMD`): magic, version u32, input C, N, M u32, classes u32,
//! init seed u64, layer count u32, then one record per layer: a tag u8
//! followed by its u32 fields (0 dense: in, out; 1 conv: in, out, kernel,
//! stride, padding; 2 relu; 3 flatten; 4 maxpool: size). Then, for each layer
//! in order, its weights and biases as f32. CRC32 trailer.
//!
//! Parsers report, in this order: bad magic, truncation, CRC mismatch, then
//! content errors (out-of-range pixels, invalid fields).

use std::path::Path;

use crate::attacks::{AttackResult, FactoredPerturbation, Perturbation};
use crate::error::{Error, Result};
use crate::model::{Layer, LayerParams, ModelParams, ModelSpec};
use crate::tensor::{NormKind, Tensor4};

use super::{read_file, write_atomic, Dataset};

pub const DATASET_MAGIC: [u8; 4] = *b"LRTD";
pub const ATTACK_MAGIC: [u8; 4] = *b"LRAT";
pub const MODEL_MAGIC: [u8; 4] = *b"LRMD";
pub const FORMAT_VERSION: u32 = 1;

const DATASET_HEADER: usize = 24;
const ATTACK_HEADER: usize = 38;

/// CRC32, reflected polynomial 0xEDB88320.
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Attack payload as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub tau: f64,
    pub norm_kind: NormKind,
    pub perturbation: Perturbation,
}

impl AttackRecord {
    pub fn dims(&self) -> [usize; 4] {
        match &self.perturbation {
            Perturbation::Full(t) => t.dims(),
            Perturbation::Factored(f) => f.dims(),
        }
    }

    pub fn rank(&self) -> usize {
        match &self.perturbation {
            Perturbation::Full(_) => 0,
            Perturbation::Factored(f) => f.rank,
        }
    }

    /// Number of stored payload floats.
    pub fn payload_elements(&self) -> usize {
        match &self.perturbation {
            Perturbation::Full(t) => t.len(),
            Perturbation::Factored(f) => f.u.len() + f.v.len(),
        }
    }
}

impl From<&AttackResult> for AttackRecord {
    fn from(r: &AttackResult) -> Self {
        AttackRecord {
            tau: r.tau,
            norm_kind: r.norm_kind,
            perturbation: r.perturbation.clone(),
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4], capacity: usize) -> Self {
        let mut buf = Vec::with_capacity(capacity);
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("field exceeds u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vals: &[f64]) {
        for &v in vals {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

/// Cursor over a file whose magic, length and CRC have been checked.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                offset: self.bytes.len(),
                needed: self.pos + n,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn dim(&mut self, name: &str) -> Result<usize> {
        let offset = self.pos;
        let v = self.u32()? as usize;
        if v == 0 {
            return Err(Error::InvalidField {
                offset,
                reason: format!("{name} must be >= 1"),
            });
        }
        Ok(v)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

fn check_magic(bytes: &[u8], magic: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    let k = bytes.len().min(4);
    found[..k].copy_from_slice(&bytes[..k]);
    if found[..k] != magic[..k] {
        return Err(Error::BadMagic {
            offset: 0,
            expected: magic,
            found,
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            offset: bytes.len(),
            needed: 8,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { offset: 4, version });
    }
    Ok(())
}

/// Checks total length and CRC given the expected length.
fn check_length_and_crc(bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(Error::Truncated {
            offset: bytes.len(),
            needed: expected,
        });
    }
    let body = expected - 4;
    let stored = u32::from_le_bytes(bytes[body..expected].try_into().unwrap());
    let computed = crc32(&bytes[..body]);
    if stored != computed {
        return Err(Error::CrcMismatch {
            offset: body,
            stored,
            computed,
        });
    }
    if bytes.len() > expected {
        return Err(Error::InvalidField {
            offset: expected,
            reason: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    Ok(())
}

fn product(offset: usize, factors: &[usize]) -> Result<usize> {
    factors
        .iter()
        .try_fold(1usize, |acc, &f| acc.checked_mul(f))
        .filter(|&p| p <= u32::MAX as usize * 16)
        .ok_or_else(|| Error::InvalidField {
            offset,
            reason: "dimensions overflow".into(),
        })
}

fn sized(offset: usize, parts: &[usize]) -> Result<usize> {
    parts
        .iter()
        .try_fold(0usize, |acc, &p| acc.checked_add(p))
        .ok_or_else(|| Error::InvalidField {
            offset,
            reason: "file size overflows".into(),
        })
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let [d, c, n, m] = ds.images.dims();
    let mut w = Writer::new(DATASET_MAGIC, DATASET_HEADER + 4 * (d * c * n * m + d) + 4);
    for v in [d, c, n, m] {
        w.u32(v);
    }
    w.f32s(ds.images.data());
    for &l in &ds.labels {
        w.u32(l);
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    check_magic(bytes, DATASET_MAGIC)?;
    let mut r = Reader { bytes, pos: 8 };
    let dims = [r.dim("D")?, r.dim("C")?, r.dim("N")?, r.dim("M")?];
    let count = product(8, &dims)?;
    let expected = sized(8, &[DATASET_HEADER, count * 4, dims[0] * 4, 4])?;
    check_length_and_crc(bytes, expected)?;
    let pixels = r.f32s(count)?;
    if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::PixelOutOfRange {
            offset: DATASET_HEADER + 4 * i,
            value: pixels[i] as f32,
        });
    }
    let labels = (0..dims[0])
        .map(|_| r.u32().map(|l| l as usize))
        .collect::<Result<_>>()?;
    Dataset::new(Tensor4::from_vec(dims, pixels)?, labels)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&read_file(path)?)
}

pub fn encode_attack(rec: &AttackRecord) -> Vec<u8> {
    let [d, c, n, m] = rec.dims();
    let mut w = Writer::new(ATTACK_MAGIC, ATTACK_HEADER + 4 * rec.payload_elements() + 4);
    w.u8(match rec.perturbation {
        Perturbation::Full(_) => 0,
        Perturbation::Factored(_) => 1,
    });
    for v in [d, c, n, m, rec.rank()] {
        w.u32(v);
    }
    w.f64(rec.tau);
    w.u8(rec.norm_kind.code());
    match &rec.perturbation {
        Perturbation::Full(t) => w.f32s(t.data()),
        Perturbation::Factored(f) => {
            w.f32s(f.u.data());
            w.f32s(f.v.data());
        }
    }
    w.finish()
}

pub fn decode_attack(bytes: &[u8]) -> Result<AttackRecord> {
    check_magic(bytes, ATTACK_MAGIC)?;
    let mut r = Reader { bytes, pos: 8 };
    let kind = r.u8()?;
    let dims = [r.dim("D")?, r.dim("C")?, r.dim("N")?, r.dim("M")?];
    let rank = r.u32()? as usize;
    let tau = r.f64()?;
    let norm_code = r.u8()?;
    let [d, c, n, m] = dims;
    let payload = match kind {
        0 => product(9, &dims)?,
        1 => {
            let left = product(9, &[d, c, n, rank])?;
            let right = product(9, &[d, c, rank, m])?;
            sized(9, &[left, right])?
        }
        other => {
            return Err(Error::InvalidField {
                offset: 8,
                reason: format!("unknown attack kind {other}"),
            })
        }
    };
    let expected = sized(8, &[ATTACK_HEADER, payload.saturating_mul(4), 4])?;
    check_length_and_crc(bytes, expected)?;
    match kind {
        0 if rank != 0 => {
            return Err(Error::InvalidField {
                offset: 25,
                reason: format!("full attack must store rank 0, found {rank}"),
            })
        }
        1 if rank == 0 || rank > n.min(m) => {
            return Err(Error::InvalidField {
                offset: 25,
                reason: format!("rank {rank} outside 1..={}", n.min(m)),
            })
        }
        _ => {}
    }
    let norm_kind = NormKind::from_code(norm_code).ok_or_else(|| Error::InvalidField {
        offset: 37,
        reason: format!("unknown norm code {norm_code}"),
    })?;
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidField {
            offset: 29,
            reason: format!("tau must be finite and >= 0, found {tau}"),
        });
    }
    let perturbation = if kind == 0 {
        Perturbation::Full(Tensor4::from_vec(dims, r.f32s(payload)?)?)
    } else {
        let u = Tensor4::from_vec([d, c, n, rank], r.f32s(d * c * n * rank)?)?;
        let v = Tensor4::from_vec([d, c, rank, m], r.f32s(d * c * rank * m)?)?;
        Perturbation::Factored(FactoredPerturbation {
            u,
            v,
            rank,
            tau,
            norm_kind,
        })
    };
    Ok(AttackRecord {
        tau,
        norm_kind,
        perturbation,
    })
}

pub fn save_attack(rec: &AttackRecord, path: &Path) -> Result<()> {
    write_atomic(path, &encode_attack(rec))
}

pub fn load_attack(path: &Path) -> Result<AttackRecord> {
    decode_attack(&read_file(path)?)
}

pub fn encode_model(spec: &ModelSpec, params: &ModelParams) -> Result<Vec<u8>> {
    params.check(spec)?;
    let mut w = Writer::new(MODEL_MAGIC, 64 + 4 * params.num_params());
    for v in spec.input_dims {
        w.u32(v);
    }
    w.u32(spec.num_classes);
    w.u64(params.seed);
    w.u32(spec.layers.len());
    for layer in &spec.layers {
        match *layer {
            Layer::Dense { inputs, outputs } => {
                w.u8(0);
                w.u32(inputs);
                w.u32(outputs);
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                w.u8(1);
                for v in [in_channels, out_channels, kernel, stride, padding] {
                    w.u32(v);
                }
            }
            Layer::Relu => w.u8(2),
            Layer::Flatten => w.u8(3),
            Layer::MaxPool2d { size } => {
                w.u8(4);
                w.u32(size);
            }
        }
    }
    for p in &params.layers {
        w.f32s(&p.weight);
        w.f32s(&p.bias);
    }
    Ok(w.finish())
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelSpec, ModelParams)> {
    check_magic(bytes, MODEL_MAGIC)?;
    // The header is variable length, so an early structural read failure
    // is reported as truncation before the CRC is checked.
    let mut r = Reader { bytes, pos: 8 };
    let input_dims = [r.dim("C")?, r.dim("N")?, r.dim("M")?];
    let num_classes = r.u32()? as usize;
    let seed = r.u64()?;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let offset = r.pos;
        let layer = match r.u8()? {
            0 => Layer::Dense {
                inputs: r.u32()? as usize,
                outputs: r.u32()? as usize,
            },
            1 => Layer::Conv2d {
                in_channels: r.u32()? as usize,
                out_channels: r.u32()? as usize,
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
                padding: r.u32()? as usize,
            },
            2 => Layer::Relu,
            3 => Layer::Flatten,
            4 => Layer::MaxPool2d {
                size: r.u32()? as usize,
            },
            tag => {
                return Err(Error::InvalidField {
                    offset,
                    reason: format!("unknown layer tag {tag}"),
                })
            }
        };
        layers.push(layer);
    }
    let header_end = r.pos;
    let counts = layers
        .iter()
        .map(|l| {
            let (nw, nb) = l.param_counts();
            nw.checked_add(nb)
        })
        .try_fold(0usize, |acc, c| c.and_then(|c| acc.checked_add(c)));
    let n_params = counts.ok_or_else(|| Error::InvalidField {
        offset: header_end,
        reason: "parameter count overflows".into(),
    })?;
    let expected = sized(header_end, &[header_end, n_params.saturating_mul(4), 4])?;
    check_length_and_crc(bytes, expected)?;
    let spec = ModelSpec::new(layers, input_dims, num_classes).map_err(|e| Error::InvalidField {
        offset: 8,
        reason: e.to_string(),
    })?;
    let mut params = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let (nw, nb) = l.param_counts();
        params.push(LayerParams {
            weight: r.f32s(nw)?,
            bias: r.f32s(nb)?,
        });
    }
    let params = ModelParams { layers: params, seed };
    params.check(&spec).map_err(|e| Error::InvalidField {
        offset: header_end,
        reason: e.to_string(),
    })?;
    Ok((spec, params))
}

pub fn save_model(spec: &ModelSpec, params: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_model(spec, params)?)
}

pub fn load_model(path: &Path) -> Result<(ModelSpec, ModelParams)> {
    decode_model(&read_file(path)?)
}
