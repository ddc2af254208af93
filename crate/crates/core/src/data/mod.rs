//! Datasets, synthetic generators, binary formats, CSV export and PPM dumps.

mod formats;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor4;

pub use formats::{
    crc32, decode_attack, decode_dataset, decode_model, encode_attack, encode_dataset, encode_model, load_attack,
    load_dataset, load_model, save_attack, save_dataset, save_model, AttackRecord, ATTACK_MAGIC, DATASET_MAGIC,
    FORMAT_VERSION, MODEL_MAGIC,
};

/// Labelled images with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>) -> Result<Self> {
        ensure!(
            labels.len() == images.batch(),
            "{} labels for {} images",
            labels.len(),
            images.batch()
        );
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Smallest class count consistent with the labels.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&l| l + 1)
    }

    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            images: self.images.slice_batch(start, end),
            labels: self.labels[start..end].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// One Gaussian bump per image; position and colour depend on the class.
    Blobs,
    /// Sinusoidal stripes; frequency and orientation depend on the class.
    Stripes,
}

impl Generator {
    pub fn as_str(self) -> &'static str {
        match self {
            Generator::Blobs => "blobs",
            Generator::Stripes => "stripes",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Generator::Blobs),
            "stripes" => Ok(Generator::Stripes),
            other => Err(Error::Contract(format!("unknown generator {other:?}"))),
        }
    }
}

/// Deterministic synthetic dataset. Labels cycle through the classes and
/// pixels are rounded to `f32` so the set survives a save/load round trip
/// bit for bit.
pub fn synth_dataset(
    generator: Generator,
    d: usize,
    c: usize,
    n: usize,
    m: usize,
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    ensure!(d >= 1 && c >= 1 && n >= 1 && m >= 1, "dataset dims must be >= 1");
    ensure!(classes >= 2, "need at least 2 classes, got {classes}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Tensor4::zeros([d, c, n, m]);
    let mut labels = Vec::with_capacity(d);
    for b in 0..d {
        let k = b % classes;
        labels.push(k);
        let theta = std::f64::consts::TAU * k as f64 / classes as f64;
        let img = images.image_mut(b);
        match generator {
            Generator::Blobs => {
                let radius = 0.3 * n.min(m) as f64;
                let ci = (n as f64 - 1.0) / 2.0 + radius * theta.sin() + rng.random_range(-0.75..0.75);
                let cj = (m as f64 - 1.0) / 2.0 + radius * theta.cos() + rng.random_range(-0.75..0.75);
                let width = n.min(m) as f64 / 7.0;
                let gain: f64 = rng.random_range(0.85..1.15);
                for ch in 0..c {
                    let phase = std::f64::consts::TAU * ch as f64 / c as f64;
                    let amp = 0.65 * gain * (0.55 + 0.45 * (theta + phase).cos());
                    for i in 0..n {
                        for j in 0..m {
                            let r2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                            let noise: f64 = rng.random_range(0.0..0.02);
                            img[(ch * n + i) * m + j] = 0.15 + amp * (-r2 / (2.0 * width * width)).exp() + noise;
                        }
                    }
                }
            }
            Generator::Stripes => {
                let freq = 1.0 + (k / 2) as f64;
                let vertical = k % 2 == 1;
                let shift: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                for ch in 0..c {
                    let amp = 0.35 * (0.7 + 0.3 * (theta + ch as f64).cos());
                    for i in 0..n {
                        for j in 0..m {
                            let t = if vertical {
                                j as f64 / m as f64
                            } else {
                                i as f64 / n as f64
                            };
                            let noise: f64 = rng.random_range(-0.02..0.02);
                            img[(ch * n + i) * m + j] =
                                0.5 + amp * (std::f64::consts::TAU * freq * t + shift).sin() + noise;
                        }
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0) as f32 as f64;
        }
    }
    Dataset::new(images, labels)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serializes rows to CSV with a header taken from the field names.
pub fn csv_bytes<S: Serialize>(rows: &[S]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("csv serialization failed: {other:?}")),
    }
}

/// Binary PPM (P6) of one image. Single-channel images are written as gray.
pub fn ppm_bytes(x: &Tensor4, index: usize) -> Result<Vec<u8>> {
    let [b, c, n, m] = x.dims();
    ensure!(index < b, "image index {index} out of range for batch of {b}");
    ensure!(c == 1 || c == 3, "ppm needs 1 or 3 channels, got {c}");
    let img = x.image(index);
    let mut out = format!("P6\n{m} {n}\n255\n").into_bytes();
    out.reserve(3 * n * m);
    for i in 0..n {
        for j in 0..m {
            for ch in 0..3 {
                let src = if c == 1 { 0 } else { ch };
                out.push(to_byte(img[(src * n + i) * m + j]));
            }
        }
    }
    Ok(out)
}

pub fn render_ppm(x: &Tensor4, index: usize, path: &Path) -> Result<()> {
    let bytes = ppm_bytes(x, index)?;
    write_atomic(path, &bytes)
}

/// `round(v·255 + 0.5)` on `[0, 1]`, i.e. half-up rounding.
fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_in_range() {
        for g in [Generator::Blobs, Generator::Stripes] {
            let a = synth_dataset(g, 12, 3, 8, 8, 4, 5).unwrap();
            let b = synth_dataset(g, 12, 3, 8, 8, 4, 5).unwrap();
            assert_eq!(a, b);
            assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(a.images.data().iter().all(|&v| v == v as f32 as f64));
            assert_eq!(a.num_classes(), 4);
            let c = synth_dataset(g, 12, 3, 8, 8, 4, 6).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn ppm_pixels() {
        let zeros = Tensor4::zeros([1, 3, 2, 2]);
        let p = ppm_bytes(&zeros, 0).unwrap();
        assert!(p.starts_with(b"P6\n2 2\n255\n"));
        assert!(p[11..].iter().all(|&v| v == 0));
        let ones = Tensor4::from_fn([1, 1, 2, 3], |_| 1.0);
        let p = ppm_bytes(&ones, 0).unwrap();
        assert_eq!(p.len(), 11 + 18);
        assert!(p[11..].iter().all(|&v| v == 255));
        let half = Tensor4::from_fn([1, 1, 1, 1], |_| 0.5);
        assert_eq!(ppm_bytes(&half, 0).unwrap()[11..], [128, 128, 128]);
        assert!(ppm_bytes(&half, 1).is_err());
    }

    #[test]
    fn csv_header_follows_fields() {
        #[derive(Serialize)]
        struct Row {
            index: usize,
            mean_rel_change: f64,
        }
        let bytes = csv_bytes(&[Row {
            index: 1,
            mean_rel_change: 0.25,
        }])
        .unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "index,mean_rel_change\n1,0.25\n");
    }
}
