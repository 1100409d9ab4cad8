//! Dataset ingestion (MNIST IDX, synthetic generators) and checkpoint
//! persistence.
//!
//! The IDX decoders take raw byte slices so untrusted files can be parsed
//! without touching the filesystem (the fuzz targets drive them directly).

use byteorder::{BigEndian, ReadBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Cursor;
use std::path::Path;

use crate::model::{DenseLayer, DenseNet};
use crate::{Error, Result};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Immutable classification dataset with features in [0,1]^d.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "need matching nonempty features/labels, got {}/{}",
                features.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidInput("need at least 2 classes".into()));
        }
        let d = features[0].len();
        for f in &features {
            if f.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: f.len() });
            }
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput("feature outside [0,1]".into()));
            }
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::InvalidInput("label out of range".into()));
        }
        Ok(Self { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn example(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i], self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features.iter().map(|f| f.as_slice()).zip(self.labels.iter().copied())
    }

    /// New dataset holding the examples at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let features = indices.iter().map(|&i| self.features[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.num_classes)
    }
}

/// Decoded IDX image file: n images of rows x cols raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Parse an IDX image file (magic 0x00000803, big-endian dims, raw bytes).
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = Cursor::new(bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Corrupt("truncated IDX header".into()))?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let count = cur.read_u32::<BigEndian>().map_err(|_| Error::Corrupt("truncated IDX header".into()))? as usize;
    let rows = cur.read_u32::<BigEndian>().map_err(|_| Error::Corrupt("truncated IDX header".into()))? as usize;
    let cols = cur.read_u32::<BigEndian>().map_err(|_| Error::Corrupt("truncated IDX header".into()))? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(Error::Corrupt(format!(
            "image payload is {} bytes, header promises {expected}",
            body.len()
        )));
    }
    Ok(IdxImages { count, rows, cols, pixels: body.to_vec() })
}

/// Parse an IDX label file (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Corrupt("truncated IDX header".into()))?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let count = cur.read_u32::<BigEndian>().map_err(|_| Error::Corrupt("truncated IDX header".into()))? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Corrupt(format!(
            "label payload is {} bytes, header promises {count}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Load an MNIST-style IDX image/label pair, scaling pixels into [0,1]
/// by dividing by 255. `limit` truncates to the first n examples.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if images.count != labels.len() {
        return Err(Error::Corrupt(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 9) {
        return Err(Error::Corrupt("label byte exceeds 9".into()));
    }
    let n = limit.map_or(images.count, |l| l.min(images.count));
    if n == 0 {
        return Err(Error::InvalidInput("limit produced an empty dataset".into()));
    }
    let d = images.rows * images.cols;
    let features = (0..n)
        .map(|i| {
            images.pixels[i * d..(i + 1) * d]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        })
        .collect();
    let labels = labels[..n].iter().map(|&l| l as usize).collect();
    Dataset::new(features, labels, 10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticKind {
    #[serde(rename = "GAUSS_BLOBS")]
    GaussBlobs,
    #[serde(rename = "TWO_MOONS")]
    TwoMoons,
}

/// Seeded 2-class synthetic datasets in [0,1]^2 with balanced classes.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("need n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (x, y) = match kind {
            SyntheticKind::GaussBlobs => {
                let center = if class == 0 { (0.32, 0.32) } else { (0.68, 0.68) };
                (
                    center.0 + gauss(&mut rng) * 0.08,
                    center.1 + gauss(&mut rng) * 0.08,
                )
            }
            SyntheticKind::TwoMoons => {
                let t = rng.random_range(0.0..std::f64::consts::PI);
                let noise = (gauss(&mut rng) * 0.04, gauss(&mut rng) * 0.04);
                // raw moons live in x [-1, 2], y [-0.75, 1]
                let (rx, ry) = if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.25 - t.sin())
                };
                (
                    (rx + noise.0 + 1.1) / 3.2,
                    (ry + noise.1 + 0.95) / 2.2,
                )
            }
        };
        features.push(vec![x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]);
        labels.push(class);
    }
    Dataset::new(features, labels, 2)
}

/// Box-Muller standard normal.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Bit-exact training checkpoint. Parameters are stored as hexadecimal
/// f64 bit patterns so save/load round-trips exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub layers: Vec<CheckpointLayer>,
    /// Echo of the training configuration that produced this checkpoint.
    pub config: serde_json::Value,
    pub epoch: usize,
    pub seed: u64,
    pub metric_snapshot: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub weights: Vec<Vec<String>>,
    pub biases: Vec<String>,
}

fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn hex_to_f64(s: &str) -> Result<f64> {
    let bits = u64::from_str_radix(s, 16)
        .map_err(|_| Error::Corrupt(format!("bad parameter encoding {s:?}")))?;
    Ok(f64::from_bits(bits))
}

impl Checkpoint {
    pub fn from_net(
        net: &DenseNet,
        config: serde_json::Value,
        epoch: usize,
        seed: u64,
        metric_snapshot: Option<serde_json::Value>,
    ) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| CheckpointLayer {
                weights: l
                    .weights
                    .iter()
                    .map(|r| r.iter().map(|&v| f64_to_hex(v)).collect())
                    .collect(),
                biases: l.biases.iter().map(|&v| f64_to_hex(v)).collect(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            layer_dims: net.layer_dims().to_vec(),
            layers,
            config,
            epoch,
            seed,
            metric_snapshot,
        }
    }

    pub fn to_net(&self) -> Result<DenseNet> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(DenseLayer {
                    weights: l
                        .weights
                        .iter()
                        .map(|r| r.iter().map(|s| hex_to_f64(s)).collect())
                        .collect::<Result<_>>()?,
                    biases: l.biases.iter().map(|s| hex_to_f64(s)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNet::from_parts(self.layer_dims.clone(), layers)
    }
}

/// Decode a checkpoint from JSON bytes, distinguishing corrupt files
/// from version mismatches.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::Corrupt(format!("checkpoint is not valid JSON: {e}")))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corrupt("checkpoint lacks a version field".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            got: version as u32,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Corrupt(format!("malformed checkpoint: {e}")))
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string_pretty(ckpt)
        .map_err(|e| Error::InvalidInput(format!("unserializable checkpoint: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_fixture(n: usize) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        images.extend_from_slice(&(n as u32).to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..n * 784 {
            images.push((i % 256) as u8);
        }
        let mut labels = Vec::new();
        labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            labels.push((i % 10) as u8);
        }
        (images, labels)
    }

    #[test]
    fn idx_fixture_roundtrip() {
        let (images, labels) = idx_fixture(4);
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images");
        let lp = dir.path().join("labels");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        let ds = load_mnist_idx(&ip, &lp, None).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.feature_dim(), 784);
        assert_eq!(ds.num_classes(), 10);
        // byte 255 -> 1.0, byte 0 -> 0.0
        let (f, _) = ds.example(0);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[255], 1.0);
        // bit-exact against a direct byte-level re-decode
        let raw = parse_idx_images(&images).unwrap();
        for i in 0..4 {
            let (f, y) = ds.example(i);
            assert_eq!(y, i % 10);
            for j in 0..784 {
                assert_eq!(f[j], raw.pixels[i * 784 + j] as f64 / 255.0);
            }
        }
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let (mut images, labels) = idx_fixture(2);
        images[0..4].copy_from_slice(&9999u32.to_be_bytes());
        assert!(matches!(parse_idx_images(&images), Err(Error::Format(_))));
        let mut bad_labels = labels.clone();
        bad_labels[0..4].copy_from_slice(&9999u32.to_be_bytes());
        assert!(matches!(parse_idx_labels(&bad_labels), Err(Error::Format(_))));
    }

    #[test]
    fn idx_truncation_rejected() {
        let (images, labels) = idx_fixture(2);
        assert!(matches!(
            parse_idx_images(&images[..images.len() - 5]),
            Err(Error::Corrupt(_))
        ));
        assert!(matches!(parse_idx_images(&images[..10]), Err(Error::Corrupt(_))));
        assert!(matches!(
            parse_idx_labels(&labels[..labels.len() - 1]),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let (images, _) = idx_fixture(3);
        let (_, labels) = idx_fixture(2);
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images");
        let lp = dir.path().join("labels");
        std::fs::write(&ip, &images).unwrap();
        std::fs::write(&lp, &labels).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp, None), Err(Error::Corrupt(_))));
    }

    #[test]
    fn synthetic_determinism_and_balance() {
        for kind in [SyntheticKind::GaussBlobs, SyntheticKind::TwoMoons] {
            let a = gen_synthetic(kind, 100, 5).unwrap();
            let b = gen_synthetic(kind, 100, 5).unwrap();
            for i in 0..100 {
                assert_eq!(a.example(i).0, b.example(i).0);
            }
            let ones = a.iter().filter(|(_, y)| *y == 1).count();
            assert!((ones as i64 - 50).abs() <= 1);
            for (f, _) in a.iter() {
                assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert!(gen_synthetic(SyntheticKind::GaussBlobs, 1, 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let net = DenseNet::init(&[3, 7, 4], 123).unwrap();
        let ckpt = Checkpoint::from_net(&net, serde_json::json!({"note": "test"}), 5, 9, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.to_net().unwrap(), net);
        assert_eq!(loaded.epoch, 5);
        assert_eq!(loaded.seed, 9);
    }

    #[test]
    fn checkpoint_version_mismatch() {
        let net = DenseNet::init(&[2, 3], 0).unwrap();
        let mut ckpt = Checkpoint::from_net(&net, serde_json::Value::Null, 0, 0, None);
        ckpt.version = 99;
        let bytes = serde_json::to_vec(&ckpt).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Version { expected: 1, got: 99 })
        ));
    }

    #[test]
    fn checkpoint_truncated_is_corrupt() {
        let net = DenseNet::init(&[2, 3], 0).unwrap();
        let ckpt = Checkpoint::from_net(&net, serde_json::Value::Null, 0, 0, None);
        let bytes = serde_json::to_vec(&ckpt).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() / 2]),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![vec![0.5]], vec![0], 2).is_ok());
        assert!(Dataset::new(vec![vec![1.5]], vec![0], 2).is_err());
        assert!(Dataset::new(vec![vec![0.5]], vec![2], 2).is_err());
        assert!(Dataset::new(vec![], vec![], 2).is_err());
    }
}
