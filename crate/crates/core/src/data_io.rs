//! Datasets: synthetic generators, IDX image files, and holdout splits.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{streams, RealVec, RngStream};
use crate::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Class(usize),
    Real(RealVec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: RealVec,
    pub label: Label,
}

impl Example {
    pub fn classified(features: Vec<f64>, class: usize) -> Result<Self> {
        Ok(Self {
            features: RealVec::new(features)?,
            label: Label::Class(class),
        })
    }

    pub fn regression(features: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        Ok(Self {
            features: RealVec::new(features)?,
            label: Label::Real(RealVec::new(target)?),
        })
    }

    /// A featureless example whose target is `z`, used for mean estimation.
    pub fn scalar_target(z: f64) -> Result<Self> {
        Self::regression(Vec::new(), vec![z])
    }
}

/// Distribution family of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Family {
    /// Featureless examples whose targets are `N(mean, std² I_dim)`.
    GaussianMean { mean: f64, std: f64, dim: usize },
    /// Balanced binary classes centred at `±separation/2` along the unit
    /// diagonal, with isotropic Gaussian noise of scale `noise`.
    TwoBlob { separation: f64, dim: usize, noise: f64 },
    /// `y = weights · x + noise ε` with `x ~ N(0, I)`.
    LinearRegression { weights: Vec<f64>, noise: f64 },
    /// Every example is the featureless target `value`.
    PointMass { value: Vec<f64> },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        match self {
            Family::GaussianMean { mean, std, dim } => {
                if !(*std > 0.0) || !std.is_finite() || !mean.is_finite() {
                    return Err(Error::invalid(format!("gaussian-mean needs finite mean and std > 0, got std = {std}")));
                }
                if *dim == 0 {
                    return Err(Error::invalid("gaussian-mean needs dim >= 1"));
                }
            }
            Family::TwoBlob { separation, dim, noise } => {
                if *dim == 0 || !separation.is_finite() || !(*noise >= 0.0) || !noise.is_finite() {
                    return Err(Error::invalid("two-blob needs dim >= 1, finite separation, noise >= 0"));
                }
            }
            Family::LinearRegression { weights, noise } => {
                if weights.is_empty() || !(*noise >= 0.0) || !noise.is_finite() {
                    return Err(Error::invalid("linear-regression needs non-empty weights and noise >= 0"));
                }
                RealVec::new(weights.clone())?;
            }
            Family::PointMass { value } => {
                if value.is_empty() {
                    return Err(Error::invalid("point-mass needs a non-empty value"));
                }
                RealVec::new(value.clone())?;
            }
        }
        Ok(())
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Family::TwoBlob { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub family: Family,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx {
        images: String,
        labels: String,
        images_sha256: String,
        labels_sha256: String,
    },
    Derived {
        parent_checksum: String,
        description: String,
    },
    InMemory,
}

/// An ordered list of examples; position `i` names `Z_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    source: DataSource,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, source: DataSource) -> Result<Self> {
        if examples.len() < 2 {
            return Err(Error::invalid(format!("a dataset needs n >= 2, got {}", examples.len())));
        }
        let dim = examples[0].features.len();
        let classification = matches!(examples[0].label, Label::Class(_));
        let target_dim = match &examples[0].label {
            Label::Real(v) => v.len(),
            Label::Class(_) => 0,
        };
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != dim {
                return Err(Error::Dimension(format!(
                    "example {i} has {} features, expected {dim}",
                    ex.features.len()
                )));
            }
            match (&ex.label, classification) {
                (Label::Class(_), true) => {}
                (Label::Real(v), false) if v.len() == target_dim => {}
                _ => return Err(Error::Dimension(format!("example {i} has an inconsistent label"))),
            }
        }
        Ok(Self { examples, source })
    }

    pub fn from_examples(examples: Vec<Example>) -> Result<Self> {
        Self::new(examples, DataSource::InMemory)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> &Example {
        &self.examples[i]
    }

    pub fn source(&self) -> &DataSource {
        &self.source
    }

    pub fn feature_dim(&self) -> usize {
        self.examples[0].features.len()
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.examples[0].label, Label::Class(_))
    }

    /// One plus the largest class index, or the target length for regression.
    pub fn output_dim(&self) -> usize {
        match &self.examples[0].label {
            Label::Real(v) => v.len(),
            Label::Class(_) => self
                .examples
                .iter()
                .map(|e| match e.label {
                    Label::Class(c) => c + 1,
                    Label::Real(_) => 0,
                })
                .max()
                .unwrap_or(0),
        }
    }

    /// Copy of this dataset with the examples at `positions` replaced.
    pub fn with_replaced(&self, positions: &[usize], replacements: Vec<Example>) -> Result<Dataset> {
        if positions.len() != replacements.len() {
            return Err(Error::Dimension("replacement count mismatch".into()));
        }
        let mut examples = self.examples.clone();
        for (&p, ex) in positions.iter().zip(replacements) {
            examples[p] = ex;
        }
        Dataset::new(examples, self.source.clone())
    }

    /// Canonical byte encoding: per example the feature count, the features as
    /// little-endian f64 bits, then a label tag and payload.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.examples.len() as u64).to_le_bytes());
        for ex in &self.examples {
            out.extend_from_slice(&(ex.features.len() as u64).to_le_bytes());
            for x in ex.features.iter() {
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            match &ex.label {
                Label::Class(c) => {
                    out.push(0);
                    out.extend_from_slice(&(*c as u64).to_le_bytes());
                }
                Label::Real(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    for x in v.iter() {
                        out.extend_from_slice(&x.to_bits().to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// SHA-256 of [`Dataset::canonical_bytes`], hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }

    /// The examples at `indices`, in that order, tagged as derived from this dataset.
    pub fn subset(&self, indices: &[usize], description: &str) -> Result<Dataset> {
        let examples = indices.iter().map(|&i| self.examples[i].clone()).collect();
        Dataset::new(
            examples,
            DataSource::Derived {
                parent_checksum: self.checksum(),
                description: description.to_string(),
            },
        )
    }
}

/// `count` fresh i.i.d. examples from `family`.
pub fn draw_examples(family: &Family, count: usize, rng: &mut RngStream) -> Result<Vec<Example>> {
    family.validate()?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let ex = match family {
            Family::GaussianMean { mean, std, dim } => {
                let target = (0..*dim).map(|_| mean + std * rng.standard_normal()).collect();
                Example::regression(Vec::new(), target)?
            }
            Family::TwoBlob { separation, dim, noise } => {
                let class = (rng.uniform() < 0.5) as usize;
                let sign = if class == 1 { 1.0 } else { -1.0 };
                let offset = sign * separation / (2.0 * (*dim as f64).sqrt());
                let features = (0..*dim).map(|_| offset + noise * rng.standard_normal()).collect();
                Example::classified(features, class)?
            }
            Family::LinearRegression { weights, noise } => {
                let x: Vec<f64> = (0..weights.len()).map(|_| rng.standard_normal()).collect();
                let y = crate::numerics::dot(&x, weights) + noise * rng.standard_normal();
                Example::regression(x, vec![y])?
            }
            Family::PointMass { value } => Example::regression(Vec::new(), value.clone())?,
        };
        out.push(ex);
    }
    Ok(out)
}

/// Deterministic dataset for `(spec, seed)`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.family.validate()?;
    let mut rng = RngStream::root(spec.seed).derive(streams::DATA);
    let examples = draw_examples(&spec.family, spec.n, &mut rng)?;
    Dataset::new(examples, DataSource::Synthetic(spec.clone()))
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated header at byte {offset}")))
}

/// Parsed IDX image file: `(count, rows, cols, pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}, expected 0x00000803")));
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let expected = count * rows * cols;
    if body.len() < expected {
        return Err(Error::Format(format!(
            "truncated image data: {} bytes, header declares {expected}",
            body.len()
        )));
    }
    if body.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after image data",
            body.len() - expected
        )));
    }
    Ok((count, rows, cols, body))
}

/// Parsed IDX label file: the label bytes.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x}, expected 0x00000801")));
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format(format!("truncated label data: {} of {count} bytes", body.len())));
    }
    if body.len() > count {
        return Err(Error::Format(format!("{} trailing bytes after label data", body.len() - count)));
    }
    Ok(body)
}

/// Decode an image/label IDX pair already in memory. Pixels are scaled by 1/255.
pub fn decode_idx(images: &[u8], labels: &[u8], source: DataSource) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let label_bytes = parse_idx_labels(labels)?;
    if label_bytes.len() != count {
        return Err(Error::Format(format!(
            "count mismatch: {count} images but {} labels",
            label_bytes.len()
        )));
    }
    let stride = rows * cols;
    let mut examples = Vec::with_capacity(count);
    for (i, &label) in label_bytes.iter().enumerate() {
        if label > 9 {
            return Err(Error::Format(format!("label {label} at index {i} is outside 0-9")));
        }
        let features = pixels[i * stride..(i + 1) * stride]
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect();
        examples.push(Example::classified(features, label as usize)?);
    }
    Dataset::new(examples, source)
}

pub fn read_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = std::fs::read(images_path.as_ref())?;
    let labels = std::fs::read(labels_path.as_ref())?;
    let source = DataSource::Idx {
        images: images_path.as_ref().display().to_string(),
        labels: labels_path.as_ref().display().to_string(),
        images_sha256: hex::encode(Sha256::digest(&images)),
        labels_sha256: hex::encode(Sha256::digest(&labels)),
    };
    decode_idx(&images, &labels, source)
}

/// Encode images (each `rows * cols` bytes) as an IDX3 file.
pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Random disjoint split into `(train, eval)` with `|eval| = floor(n * eval_fraction)`.
/// Both parts keep the original relative order.
pub fn holdout_split(ds: &Dataset, eval_fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::invalid(format!("eval_fraction must be in (0, 1), got {eval_fraction}")));
    }
    let n = ds.len();
    let n_eval = (n as f64 * eval_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..n_eval {
        let j = i + rng.below((n - i) as u64) as usize;
        order.swap(i, j);
    }
    let mut eval_idx = order[..n_eval].to_vec();
    let mut train_idx = order[n_eval..].to_vec();
    eval_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((ds.subset(&train_idx, "holdout train")?, ds.subset(&eval_idx, "holdout eval")?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gm(mean: f64, std: f64, n: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            family: Family::GaussianMean { mean, std, dim: 1 },
            n,
            seed,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&gm(0.0, 1.0, 4, 1)).unwrap();
        let b = generate(&gm(0.0, 1.0, 4, 1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), generate(&gm(0.0, 1.0, 4, 2)).unwrap().checksum());
    }

    #[test]
    fn gaussian_mean_rejects_zero_std() {
        assert!(generate(&gm(5.0, 0.0, 4, 1)).is_err());
    }

    #[test]
    fn two_blob_is_balanced() {
        let ds = generate(&SyntheticSpec {
            family: Family::TwoBlob { separation: 2.0, dim: 3, noise: 1.0 },
            n: 10_000,
            seed: 17,
        })
        .unwrap();
        let ones = ds
            .examples()
            .iter()
            .filter(|e| e.label == Label::Class(1))
            .count();
        let frac = ones as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.015, "{frac}");
        assert_eq!(ds.output_dim(), 2);
    }

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let images = encode_idx_images(2, 2, &[vec![0, 255, 128, 1], vec![255, 255, 0, 0]]);
        let labels = encode_idx_labels(&[7, 3]);
        (images, labels)
    }

    #[test]
    fn idx_fixture_round_trip() {
        let (images, labels) = fixture();
        let ds = decode_idx(&images, &labels, DataSource::InMemory).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.get(0).features[1], 1.0);
        assert_eq!(ds.get(0).features[0], 0.0);
        assert_eq!(ds.get(1).label, Label::Class(3));
    }

    #[test]
    fn idx_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = fixture();
        std::fs::write(dir.path().join("img"), &images).unwrap();
        std::fs::write(dir.path().join("lbl"), &labels).unwrap();
        let a = read_idx(dir.path().join("img"), dir.path().join("lbl")).unwrap();
        let b = read_idx(dir.path().join("img"), dir.path().join("lbl")).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(matches!(a.source(), DataSource::Idx { .. }));
    }

    #[test]
    fn idx_errors() {
        let (images, labels) = fixture();
        let three = encode_idx_images(2, 2, &[vec![0; 4], vec![0; 4], vec![0; 4]]);
        assert!(matches!(
            decode_idx(&three, &labels, DataSource::InMemory),
            Err(Error::Format(m)) if m.contains("count mismatch")
        ));
        let mut bad = images.clone();
        bad[3] = 0x04;
        assert!(decode_idx(&bad, &labels, DataSource::InMemory).is_err());
        assert!(decode_idx(&images[..images.len() - 1], &labels, DataSource::InMemory).is_err());
        assert!(decode_idx(&labels, &images, DataSource::InMemory).is_err());
        assert!(decode_idx(&images[..10], &labels, DataSource::InMemory).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = generate(&gm(0.0, 1.0, 10, 3)).unwrap();
        let mut rng = RngStream::new(5, streams::SPLIT);
        let (train, eval) = holdout_split(&ds, 0.2, &mut rng).unwrap();
        assert_eq!((train.len(), eval.len()), (8, 2));
        let mut all: Vec<f64> = train
            .examples()
            .iter()
            .chain(eval.examples())
            .map(|e| match &e.label {
                Label::Real(v) => v[0],
                _ => unreachable!(),
            })
            .collect();
        let mut orig: Vec<f64> = ds
            .examples()
            .iter()
            .map(|e| match &e.label {
                Label::Real(v) => v[0],
                _ => unreachable!(),
            })
            .collect();
        all.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(all, orig);

        let mut rng2 = RngStream::new(5, streams::SPLIT);
        let (train2, eval2) = holdout_split(&ds, 0.2, &mut rng2).unwrap();
        assert_eq!(train, train2);
        assert_eq!(eval, eval2);
        assert!(holdout_split(&ds, 1.0, &mut rng2).is_err());
        assert!(holdout_split(&ds, 0.0, &mut rng2).is_err());
    }

    #[test]
    fn dataset_rejects_ragged_features() {
        let a = Example::classified(vec![1.0, 2.0], 0).unwrap();
        let b = Example::classified(vec![1.0], 1).unwrap();
        assert!(Dataset::from_examples(vec![a.clone(), b]).is_err());
        assert!(Dataset::from_examples(vec![a]).is_err());
    }
}
