//! Synthetic datasets with controllable margins, IDX image files, splitting,
//! deterministic batching and simple augmentation.
//!
//! Synthetic samples of dimension `d` are stored as `[N, d, 1, 1]` so that
//! the convolutional networks see them as a `1 x 1` map with `d` channels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::Section;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `train`, `test` or `all`.
    pub split: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: &str) -> Result<Self> {
        if inputs.rank() != 4 {
            return Err(Error::shape("dataset", format!("inputs must be [N, C, H, W], got {:?}", inputs.shape())));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::LengthMismatch { left: inputs.shape()[0], right: labels.len() });
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", bad, num_classes)));
        }
        if !inputs.is_finite() {
            return Err(Error::NonFinite { op: "dataset" });
        }
        Ok(Dataset { inputs, labels, num_classes, split: split.to_string() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, idx: &[usize], split: &str) -> Result<Dataset> {
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.inputs.gather_rows(idx), labels, self.num_classes, split)
    }

    /// One row per sample: flattened features then the label.
    pub fn to_csv(&self) -> String {
        let per: usize = self.input_shape().iter().product();
        let mut out = String::new();
        for f in 0..per {
            out.push_str(&format!("f{},", f));
        }
        out.push_str("label\n");
        for (i, y) in self.labels.iter().enumerate() {
            for v in &self.inputs.data()[i * per..(i + 1) * per] {
                out.push_str(&format!("{:.17e},", v));
            }
            out.push_str(&format!("{}\n", y));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Minimum distance between any two class centers.
    pub separation: f64,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Gaussian blobs around seeded centers with pairwise distance at least
/// `separation`. Samples are grouped by class.
pub fn gen_gaussian_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.dim == 0 || spec.per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "blobs need >= 2 classes, dim > 0 and per_class > 0 (got {}, {}, {})",
            spec.num_classes, spec.dim, spec.per_class
        )));
    }
    if !(spec.separation > 0.0) || !(spec.noise >= 0.0) {
        return Err(Error::InvalidArgument("separation must be positive and noise non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = place_centers(spec.num_classes, spec.dim, spec.separation, &mut rng);
    let n = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &x in center {
                data.push(x + spec.noise * rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, spec.dim, 1, 1], data)?, labels, spec.num_classes, "all")
}

/// Rejection sampling in a cube whose side grows until every center fits.
fn place_centers(k: usize, d: usize, sep: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut side = sep * (k as f64).powf(1.0 / d as f64);
    loop {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut attempts = 0;
        while centers.len() < k && attempts < 1000 * k {
            attempts += 1;
            let c: Vec<f64> = (0..d).map(|_| side * (rng.random::<f64>() - 0.5)).collect();
            if centers.iter().all(|o| dist(o, &c) >= sep) {
                centers.push(c);
            }
        }
        if centers.len() == k {
            return centers;
        }
        side *= 1.25;
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Two-dimensional rings: class `i` lies at radius `radii[i]` plus Gaussian
/// radial noise, at a uniform angle.
pub fn gen_concentric_rings(per_class: usize, radii: &[f64], noise: f64, seed: u64) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("rings need per_class > 0".into()));
    }
    if radii.len() < 2 {
        return Err(Error::InvalidArgument("rings need at least 2 radii".into()));
    }
    if !(noise >= 0.0) || radii[0] < 0.0 {
        return Err(Error::InvalidArgument("noise and radii must be non-negative".into()));
    }
    for w in radii.windows(2) {
        if !(w[1] - w[0] > 4.0 * noise) {
            return Err(Error::InvalidArgument(format!(
                "ring radii must increase with gaps > 4 * noise ({} -> {}, noise {})",
                w[0], w[1], noise
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = radii.len() * per_class;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (c, &r) in radii.iter().enumerate() {
        for _ in 0..per_class {
            let theta = std::f64::consts::TAU * rng.random::<f64>();
            let rho = r + noise * rng.sample::<f64, _>(StandardNormal);
            data.push(rho * theta.cos());
            data.push(rho * theta.sin());
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, 2, 1, 1], data)?, labels, radii.len(), "all")
}

/// Deterministic `(1 - test_fraction, test_fraction)` split via a seeded
/// permutation. Both parts are non-empty.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction must be in (0, 1), got {}", test_fraction)));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::InvalidArgument("cannot split fewer than 2 samples".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let (test, train) = idx.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train, "train")?, ds.subset(&test, "test")?))
}

/// Sample order for one epoch; a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        idx.shuffle(&mut rng);
    }
    idx
}

/// Iterator over `(inputs, labels)` mini-batches; the last partial batch is
/// kept.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some((self.ds.inputs.gather_rows(idx), idx.iter().map(|&i| self.ds.labels[i]).collect()))
    }
}

pub fn batches(ds: &Dataset, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    Ok(Batches { ds, order: epoch_order(ds.len(), shuffle, seed, epoch), batch_size, pos: 0 })
}

/// Random horizontal flips (probability 1/2 each, when `flip`) and additive
/// Gaussian noise of standard deviation `noise`, applied in place.
pub fn augment(batch: &mut Tensor, flip: bool, noise: f64, rng: &mut ChaCha8Rng) {
    let s = batch.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if flip && w > 1 {
        for i in 0..n {
            if rng.random::<bool>() {
                let data = batch.data_mut();
                for ch in 0..c {
                    for y in 0..h {
                        let row = ((i * c + ch) * h + y) * w;
                        data[row..row + w].reverse();
                    }
                }
            }
        }
    }
    if noise > 0.0 {
        for v in batch.data_mut() {
            *v += noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::IdxTruncated { path: path.to_path_buf(), expected: at + 4, found: bytes.len() })
}

fn check_magic(found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::IdxMagic { found, expected });
    }
    Ok(())
}

/// Reads an IDX image/label file pair; pixels are scaled by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    check_magic(read_u32(&img, 0, images_path)?, IDX_IMAGES_MAGIC)?;
    check_magic(read_u32(&lab, 0, labels_path)?, IDX_LABELS_MAGIC)?;
    let n = read_u32(&img, 4, images_path)? as usize;
    let h = read_u32(&img, 8, images_path)? as usize;
    let w = read_u32(&img, 12, images_path)? as usize;
    let nl = read_u32(&lab, 4, labels_path)? as usize;
    let need = 16 + n * h * w;
    if img.len() != need {
        return Err(Error::IdxTruncated { path: images_path.to_path_buf(), expected: need, found: img.len() });
    }
    if lab.len() != 8 + nl {
        return Err(Error::IdxTruncated { path: labels_path.to_path_buf(), expected: 8 + nl, found: lab.len() });
    }
    if n != nl {
        return Err(Error::IdxCountMismatch { images: n, labels: nl });
    }
    let data = img[16..].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, classes, "all")
}

/// Writes a single-channel dataset as an IDX pair, quantizing pixels to
/// `round(255 * x)`.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = ds.input_shape();
    if c != 1 {
        return Err(Error::InvalidArgument(format!("IDX images have one channel, dataset has {}", c)));
    }
    let mut img = Vec::with_capacity(16 + ds.inputs.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.inputs.data().iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for &y in &ds.labels {
        let b = u8::try_from(y).map_err(|_| Error::InvalidArgument(format!("label {} does not fit in a byte", y)))?;
        lab.push(b);
    }
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs(BlobSpec),
    Rings { classes: usize, per_class: usize, inner: f64, gap: f64, noise: f64, seed: u64 },
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(Error::Config(format!("split `{}` (train|test|all)", s))),
        }
    }
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

/// A dataset source plus which split to use. Synthetic data is split 80/20
/// with a permutation seeded by `split_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    pub split: Split,
    pub test_fraction: f64,
    pub split_seed: u64,
}

const BLOB_KEYS: &[&str] = &["kind", "classes", "dim", "separation", "per_class", "noise", "seed", "split", "test_fraction", "split_seed"];
const RING_KEYS: &[&str] = &["kind", "classes", "per_class", "inner", "gap", "noise", "seed", "split", "test_fraction", "split_seed"];
const IDX_KEYS: &[&str] = &["kind", "train_images", "train_labels", "test_images", "test_labels", "split"];

impl DataSpec {
    /// 4-class blobs in 8 dimensions.
    pub fn default_blobs() -> Self {
        DataSpec {
            source: DataSource::Blobs(BlobSpec { num_classes: 4, dim: 8, separation: 3.0, per_class: 100, noise: 0.15, seed: 0 }),
            split: Split::Train,
            test_fraction: 0.2,
            split_seed: 0,
        }
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        let kind = s.get("kind").unwrap_or("blobs");
        let split = s.parse::<Split>("split")?.unwrap_or(Split::Train);
        let test_fraction = s.parse("test_fraction")?.unwrap_or(0.2);
        let split_seed = s.parse("split_seed")?.unwrap_or(0);
        let source = match kind {
            "blobs" => {
                s.check_keys(BLOB_KEYS)?;
                DataSource::Blobs(BlobSpec {
                    num_classes: s.parse("classes")?.unwrap_or(4),
                    dim: s.parse("dim")?.unwrap_or(8),
                    separation: s.parse("separation")?.unwrap_or(3.0),
                    per_class: s.parse("per_class")?.unwrap_or(100),
                    noise: s.parse("noise")?.unwrap_or(0.15),
                    seed: s.parse("seed")?.unwrap_or(0),
                })
            }
            "rings" => {
                s.check_keys(RING_KEYS)?;
                DataSource::Rings {
                    classes: s.parse("classes")?.unwrap_or(2),
                    per_class: s.parse("per_class")?.unwrap_or(200),
                    inner: s.parse("inner")?.unwrap_or(1.0),
                    gap: s.parse("gap")?.unwrap_or(1.0),
                    noise: s.parse("noise")?.unwrap_or(0.05),
                    seed: s.parse("seed")?.unwrap_or(0),
                }
            }
            "idx" => {
                s.check_keys(IDX_KEYS)?;
                let path = |k: &str| {
                    s.get(k).map(PathBuf::from).ok_or_else(|| Error::Config(format!("[{}] idx data needs `{}`", s.name, k)))
                };
                DataSource::Idx {
                    train_images: path("train_images")?,
                    train_labels: path("train_labels")?,
                    test_images: path("test_images")?,
                    test_labels: path("test_labels")?,
                }
            }
            other => return Err(Error::Config(format!("unknown data kind `{}` (blobs|rings|idx)", other))),
        };
        Ok(DataSpec { source, split, test_fraction, split_seed })
    }

    /// Full key set with every default made explicit.
    pub fn to_section(&self, name: &str) -> Section {
        let mut s = Section::new(name);
        match &self.source {
            DataSource::Blobs(b) => {
                s.set("kind", "blobs");
                s.set("classes", b.num_classes);
                s.set("dim", b.dim);
                s.set("separation", b.separation);
                s.set("per_class", b.per_class);
                s.set("noise", b.noise);
                s.set("seed", b.seed);
            }
            DataSource::Rings { classes, per_class, inner, gap, noise, seed } => {
                s.set("kind", "rings");
                s.set("classes", classes);
                s.set("per_class", per_class);
                s.set("inner", inner);
                s.set("gap", gap);
                s.set("noise", noise);
                s.set("seed", seed);
            }
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
                s.set("kind", "idx");
                s.set("train_images", train_images.display());
                s.set("train_labels", train_labels.display());
                s.set("test_images", test_images.display());
                s.set("test_labels", test_labels.display());
            }
        }
        s.set("split", self.split.name());
        if !matches!(self.source, DataSource::Idx { .. }) {
            s.set("test_fraction", self.test_fraction);
            s.set("split_seed", self.split_seed);
        }
        s
    }

    /// Parses `kind=blobs,classes=4,split=test` style inline specs.
    pub fn parse_inline(text: &str) -> Result<Self> {
        let mut s = Section::new("data");
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("data spec entry `{}` is not key=value", part)))?;
            s.set(k.trim(), v.trim());
        }
        DataSpec::from_section(&s)
    }

    pub fn with_split(&self, split: Split) -> Self {
        DataSpec { split, ..self.clone() }
    }

    pub fn load(&self) -> Result<Dataset> {
        match &self.source {
            DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
                let mut ds = match self.split {
                    Split::Test => load_idx(test_images, test_labels)?,
                    _ => load_idx(train_images, train_labels)?,
                };
                ds.split = self.split.name().to_string();
                Ok(ds)
            }
            synthetic => {
                let all = match synthetic {
                    DataSource::Blobs(b) => gen_gaussian_blobs(b)?,
                    DataSource::Rings { classes, per_class, inner, gap, noise, seed } => {
                        let radii: Vec<f64> = (0..*classes).map(|i| inner + gap * i as f64).collect();
                        gen_concentric_rings(*per_class, &radii, *noise, *seed)?
                    }
                    DataSource::Idx { .. } => unreachable!(),
                };
                match self.split {
                    Split::All => Ok(all),
                    Split::Train => Ok(split(&all, self.test_fraction, self.split_seed)?.0),
                    Split::Test => Ok(split(&all, self.test_fraction, self.split_seed)?.1),
                }
            }
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.source {
            DataSource::Blobs(b) => Some(b.num_classes),
            DataSource::Rings { classes, .. } => Some(*classes),
            DataSource::Idx { .. } => None,
        }
    }
}
