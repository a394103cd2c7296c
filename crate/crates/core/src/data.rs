//! Datasets: the synthetic fixed-bit generator, IDX image containers,
//! binarization, three-threshold expansion, concatenation, class subsetting,
//! and the packed on-disk dataset format.
//!
//! Dataset file layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DLGNDSET"
//! version      u32      1
//! dim          u64      bits per sample
//! classes      u32
//! samples      u64
//! words/row    u32      ceil(dim / 64)
//! flags        u32      bit 0: grayscale bytes present
//! rows         samples * words/row u64, bit j of a row at word j/64, position j%64
//! labels       samples * u32
//! train, val, test: u64 count followed by that many u32 sample indices
//! gray         samples * dim u8 (only when flag bit 0 is set)
//! meta         u32 byte length + JSON provenance
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const DATASET_MAGIC: &[u8; 8] = b"DLGNDSET";
const DATASET_VERSION: u32 = 1;
const IDX_UBYTE: u8 = 0x08;

/// Fraction of the training pool held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

/// Row-major packed bits, each row padded to whole 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(64);
        Self {
            rows,
            cols,
            words_per_row,
            data: vec![0; rows * words_per_row],
        }
    }

    pub fn from_bools(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows.len(), cols);
        for (r, row) in rows.iter().enumerate() {
            Error::check_dim("bit row length", cols, row.len())?;
            for (c, &b) in row.iter().enumerate() {
                m.set(r, c, b);
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        (self.data[r * self.words_per_row + c / 64] >> (c % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        let w = &mut self.data[r * self.words_per_row + c / 64];
        let bit = 1u64 << (c % 64);
        if v {
            *w |= bit;
        } else {
            *w &= !bit;
        }
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.data[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn row_bools(&self, r: usize) -> Vec<bool> {
        (0..self.cols).map(|c| self.get(r, c)).collect()
    }

    pub fn to_bools(&self) -> Vec<Vec<bool>> {
        (0..self.rows).map(|r| self.row_bools(r)).collect()
    }

    fn push_row_words(&mut self, words: &[u64]) {
        debug_assert_eq!(words.len(), self.words_per_row);
        self.data.extend_from_slice(words);
        self.rows += 1;
    }

    fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = Self::zeros(0, self.cols);
        for &r in rows {
            out.push_row_words(self.row_words(r));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::MissingSplit(other.to_string())),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// One source dataset's slice of the label space after concatenation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRange {
    pub source: String,
    pub offset: u32,
    pub classes: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    #[serde(default)]
    pub transform: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub class_ranges: Vec<ClassRange>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDataset {
    pub num_classes: usize,
    pub bits: BitMatrix,
    /// Original grayscale bytes (`value / 255` in `[0, 1]`) when the dataset
    /// came from images; used to train on continuous inputs.
    pub gray: Option<Vec<u8>>,
    pub labels: Vec<u32>,
    pub splits: Splits,
    pub meta: Provenance,
}

impl BinaryDataset {
    pub fn dim(&self) -> usize {
        self.bits.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self, split: Split) -> Result<&[u32]> {
        let idx = self.splits.get(split);
        if idx.is_empty() {
            Err(Error::MissingSplit(split.to_string()))
        } else {
            Ok(idx)
        }
    }

    pub fn has_continuous(&self) -> bool {
        self.gray.is_some()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        Error::check_dim("bit rows", n, self.bits.rows())?;
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::InvalidLabel {
                label: l as usize,
                classes: self.num_classes,
            });
        }
        if let Some(g) = &self.gray {
            Error::check_dim("grayscale bytes", n * self.dim(), g.len())?;
        }
        let mut seen = vec![false; n];
        for &i in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            let i = i as usize;
            if i >= n {
                return Err(Error::corrupt("dataset", format!("split index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::corrupt("dataset", format!("sample {i} is in two splits")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Feature-major batch of the given samples. `continuous` uses the
    /// grayscale values when present, otherwise the bits.
    pub fn features(&self, indices: &[u32], continuous: bool) -> Matrix {
        let cols = indices.len();
        let dim = self.dim();
        let mut m = Matrix::zeros(dim, cols);
        let data = m.as_mut_slice();
        match (&self.gray, continuous) {
            (Some(gray), true) => {
                for (s, &i) in indices.iter().enumerate() {
                    let row = &gray[i as usize * dim..(i as usize + 1) * dim];
                    for (f, &g) in row.iter().enumerate() {
                        data[f * cols + s] = g as f64 / 255.0;
                    }
                }
            }
            _ => {
                for (s, &i) in indices.iter().enumerate() {
                    for (w, &word) in self.bits.row_words(i as usize).iter().enumerate() {
                        let mut word = word;
                        while word != 0 {
                            let f = w * 64 + word.trailing_zeros() as usize;
                            data[f * cols + s] = 1.0;
                            word &= word - 1;
                        }
                    }
                }
            }
        }
        m
    }

    pub fn labels_of(&self, indices: &[u32]) -> Vec<u32> {
        indices.iter().map(|&i| self.labels[i as usize]).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LittleEndian>(DATASET_VERSION)?;
        w.write_u64::<LittleEndian>(self.dim() as u64)?;
        w.write_u32::<LittleEndian>(self.num_classes as u32)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(self.bits.words_per_row() as u32)?;
        w.write_u32::<LittleEndian>(self.gray.is_some() as u32)?;
        for &word in &self.bits.data {
            w.write_u64::<LittleEndian>(word)?;
        }
        for &l in &self.labels {
            w.write_u32::<LittleEndian>(l)?;
        }
        for idx in [&self.splits.train, &self.splits.val, &self.splits.test] {
            w.write_u64::<LittleEndian>(idx.len() as u64)?;
            for &i in idx {
                w.write_u32::<LittleEndian>(i)?;
            }
        }
        if let Some(g) = &self.gray {
            w.write_all(g)?;
        }
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(&meta)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let truncated = |e: std::io::Error| Error::corrupt("dataset", format!("truncated file ({e})"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::corrupt("dataset", "bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                kind: "dataset",
                found: version,
                supported: DATASET_VERSION,
            });
        }
        let dim = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let num_classes = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let n = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
        let wpr = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let flags = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if wpr != dim.div_ceil(64) {
            return Err(Error::corrupt("dataset", "row word count does not match dimension"));
        }
        let mut bits = BitMatrix::zeros(n, dim);
        for word in &mut bits.data {
            *word = r.read_u64::<LittleEndian>().map_err(truncated)?;
        }
        let labels = (0..n)
            .map(|_| r.read_u32::<LittleEndian>())
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(truncated)?;
        let mut read_idx = || -> Result<Vec<u32>> {
            let len = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            if len > n {
                return Err(Error::corrupt("dataset", "split larger than dataset"));
            }
            (0..len)
                .map(|_| r.read_u32::<LittleEndian>().map_err(truncated))
                .collect()
        };
        let splits = Splits {
            train: read_idx()?,
            val: read_idx()?,
            test: read_idx()?,
        };
        let gray = if flags & 1 == 1 {
            let mut g = vec![0u8; n * dim];
            r.read_exact(&mut g).map_err(truncated)?;
            Some(g)
        } else {
            None
        };
        let meta_len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(truncated)?;
        let ds = Self {
            num_classes,
            bits,
            gray,
            labels,
            splits,
            meta: serde_json::from_slice(&meta)?,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Parameters of the synthetic fixed-bit classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_fixed_min")]
    pub fixed_bits_min: usize,
    #[serde(default = "default_fixed_max")]
    pub fixed_bits_max: usize,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_dim() -> usize {
    784
}
fn default_fixed_min() -> usize {
    5
}
fn default_fixed_max() -> usize {
    40
}
fn default_samples_per_class() -> usize {
    600
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        Self {
            num_classes,
            dim: default_dim(),
            fixed_bits_min: default_fixed_min(),
            fixed_bits_max: default_fixed_max(),
            samples_per_class: default_samples_per_class(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.fixed_bits_min == 0
            || self.fixed_bits_min > self.fixed_bits_max
            || self.fixed_bits_max > self.dim
        {
            return Err(Error::config(format!(
                "need 0 < fixed_bits_min ({}) <= fixed_bits_max ({}) <= dim ({})",
                self.fixed_bits_min, self.fixed_bits_max, self.dim
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be positive"));
        }
        if self.num_classes > u32::MAX as usize || self.dim > u32::MAX as usize {
            return Err(Error::config("synthetic spec exceeds u32 index range"));
        }
        Ok(())
    }
}

/// The positions a class fixes and the value each one is fixed to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub positions: Vec<u32>,
    pub values: Vec<bool>,
}

/// Splits a training pool into train/validation, holding out
/// `round(0.2 * len)` random samples.
pub fn split_train_val<R: Rng + ?Sized>(pool: &[u32], rng: &mut R) -> (Vec<u32>, Vec<u32>) {
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    let n_val = (pool.len() as f64 * VAL_FRACTION).round() as usize;
    let mut val = shuffled[..n_val].to_vec();
    let mut train = shuffled[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Generates the synthetic dataset: per class, `f ~ U{min..=max}` positions
/// fixed to random values, every other bit i.i.d. uniform. Each class is
/// split 80/20 into a training pool and a test set; 20% of the pool becomes
/// the validation split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(BinaryDataset, Vec<ClassSignature>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;

    let signatures: Vec<ClassSignature> = (0..spec.num_classes)
        .map(|_| {
            let f = rng.random_range(spec.fixed_bits_min..=spec.fixed_bits_max);
            let mut positions: Vec<u32> = index::sample(&mut rng, dim, f)
                .into_iter()
                .map(|p| p as u32)
                .collect();
            positions.sort_unstable();
            let values = positions.iter().map(|_| rng.random()).collect();
            ClassSignature { positions, values }
        })
        .collect();

    let n = spec.num_classes * spec.samples_per_class;
    let mut bits = BitMatrix::zeros(0, dim);
    bits.data.reserve(n * bits.words_per_row);
    let mut labels = Vec::with_capacity(n);
    let tail = dim % 64;
    let mut row = vec![0u64; dim.div_ceil(64)];
    for (class, sig) in signatures.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for w in row.iter_mut() {
                *w = rng.random();
            }
            if tail != 0 {
                *row.last_mut().expect("dim >= 1") &= (1u64 << tail) - 1;
            }
            for (&p, &v) in sig.positions.iter().zip(&sig.values) {
                let (w, b) = (p as usize / 64, p as usize % 64);
                if v {
                    row[w] |= 1 << b;
                } else {
                    row[w] &= !(1 << b);
                }
            }
            bits.push_row_words(&row);
            labels.push(class as u32);
        }
    }

    let per = spec.samples_per_class;
    let n_test = (per as f64 * 0.2).round() as usize;
    let mut pool = Vec::with_capacity(n);
    let mut test = Vec::with_capacity(spec.num_classes * n_test);
    for class in 0..spec.num_classes {
        let start = class * per;
        pool.extend((start..start + per - n_test).map(|i| i as u32));
        test.extend((start + per - n_test..start + per).map(|i| i as u32));
    }
    let (train, val) = split_train_val(&pool, &mut rng);

    let ds = BinaryDataset {
        num_classes: spec.num_classes,
        bits,
        gray: None,
        labels,
        splits: Splits { train, val, test },
        meta: Provenance {
            source: "synthetic".into(),
            transform: format!(
                "dim={} fixed={}..={} per_class={}",
                dim, spec.fixed_bits_min, spec.fixed_bits_max, spec.samples_per_class
            ),
            seed: Some(spec.seed),
            class_ranges: vec![ClassRange {
                source: "synthetic".into(),
                offset: 0,
                classes: spec.num_classes as u32,
            }],
        },
    };
    Ok((ds, signatures))
}

/// Unsigned-byte image stack read from an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image_len(&self) -> usize {
        self.rows * self.cols
    }

    /// Pixels of image `i` scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        let n = self.image_len();
        self.pixels[i * n..(i + 1) * n]
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect()
    }
}

fn read_idx_header<R: Read>(r: &mut R, want_dims: u8) -> Result<Vec<usize>> {
    let bad = |e: std::io::Error| Error::corrupt("idx", format!("truncated header ({e})"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(bad)?;
    if magic[0] != 0 || magic[1] != 0 || magic[2] != IDX_UBYTE || magic[3] != want_dims {
        return Err(Error::corrupt(
            "idx",
            format!(
                "bad magic {:02x}{:02x}{:02x}{:02x}, expected 000008{:02x}",
                magic[0], magic[1], magic[2], magic[3], want_dims
            ),
        ));
    }
    (0..want_dims)
        .map(|_| r.read_u32::<BigEndian>().map(|d| d as usize).map_err(bad))
        .collect()
}

fn read_payload<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len);
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::corrupt(
            "idx",
            format!("truncated payload: expected {len} bytes, found {}", buf.len()),
        ));
    }
    Ok(buf)
}

pub fn parse_idx_images<R: Read>(r: &mut R) -> Result<IdxImages> {
    let dims = read_idx_header(r, 3)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = read_payload(r, count * rows * cols)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let dims = read_idx_header(r, 1)?;
    read_payload(r, dims[0])
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    parse_idx_images(&mut BufReader::new(File::open(path)?))
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&mut BufReader::new(File::open(path)?))
}

pub fn write_idx_images<W: Write>(w: &mut W, images: &IdxImages) -> Result<()> {
    Error::check_dim("idx pixel count", images.count * images.image_len(), images.pixels.len())?;
    w.write_all(&[0, 0, IDX_UBYTE, 3])?;
    for d in [images.count, images.rows, images.cols] {
        w.write_u32::<BigEndian>(d as u32)?;
    }
    w.write_all(&images.pixels)?;
    Ok(())
}

pub fn write_idx_labels<W: Write>(w: &mut W, labels: &[u8]) -> Result<()> {
    w.write_all(&[0, 0, IDX_UBYTE, 1])?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)?;
    Ok(())
}

/// `x > threshold`, strict.
pub fn binarize(x: &[f64], threshold: f64) -> Vec<bool> {
    x.iter().map(|&v| v > threshold).collect()
}

/// Concatenation of `x > t` for each threshold, threshold-major.
pub fn expand_thresholds(x: &[f64], thresholds: &[f64]) -> Vec<bool> {
    thresholds
        .iter()
        .flat_map(|&t| x.iter().map(move |&v| v > t))
        .collect()
}

/// Flattened 32x32 RGB image (3072 values in `[0, 1]`) to 9216 bits using
/// the thresholds 1/4, 2/4, 3/4.
pub fn threshold_expand(x: &[f64]) -> Result<Vec<bool>> {
    Error::check_dim("RGB image length", 3072, x.len())?;
    Ok(expand_thresholds(x, &[0.25, 0.5, 0.75]))
}

fn class_count(labels: &[u8]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m as usize + 1)
}

/// Builds a dataset from IDX train and test pairs. Bits are the 0.5
/// binarization; the grayscale bytes are kept for continuous training.
pub fn dataset_from_idx(
    name: &str,
    train: (&IdxImages, &[u8]),
    test: (&IdxImages, &[u8]),
    seed: u64,
) -> Result<BinaryDataset> {
    for (images, labels) in [train, test] {
        Error::check_dim("idx labels vs images", images.count, labels.len())?;
    }
    Error::check_dim("test image size", train.0.image_len(), test.0.image_len())?;
    let dim = train.0.image_len();
    let num_classes = class_count(train.1).max(class_count(test.1));
    let n_train = train.0.count;
    let n = n_train + test.0.count;

    let mut bits = BitMatrix::zeros(n, dim);
    let mut gray = Vec::with_capacity(n * dim);
    gray.extend_from_slice(&train.0.pixels);
    gray.extend_from_slice(&test.0.pixels);
    for i in 0..n {
        for (f, &p) in gray[i * dim..(i + 1) * dim].iter().enumerate() {
            // p / 255 > 0.5  <=>  p >= 128
            if p as f64 / 255.0 > 0.5 {
                bits.set(i, f, true);
            }
        }
    }
    let labels: Vec<u32> = train.1.iter().chain(test.1).map(|&l| l as u32).collect();
    let pool: Vec<u32> = (0..n_train as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_idx, val_idx) = split_train_val(&pool, &mut rng);
    let ds = BinaryDataset {
        num_classes,
        bits,
        gray: Some(gray),
        labels,
        splits: Splits {
            train: train_idx,
            val: val_idx,
            test: (n_train as u32..n as u32).collect(),
        },
        meta: Provenance {
            source: name.to_string(),
            transform: "binarize>0.5".into(),
            seed: Some(seed),
            class_ranges: vec![ClassRange {
                source: name.to_string(),
                offset: 0,
                classes: num_classes as u32,
            }],
        },
    };
    ds.validate()?;
    Ok(ds)
}

/// Stacks datasets, offsetting each source's labels past the previous
/// sources' classes. Splits stay with their samples.
pub fn concat_datasets(parts: &[BinaryDataset]) -> Result<BinaryDataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::config("nothing to concatenate"))?;
    let dim = first.dim();
    let keep_gray = parts.iter().all(|p| p.gray.is_some());
    let mut bits = BitMatrix::zeros(0, dim);
    let mut gray = keep_gray.then(Vec::new);
    let mut labels = Vec::new();
    let mut splits = Splits::default();
    let mut ranges = Vec::new();
    let mut class_offset = 0u32;
    for part in parts {
        Error::check_dim("sample dimension", dim, part.dim())?;
        let sample_offset = labels.len() as u32;
        bits.data.extend_from_slice(&part.bits.data);
        bits.rows += part.bits.rows;
        if let (Some(g), Some(pg)) = (gray.as_mut(), &part.gray) {
            g.extend_from_slice(pg);
        }
        labels.extend(part.labels.iter().map(|&l| l + class_offset));
        splits.train.extend(part.splits.train.iter().map(|&i| i + sample_offset));
        splits.val.extend(part.splits.val.iter().map(|&i| i + sample_offset));
        splits.test.extend(part.splits.test.iter().map(|&i| i + sample_offset));
        if part.meta.class_ranges.is_empty() {
            ranges.push(ClassRange {
                source: part.meta.source.clone(),
                offset: class_offset,
                classes: part.num_classes as u32,
            });
        } else {
            ranges.extend(part.meta.class_ranges.iter().map(|r| ClassRange {
                source: r.source.clone(),
                offset: r.offset + class_offset,
                classes: r.classes,
            }));
        }
        class_offset += part.num_classes as u32;
    }
    let source = parts
        .iter()
        .map(|p| p.meta.source.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let transform = if parts.len() == 1 {
        first.meta.transform.clone()
    } else {
        "concat".to_string()
    };
    Ok(BinaryDataset {
        num_classes: class_offset as usize,
        bits,
        gray,
        labels,
        splits,
        meta: Provenance {
            source,
            transform,
            seed: first.meta.seed,
            class_ranges: ranges,
        },
    })
}

/// Keeps only samples with label `< k`.
pub fn take_classes(ds: &BinaryDataset, k: usize) -> Result<BinaryDataset> {
    if k == 0 || k > ds.num_classes {
        return Err(Error::config(format!(
            "cannot take {k} classes from a {}-class dataset",
            ds.num_classes
        )));
    }
    let kept: Vec<usize> = (0..ds.len()).filter(|&i| (ds.labels[i] as usize) < k).collect();
    let mut remap = vec![u32::MAX; ds.len()];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new as u32;
    }
    let filter = |idx: &[u32]| -> Vec<u32> {
        idx.iter()
            .map(|&i| remap[i as usize])
            .filter(|&i| i != u32::MAX)
            .collect()
    };
    let dim = ds.dim();
    let gray = ds.gray.as_ref().map(|g| {
        kept.iter()
            .flat_map(|&i| g[i * dim..(i + 1) * dim].iter().copied())
            .collect()
    });
    let mut class_ranges = Vec::new();
    for r in &ds.meta.class_ranges {
        if (r.offset as usize) < k {
            class_ranges.push(ClassRange {
                classes: r.classes.min(k as u32 - r.offset),
                ..r.clone()
            });
        }
    }
    Ok(BinaryDataset {
        num_classes: k,
        bits: ds.bits.select_rows(&kept),
        gray,
        labels: kept.iter().map(|&i| ds.labels[i]).collect(),
        splits: Splits {
            train: filter(&ds.splits.train),
            val: filter(&ds.splits.val),
            test: filter(&ds.splits.test),
        },
        meta: Provenance {
            transform: if k == ds.num_classes {
                ds.meta.transform.clone()
            } else {
                format!("{};take_classes={k}", ds.meta.transform)
            },
            class_ranges,
            ..ds.meta.clone()
        },
    })
}

/// Writes `label,source,source_label` for every class of a (concatenated) dataset.
pub fn write_label_map<W: Write>(ds: &BinaryDataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["label", "source", "source_label"])?;
    for r in &ds.meta.class_ranges {
        for c in 0..r.classes {
            out.write_record([
                (r.offset + c).to_string(),
                r.source.clone(),
                c.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec(k: usize) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: k,
            dim: 100,
            fixed_bits_min: 5,
            fixed_bits_max: 40,
            samples_per_class: 50,
            seed: 3,
        }
    }

    #[test]
    fn synthetic_fixed_positions_agree() {
        let (ds, sigs) = generate_synthetic(&small_spec(4)).unwrap();
        ds.validate().unwrap();
        for i in 0..ds.len() {
            let sig = &sigs[ds.labels[i] as usize];
            for (&p, &v) in sig.positions.iter().zip(&sig.values) {
                assert_eq!(ds.bits.get(i, p as usize), v);
            }
        }
        for sig in &sigs {
            assert!((5..=40).contains(&sig.positions.len()));
        }
    }

    #[test]
    fn fully_fixed_classes_are_constant() {
        let spec = SyntheticSpec {
            fixed_bits_min: 100,
            fixed_bits_max: 100,
            ..small_spec(3)
        };
        let (ds, _) = generate_synthetic(&spec).unwrap();
        for i in 0..ds.len() {
            let first = ds.labels[i] as usize * 50;
            assert_eq!(ds.bits.row_words(i), ds.bits.row_words(first));
        }
    }

    #[test]
    fn synthetic_free_bits_are_balanced() {
        let spec = SyntheticSpec {
            samples_per_class: 600,
            dim: 784,
            ..small_spec(2)
        };
        let (ds, sigs) = generate_synthetic(&spec).unwrap();
        // 0.07 is a ~3.4 sigma bound per position; over ~1500 positions a
        // handful of excursions is expected, a wide one is not
        let (mut checked, mut outside) = (0, 0);
        for (class, sig) in sigs.iter().enumerate() {
            for p in 0..784u32 {
                if sig.positions.contains(&p) {
                    continue;
                }
                let ones = (class * 600..(class + 1) * 600)
                    .filter(|&i| ds.bits.get(i, p as usize))
                    .count();
                let mean = ones as f64 / 600.0;
                checked += 1;
                outside += ((mean - 0.5).abs() > 0.07) as usize;
                assert!((mean - 0.5).abs() <= 0.1, "class {class} pos {p}: {mean}");
            }
        }
        assert!(outside * 200 <= checked, "{outside} of {checked} outside 0.5 +- 0.07");
    }

    #[test]
    fn synthetic_splits() {
        let (ds, _) = generate_synthetic(&small_spec(5)).unwrap();
        let pool = ds.splits.train.len() + ds.splits.val.len();
        assert_eq!(ds.splits.test.len(), 5 * 10);
        assert_eq!(pool, 5 * 40);
        let expect_val = (pool as f64 * 0.2).round() as isize;
        assert!((ds.splits.val.len() as isize - expect_val).abs() <= 1);
        ds.validate().unwrap();
        // test samples are stratified
        let test_labels = ds.labels_of(&ds.splits.test);
        for c in 0..5 {
            assert_eq!(test_labels.iter().filter(|&&l| l == c).count(), 10);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small_spec(3)).unwrap().0.to_bytes();
        let b = generate_synthetic(&small_spec(3)).unwrap().0.to_bytes();
        assert_eq!(a, b);
        let other = SyntheticSpec { seed: 4, ..small_spec(3) };
        assert_ne!(a, generate_synthetic(&other).unwrap().0.to_bytes());
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_synthetic(&small_spec(1)).is_err());
        assert!(generate_synthetic(&SyntheticSpec { fixed_bits_min: 0, ..small_spec(2) }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { fixed_bits_max: 101, ..small_spec(2) }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { fixed_bits_min: 41, ..small_spec(2) }).is_err());
    }

    #[test]
    fn container_round_trip_and_corruption() {
        let (ds, _) = generate_synthetic(&small_spec(3)).unwrap();
        let bytes = ds.to_bytes();
        let back = BinaryDataset::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert!(BinaryDataset::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(BinaryDataset::read_from(&mut bad.as_slice()).is_err());
        let mut newer = bytes;
        newer[8] = 9;
        assert!(matches!(
            BinaryDataset::read_from(&mut newer.as_slice()),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn binarize_boundaries() {
        assert_eq!(binarize(&[0.49, 0.51, 0.5], 0.5), vec![false, true, false]);
    }

    #[test]
    fn threshold_expansion() {
        let mut img = vec![0.0; 3072];
        img[5] = 0.6;
        let bits = threshold_expand(&img).unwrap();
        assert_eq!(bits.len(), 9216);
        assert_eq!((bits[5], bits[3072 + 5], bits[2 * 3072 + 5]), (true, true, false));
        assert_eq!(bits.iter().filter(|&&b| b).count(), 2);
        assert!(threshold_expand(&vec![0.0; 3072]).unwrap().iter().all(|&b| !b));
        assert!(threshold_expand(&[0.0; 10]).is_err());
    }

    proptest! {
        #[test]
        fn expansion_is_monotone(img in prop::collection::vec(0.0f64..=1.0, 3072)) {
            let bits = threshold_expand(&img).unwrap();
            prop_assert_eq!(bits.len(), 3 * img.len());
            for p in 0..3072 {
                if bits[2 * 3072 + p] { prop_assert!(bits[3072 + p]); }
                if bits[3072 + p] { prop_assert!(bits[p]); }
            }
        }

        #[test]
        fn pack_unpack(rows in prop::collection::vec(prop::collection::vec(any::<bool>(), 70), 1..6)) {
            let m = BitMatrix::from_bools(&rows).unwrap();
            prop_assert_eq!(m.to_bools(), rows);
        }
    }

    fn tiny_idx(count: usize, seed: u8) -> (IdxImages, Vec<u8>) {
        let pixels = (0..count * 4).map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed)).collect();
        let labels = (0..count).map(|i| (i % 3) as u8).collect();
        (
            IdxImages {
                count,
                rows: 2,
                cols: 2,
                pixels,
            },
            labels,
        )
    }

    #[test]
    fn idx_round_trip() {
        let (images, labels) = tiny_idx(7, 1);
        let mut buf = Vec::new();
        write_idx_images(&mut buf, &images).unwrap();
        assert_eq!(parse_idx_images(&mut buf.as_slice()).unwrap(), images);
        let mut lb = Vec::new();
        write_idx_labels(&mut lb, &labels).unwrap();
        assert_eq!(parse_idx_labels(&mut lb.as_slice()).unwrap(), labels);

        let mut bad = buf.clone();
        bad[2] = 0x09;
        assert!(parse_idx_images(&mut bad.as_slice()).is_err());
        assert!(parse_idx_images(&mut &buf[..buf.len() - 1]).is_err());
        // label file read as images
        assert!(parse_idx_images(&mut lb.as_slice()).is_err());
    }

    #[test]
    fn idx_dataset_and_concat() {
        let (tr, trl) = tiny_idx(20, 0);
        let (te, tel) = tiny_idx(5, 9);
        let a = dataset_from_idx("a", (&tr, &trl), (&te, &tel), 1).unwrap();
        assert_eq!(a.num_classes, 3);
        assert_eq!(a.splits.train.len() + a.splits.val.len(), 20);
        assert_eq!(a.splits.val.len(), 4);
        assert!(dataset_from_idx("bad", (&tr, &trl[..3]), (&te, &tel), 1).is_err());
        for i in 0..a.len() {
            for f in 0..4 {
                assert_eq!(a.bits.get(i, f), a.gray.as_ref().unwrap()[i * 4 + f] >= 128);
            }
        }

        let b = dataset_from_idx("b", (&tr, &trl), (&te, &tel), 2).unwrap();
        let ab = concat_datasets(&[a.clone(), b.clone()]).unwrap();
        ab.validate().unwrap();
        assert_eq!(ab.num_classes, 6);
        assert_eq!(*ab.labels.iter().max().unwrap(), 5);
        assert_eq!(ab.class_counts().iter().sum::<usize>(), a.len() + b.len());
        assert_eq!(ab.meta.class_ranges.len(), 2);
        assert_eq!(ab.meta.class_ranges[1].offset, 3);

        let single = concat_datasets(std::slice::from_ref(&a)).unwrap();
        assert_eq!((single.bits.clone(), single.labels.clone(), single.splits.clone()), (a.bits.clone(), a.labels.clone(), a.splits.clone()));

        let mut csv = Vec::new();
        write_label_map(&ab, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.contains("4,b,1"));

        let mut other = b.clone();
        other.bits = BitMatrix::zeros(other.len(), 5);
        assert!(concat_datasets(&[a, other]).is_err());
    }

    #[test]
    fn take_classes_subsets() {
        let (ds, _) = generate_synthetic(&small_spec(5)).unwrap();
        let same = take_classes(&ds, 5).unwrap();
        assert_eq!((&same.bits, &same.labels, &same.splits), (&ds.bits, &ds.labels, &ds.splits));

        let two = take_classes(&ds, 2).unwrap();
        two.validate().unwrap();
        assert!(two.labels.iter().all(|&l| l < 2));
        let counts = ds.class_counts();
        assert_eq!(two.len(), counts[0] + counts[1]);
        assert_eq!(
            two.splits.train.len() + two.splits.val.len() + two.splits.test.len(),
            two.len()
        );
        assert!(take_classes(&ds, 6).is_err());
        assert!(take_classes(&ds, 0).is_err());
    }

    #[test]
    fn features_from_bits() {
        let rows = vec![vec![true, false, true], vec![false, false, true]];
        let ds = BinaryDataset {
            num_classes: 2,
            bits: BitMatrix::from_bools(&rows).unwrap(),
            gray: None,
            labels: vec![0, 1],
            splits: Splits::default(),
            meta: Provenance::default(),
        };
        let m = ds.features(&[1, 0], false);
        assert_eq!(m.row(0), &[0.0, 1.0]);
        assert_eq!(m.row(2), &[1.0, 1.0]);
        assert!(ds.split(Split::Test).is_err());
    }
}
