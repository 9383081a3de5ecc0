//! Datasets: MNIST IDX files, binary subsets, a synthetic 2D task and
//! seeded batching.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;

use crate::error::{AtentError, Result};
use crate::models::Batch;
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const DATA_DIR_ENV: &str = "ATENT_DATA_DIR";
/// Seed of the fixed 90/10 train/validation split.
pub const SPLIT_SEED: u64 = 0x5EED_0090;
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × d` or `n × c × h × w`, values in `value_range`.
    pub inputs: Tensor,
    /// One-hot, `n × classes`.
    pub labels: Tensor,
    pub class_names: Vec<String>,
    pub value_range: (f64, f64),
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Tensor, class_names: Vec<String>) -> Result<Self> {
        Batch::new(inputs.clone(), labels.clone())?;
        if class_names.len() != labels.shape()[1] {
            return Err(AtentError::Data(format!(
                "{} class names for {} label columns",
                class_names.len(),
                labels.shape()[1]
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            class_names,
            value_range: (0.0, 1.0),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_indices(&self) -> Vec<usize> {
        self.labels.argmax_rows()
    }

    /// Per-sample input shape (without the leading extent).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: self.labels.select_rows(indices),
            class_names: self.class_names.clone(),
            value_range: self.value_range,
        }
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }

    /// First `n` samples (all when `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

pub fn one_hot(classes: &[usize], m: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * m];
    for (i, &c) in classes.iter().enumerate() {
        if c >= m {
            return Err(AtentError::Data(format!("label {c} out of range for {m} classes")));
        }
        data[i * m + c] = 1.0;
    }
    Tensor::new(vec![classes.len(), m], data)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| AtentError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| AtentError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX file, returning declared dims and the payload.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let fail = |detail: String| AtentError::Format {
        kind: "IDX",
        path: path.to_path_buf(),
        detail,
    };
    let got = be_u32(bytes, 0).ok_or_else(|| fail("shorter than the magic number".into()))?;
    if got != magic {
        return Err(fail(format!("magic {got:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for r in 0..rank {
        let d = be_u32(bytes, 4 + 4 * r).ok_or_else(|| fail("truncated header".into()))?;
        dims.push(d as usize);
    }
    let header = 4 + 4 * rank;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(fail(format!(
            "dims {dims:?} need {expected} bytes, file has {}",
            payload.len()
        )));
    }
    Ok((dims, payload))
}

/// Loads an IDX image/label pair (plain or gzip) into a 10-class dataset
/// with pixels scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_all(images_path)?;
    let lbl_bytes = read_all(labels_path)?;
    let (dims, pixels) = parse_idx(&img_bytes, IMAGE_MAGIC, images_path)?;
    let (ldims, labels) = parse_idx(&lbl_bytes, LABEL_MAGIC, labels_path)?;
    if dims[0] != ldims[0] {
        return Err(AtentError::Data(format!(
            "{} images but {} labels",
            dims[0], ldims[0]
        )));
    }
    if dims.contains(&0) {
        return Err(AtentError::Data("empty IDX file".into()));
    }
    let inputs = Tensor::new(
        vec![dims[0], 1, dims[1], dims[2]],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let classes: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let labels = one_hot(&classes, 10)?;
    Dataset::new(inputs, labels, (0..10).map(|d| d.to_string()).collect())
}

/// Writes `ds` as an IDX image/label pair. Pixels are stored as
/// `round(255·v)`, so values on the `k/255` lattice round-trip exactly.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path, gzip: bool) -> Result<()> {
    let n = ds.len();
    let (h, w) = match ds.sample_shape() {
        [1, h, w] | [h, w] => (*h, *w),
        [d] => (1, *d),
        other => {
            return Err(AtentError::Data(format!(
                "cannot store samples of shape {other:?} as IDX images"
            )))
        }
    };
    let mut img = Vec::with_capacity(16 + ds.inputs.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.inputs.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend(ds.class_indices().iter().map(|&c| c as u8));
    write_bytes(images_path, &img, gzip)?;
    write_bytes(labels_path, &lbl, gzip)
}

fn write_bytes(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| AtentError::io(path, e))?;
    let res = if gzip {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut f = file;
        f.write_all(bytes)
    };
    res.map_err(|e| AtentError::io(path, e))
}

/// Keeps the first `cap_per_class` samples of each of two classes, relabels
/// them 0 and 1, then shuffles with `seed`.
pub fn subset_binary(ds: &Dataset, class_a: usize, class_b: usize, cap_per_class: usize, seed: u64) -> Result<Dataset> {
    if class_a == class_b || class_a >= ds.classes() || class_b >= ds.classes() {
        return Err(AtentError::Data(format!(
            "classes {class_a} and {class_b} must be distinct and below {}",
            ds.classes()
        )));
    }
    let mut picked = Vec::new();
    let mut relabel = Vec::new();
    let (mut na, mut nb) = (0, 0);
    for (i, c) in ds.class_indices().into_iter().enumerate() {
        if c == class_a && na < cap_per_class {
            na += 1;
            picked.push(i);
            relabel.push(0);
        } else if c == class_b && nb < cap_per_class {
            nb += 1;
            picked.push(i);
            relabel.push(1);
        }
    }
    if na == 0 || nb == 0 {
        return Err(AtentError::Data(format!(
            "empty class in subset ({class_a}: {na}, {class_b}: {nb})"
        )));
    }
    let mut order: Vec<usize> = (0..picked.len()).collect();
    order.shuffle(&mut rng::derive(seed, &[rng::TAG_DATA]));
    let rows: Vec<usize> = order.iter().map(|&o| picked[o]).collect();
    let classes: Vec<usize> = order.iter().map(|&o| relabel[o]).collect();
    let mut out = Dataset::new(
        ds.inputs.select_rows(&rows),
        one_hot(&classes, 2)?,
        vec![ds.class_names[class_a].clone(), ds.class_names[class_b].clone()],
    )?;
    out.value_range = ds.value_range;
    Ok(out)
}

/// Half-width of the raw window mapped onto `[0, 1]` by the 2D task.
fn synth_half_width(separation: f64) -> f64 {
    separation / 2.0 + 4.0
}

/// Two unit-variance Gaussian blobs centred at `∓separation/2` on the first
/// axis, mapped affinely into `[0, 1]²` (with clamping of far tails).
pub fn synth_two_gaussians(n: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(AtentError::Data(format!("n must be even and positive, got {n}")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(AtentError::Data("separation must be nonnegative".into()));
    }
    let s = synth_half_width(separation);
    let mut r = rng::derive(seed, &[rng::TAG_DATA, 2]);
    let mut inputs = Vec::with_capacity(2 * n);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let centre = if c == 0 { -separation / 2.0 } else { separation / 2.0 };
        let v0 = centre + rng::normal(&mut r);
        let v1 = rng::normal(&mut r);
        inputs.push(((v0 + s) / (2.0 * s)).clamp(0.0, 1.0));
        inputs.push(((v1 + s) / (2.0 * s)).clamp(0.0, 1.0));
        classes.push(c);
    }
    Dataset::new(
        Tensor::new(vec![n, 2], inputs)?,
        one_hot(&classes, 2)?,
        vec!["left".into(), "right".into()],
    )
}

/// Scale factor from raw blob units to the `[0, 1]` coordinates of
/// [`synth_two_gaussians`].
pub fn synth_unit_scale(separation: f64) -> f64 {
    1.0 / (2.0 * synth_half_width(separation))
}

/// Per-epoch shuffled mini-batches; the final short batch is kept.
pub fn batch_iter(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(AtentError::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::derive(seed, &[rng::TAG_SHUFFLE, epoch as u64]));
    Ok(order
        .chunks(batch_size)
        .map(|idx| Batch {
            inputs: ds.inputs.select_rows(idx),
            labels: ds.labels.select_rows(idx),
        })
        .collect())
}

/// Fixed seeded 90/10 split into (train, validation).
pub fn train_val_split(ds: &Dataset) -> Result<(Dataset, Dataset)> {
    let n_val = ((ds.len() as f64) * VALIDATION_FRACTION).round() as usize;
    if n_val == 0 || n_val >= ds.len() {
        return Err(AtentError::Data(format!("{} samples are too few to split", ds.len())));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::derive(SPLIT_SEED, &[rng::TAG_DATA, 90]));
    let (val, train) = order.split_at(n_val);
    Ok((ds.select(train), ds.select(val)))
}

/// `flag`, else `$ATENT_DATA_DIR`, else `./data`.
pub fn data_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(AtentError::Data(format!("no {stem}[.gz] in {}", dir.display())))
}

/// Loads the standard MNIST train and test files from a directory.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist_idx(
        &find_idx(dir, "train-images-idx3-ubyte")?,
        &find_idx(dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_mnist_idx(
        &find_idx(dir, "t10k-images-idx3-ubyte")?,
        &find_idx(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    Ok((train, test))
}
