//! Dataset loading: MNIST IDX files (optionally gzipped), high-resolution
//! binarized MNIST, and generated SII directories.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::imageio::Gray;
use crate::sii::{downscale, Manifest, SiiImage, Split};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const MNIST_SIDE: usize = 28;
pub const BINARIZE_THRESHOLD: f64 = 127.5;

/// Raw 8-bit images from an IDX3 file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

/// File contents, transparently gunzipped when they start with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                what: path.display().to_string(),
                offset: 0,
                reason: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_header(bytes: &[u8], what: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let fail = |offset: usize, reason: String| Error::Format {
        what: what.display().to_string(),
        offset: offset as u64,
        reason,
    };
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| fail(bytes.len(), "truncated header".into()))
    };
    let found = word(0)?;
    if found != magic {
        return Err(fail(0, format!("magic {found}, expected {magic}")));
    }
    let shape = (1..=dims)
        .map(|i| word(i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 * (dims + 1);
    let expected = shape.iter().product::<usize>();
    if bytes.len() - header < expected {
        return Err(fail(
            bytes.len(),
            format!(
                "truncated: {} of {expected} payload bytes",
                bytes.len() - header
            ),
        ));
    }
    if bytes.len() - header > expected {
        return Err(fail(header + expected, "trailing bytes".into()));
    }
    Ok(shape)
}

pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    let bytes = read_maybe_gz(path)?;
    let s = idx_header(&bytes, path, IDX_IMAGES_MAGIC, 3)?;
    Ok(IdxImages {
        count: s[0],
        rows: s[1],
        cols: s[2],
        pixels: bytes[16..].to_vec(),
    })
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    idx_header(&bytes, path, IDX_LABELS_MAGIC, 1)?;
    Ok(bytes[8..].to_vec())
}

/// `dir/name` or `dir/name.gz`, whichever exists.
fn locate(dir: &Path, name: &str) -> Result<PathBuf> {
    for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::io(
        dir.join(name),
        std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file (or .gz) not found"),
    ))
}

/// A batch of single-channel images with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    /// `[N, 1, R, R]`.
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Option<Vec<usize>>)> {
        let x = self.images.batch_gather(indices)?;
        let y = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok((x, y))
    }

    fn from_planes(planes: Vec<Vec<f64>>, side: usize, labels: Option<Vec<usize>>) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::Config("dataset split is empty".into()));
        }
        let n = planes.len();
        let data = planes.concat();
        Ok(ImageSet {
            images: Tensor::new(vec![n, 1, side, side], data)?,
            labels,
        })
    }
}

/// Train/test pair with training-split pixel statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: ImageSet,
    pub test: ImageSet,
    pub mean: f64,
    pub std: f64,
}

impl Dataset {
    fn new(train: ImageSet, test: ImageSet) -> Self {
        let (mean, std) = pixel_stats(&train.images);
        Dataset {
            train,
            test,
            mean,
            std,
        }
    }
}

/// Mean and (population) standard deviation over every pixel; the std
/// falls back to 1 for constant data.
pub fn pixel_stats(x: &Tensor) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x
        .data()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

/// Limits on the number of images taken from each split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Subset {
    pub train: Option<usize>,
    pub test: Option<usize>,
}

fn load_mnist_split(
    dir: &Path,
    prefix: &str,
    limit: Option<usize>,
) -> Result<(IdxImages, Vec<u8>)> {
    let images = load_idx_images(&locate(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = load_idx_labels(&locate(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    if labels.len() != images.count {
        return Err(Error::Format {
            what: dir.display().to_string(),
            offset: 0,
            reason: format!("{} images but {} labels", images.count, labels.len()),
        });
    }
    if images.rows != MNIST_SIDE || images.cols != MNIST_SIDE {
        return Err(dim_err(format!(
            "MNIST images must be 28x28, got {}x{}",
            images.rows, images.cols
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Format {
            what: dir.display().to_string(),
            offset: 0,
            reason: format!("label {bad} outside 0..9"),
        });
    }
    let n = limit.map_or(images.count, |l| l.min(images.count));
    let side2 = MNIST_SIDE * MNIST_SIDE;
    Ok((
        IdxImages {
            count: n,
            pixels: images.pixels[..n * side2].to_vec(),
            ..images
        },
        labels[..n].to_vec(),
    ))
}

fn mnist_with(
    dir: &Path,
    subset: Subset,
    map: impl Fn(&[u8]) -> Vec<f64>,
    side: usize,
) -> Result<Dataset> {
    let mut splits = Vec::with_capacity(2);
    for (prefix, limit) in [("train", subset.train), ("t10k", subset.test)] {
        let (images, labels) = load_mnist_split(dir, prefix, limit)?;
        let planes = (0..images.count).map(|i| map(images.image(i))).collect();
        let labels = labels.into_iter().map(usize::from).collect();
        splits.push(ImageSet::from_planes(planes, side, Some(labels))?);
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(Dataset::new(train, test))
}

/// MNIST at 28², pixel values scaled to `[0, 1]`. Takes the first `n`
/// images of each split when limited.
pub fn load_mnist(dir: &Path, subset: Subset) -> Result<Dataset> {
    mnist_with(
        dir,
        subset,
        |img| img.iter().map(|&p| p as f64 / 255.0).collect(),
        MNIST_SIDE,
    )
}

/// MNIST upscaled bilinearly to `target²` and binarized.
pub fn load_mnist_hires(dir: &Path, target: usize, subset: Subset) -> Result<Dataset> {
    if target < MNIST_SIDE {
        return Err(Error::Config(format!(
            "upscale target {target} is below 28"
        )));
    }
    mnist_with(
        dir,
        subset,
        |img| {
            upscale_binarize(img, MNIST_SIDE, target)
                .into_iter()
                .map(f64::from)
                .collect()
        },
        target,
    )
}

/// Bilinear resize of a `side²` 0–255 image to `target²` (pixel-center
/// aligned, edge-clamped), then `> 127.5` becomes 1.
pub fn upscale_binarize(img: &[u8], side: usize, target: usize) -> Vec<u8> {
    let scale = side as f64 / target as f64;
    let last = (side - 1) as f64;
    let coord = |d: usize| {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(side - 1), s - i0 as f64)
    };
    let axis: Vec<_> = (0..target).map(coord).collect();
    let at = |r: usize, c: usize| img[r * side + c] as f64;
    let mut out = Vec::with_capacity(target * target);
    for &(r0, r1, fr) in &axis {
        for &(c0, c1, fc) in &axis {
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
            let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
            let v = top * (1.0 - fr) + bottom * fr;
            out.push((v > BINARIZE_THRESHOLD) as u8);
        }
    }
    out
}

pub fn normalize(x: &Tensor, mean: f64, std: f64) -> Result<Tensor> {
    check_std(std)?;
    Ok(x.map(|v| (v - mean) / std))
}

pub fn denormalize(x: &Tensor, mean: f64, std: f64) -> Result<Tensor> {
    check_std(std)?;
    Ok(x.map(|v| v * std + mean))
}

fn check_std(std: f64) -> Result<()> {
    if std > 0.0 && std.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("std must be positive, got {std}")))
    }
}

/// Generated SII dataset, downscaled to `resolution`. When limited, each
/// split is a seeded random subset of its images.
pub fn load_sii(dir: &Path, resolution: usize, subset: Subset, seed: u64) -> Result<Dataset> {
    let manifest = Manifest::load(dir)?;
    let mut splits = Vec::with_capacity(2);
    for (which, limit, stream) in [
        (Split::Train, subset.train, 1u64),
        (Split::Test, subset.test, 2),
    ] {
        let mut entries: Vec<_> = manifest
            .entries
            .iter()
            .filter(|e| e.split == which)
            .collect();
        if let Some(n) = limit {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            entries.shuffle(&mut rng);
            entries.truncate(n);
            entries.sort_by_key(|e| e.index);
        }
        let planes = entries
            .iter()
            .map(|e| {
                let g = Gray::read(&dir.join(&e.path))?;
                let img = SiiImage::from_gray(&g, e.params())?;
                let img = downscale(&img, resolution)?;
                Ok(img.pixels.iter().map(|&p| p as f64).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        splits.push(ImageSet::from_planes(planes, resolution, None)?);
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(Dataset::new(train, test))
}
