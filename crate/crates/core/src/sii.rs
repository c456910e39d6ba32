//! Savonius-rotor shape illustration images.
//!
//! Each image shows two congruent parabolic blades, the second being the
//! first rotated 180° about the image center. Blade one is the arc over the
//! chord from `(x1, y1)` to `(x1 + l, y1)` whose sagitta is `h1/1000` of
//! the half chord, bulging towards +y. Arcs are stroked with a width of
//! `resolution / 64` pixels (at least one) inside the world window
//! `[-700, 700]²`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Gray;
use crate::tensor::Tensor;

pub const WORLD_HALF: f64 = 700.0;
pub const MIN_RESOLUTION: usize = 32;
pub const DEFAULT_RESOLUTION: usize = 512;
pub const TEST_FRACTION: f64 = 1.0 / 7.0;
/// Polyline segments used to approximate each arc.
const ARC_SEGMENTS: usize = 512;

pub const H1_VALUES: (i32, i32, i32) = (100, 1000, 25);
pub const L_VALUES: (i32, i32, i32) = (400, 600, 25);
pub const XY_VALUES: (i32, i32, i32) = (-100, 100, 25);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RotorParams {
    pub h1: i32,
    pub l: i32,
    pub x1: i32,
    pub y1: i32,
}

fn grid((lo, hi, step): (i32, i32, i32)) -> impl Iterator<Item = i32> + Clone {
    (lo..=hi).step_by(step as usize)
}

/// Full parameter grid, `h1` outermost and `y1` innermost.
pub fn enumerate_params() -> Vec<RotorParams> {
    let mut out = Vec::with_capacity(26973);
    for h1 in grid(H1_VALUES) {
        for l in grid(L_VALUES) {
            for x1 in grid(XY_VALUES) {
                for y1 in grid(XY_VALUES) {
                    out.push(RotorParams { h1, l, x1, y1 });
                }
            }
        }
    }
    out
}

/// A strictly binary square image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiiImage {
    pub resolution: usize,
    /// Row-major, each 0 or 1.
    pub pixels: Vec<u8>,
    pub params: RotorParams,
}

impl SiiImage {
    pub fn foreground_fraction(&self) -> f64 {
        self.pixels.iter().map(|&p| p as usize).sum::<usize>() as f64 / self.pixels.len() as f64
    }

    /// `[1, 1, R, R]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        let r = self.resolution;
        Tensor::new(
            vec![1, 1, r, r],
            self.pixels.iter().map(|&p| p as f64).collect(),
        )
        .expect("square image")
    }

    pub fn to_gray(&self) -> Gray {
        let px = self.pixels.iter().map(|&p| p * 255).collect();
        Gray::new(self.resolution, self.resolution, px).expect("square image")
    }

    /// Pixels at or above half intensity are foreground.
    pub fn from_gray(g: &Gray, params: RotorParams) -> Result<Self> {
        if g.width != g.height {
            return Err(Error::Dimension(format!(
                "SII images are square, got {}x{}",
                g.width, g.height
            )));
        }
        Ok(SiiImage {
            resolution: g.width,
            pixels: g.pixels.iter().map(|&p| (p >= 128) as u8).collect(),
            params,
        })
    }

    /// Rotate by 180° about the center.
    pub fn rotated(&self) -> SiiImage {
        let mut pixels = self.pixels.clone();
        pixels.reverse();
        SiiImage { pixels, ..*self }
    }
}

fn arc_points(p: RotorParams) -> Vec<(f64, f64)> {
    let (ax, ay) = (p.x1 as f64, p.y1 as f64);
    let l = p.l as f64;
    let sagitta = p.h1 as f64 / 1000.0 * (l / 2.0);
    (0..=ARC_SEGMENTS)
        .map(|i| {
            let u = i as f64 / ARC_SEGMENTS as f64;
            (ax + u * l, ay + 4.0 * sagitta * u * (1.0 - u))
        })
        .collect()
}

fn segment_distance2(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
    qx * qx + qy * qy
}

/// Mask of blade one alone.
pub fn rasterize_blade(params: RotorParams, resolution: usize) -> Result<Vec<u8>> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::Config(format!(
            "SII resolution must be at least {MIN_RESOLUTION}, got {resolution}"
        )));
    }
    let r = resolution as f64;
    let cell = 2.0 * WORLD_HALF / r;
    // At least one pixel wide, so every column or row the arc crosses is hit.
    let half_width = (WORLD_HALF / 64.0).max(cell / 2.0);
    let hw2 = half_width * half_width;
    let col_of = |x: f64| (x + WORLD_HALF) / cell - 0.5;
    let row_of = |y: f64| (WORLD_HALF - y) / cell - 0.5;
    let clamp_idx = |v: f64| v.clamp(0.0, r - 1.0) as usize;

    let mut mask = vec![0u8; resolution * resolution];
    let pts = arc_points(params);
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let (x0, x1) = (a.0.min(b.0) - half_width, a.0.max(b.0) + half_width);
        let (y0, y1) = (a.1.min(b.1) - half_width, a.1.max(b.1) + half_width);
        if x1 < -WORLD_HALF || x0 > WORLD_HALF || y1 < -WORLD_HALF || y0 > WORLD_HALF {
            continue;
        }
        let (c0, c1) = (clamp_idx(col_of(x0).floor()), clamp_idx(col_of(x1).ceil()));
        let (r0, r1) = (clamp_idx(row_of(y1).floor()), clamp_idx(row_of(y0).ceil()));
        for row in r0..=r1 {
            let wy = WORLD_HALF - (row as f64 + 0.5) * cell;
            for col in c0..=c1 {
                let wx = -WORLD_HALF + (col as f64 + 0.5) * cell;
                if segment_distance2(wx, wy, a, b) <= hw2 {
                    mask[row * resolution + col] = 1;
                }
            }
        }
    }
    if !mask.contains(&1) {
        return Err(Error::Generation(format!(
            "blade for {params:?} lies outside the drawing window"
        )));
    }
    Ok(mask)
}

/// Both blades. The second is drawn by reading blade one's mask at the
/// 180°-rotated pixel, so the image is exactly point-symmetric.
pub fn rasterize(params: RotorParams, resolution: usize) -> Result<SiiImage> {
    let blade = rasterize_blade(params, resolution)?;
    let n = blade.len();
    let pixels: Vec<u8> = (0..n).map(|i| blade[i] | blade[n - 1 - i]).collect();
    if !pixels.contains(&0) {
        return Err(Error::Generation(format!(
            "rotor {params:?} covers the whole image"
        )));
    }
    Ok(SiiImage {
        resolution,
        pixels,
        params,
    })
}

/// Block-majority downsampling; ties count as foreground.
pub fn downscale(img: &SiiImage, target: usize) -> Result<SiiImage> {
    let r = img.resolution;
    if target == 0 || !r.is_multiple_of(target) {
        return Err(Error::Config(format!(
            "downscale target {target} must divide resolution {r}"
        )));
    }
    let f = r / target;
    let area = f * f;
    let mut pixels = vec![0u8; target * target];
    for (i, out) in pixels.iter_mut().enumerate() {
        let (tr, tc) = (i / target, i % target);
        let mut count = 0;
        for dr in 0..f {
            let row = &img.pixels[(tr * f + dr) * r + tc * f..][..f];
            count += row.iter().map(|&p| p as usize).sum::<usize>();
        }
        *out = (2 * count >= area) as u8;
    }
    Ok(SiiImage {
        resolution: target,
        pixels,
        params: img.params,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One draw per image, in enumeration order.
pub fn assign_splits(count: usize, split_seed: u64) -> Vec<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    (0..count)
        .map(|_| {
            if rng.random::<f64>() < TEST_FRACTION {
                Split::Test
            } else {
                Split::Train
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub h1: i32,
    pub l: i32,
    pub x1: i32,
    pub y1: i32,
    pub split: Split,
    /// Relative to the dataset directory.
    pub path: String,
}

impl ManifestEntry {
    pub fn params(&self) -> RotorParams {
        RotorParams {
            h1: self.h1,
            l: self.l,
            x1: self.x1,
            y1: self.y1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub mean: f64,
    pub std: f64,
    pub resolution: usize,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub stats: PixelStats,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.tsv";
    pub const STATS: &'static str = "stats.json";

    pub fn test_fraction(&self) -> f64 {
        let test = self
            .entries
            .iter()
            .filter(|e| e.split == Split::Test)
            .count();
        test as f64 / self.entries.len() as f64
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_path(&path)
            .map_err(|e| csv_err(&path, e))?;
        let entries = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| csv_err(&path, e))?;
        let stats_path = dir.join(Self::STATS);
        let text = fs::read_to_string(&stats_path).map_err(|e| Error::io(&stats_path, e))?;
        let stats = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: stats_path.display().to_string(),
            offset: 0,
            reason: e.to_string(),
        })?;
        Ok(Manifest { entries, stats })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE);
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .from_path(&path)
            .map_err(|e| csv_err(&path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let stats_path = dir.join(Self::STATS);
        let json = serde_json::to_string_pretty(&self.stats).expect("plain struct");
        fs::write(&stats_path, json + "\n").map_err(|e| Error::io(&stats_path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            what: path.display().to_string(),
            offset,
            reason: format!("{other:?}"),
        },
    }
}

/// Render every rotor (or the first `limit`) into `out_dir`, assign splits,
/// and record training-split pixel statistics.
pub fn generate_dataset(
    resolution: usize,
    split_seed: u64,
    out_dir: &Path,
    limit: Option<usize>,
) -> Result<Manifest> {
    let mut params = enumerate_params();
    let splits = assign_splits(params.len(), split_seed);
    if let Some(n) = limit {
        params.truncate(n);
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let (mut sum, mut sum2, mut count) = (0.0f64, 0.0f64, 0usize);
    let mut entries = Vec::with_capacity(params.len());
    for (index, (p, split)) in params.iter().zip(&splits).enumerate() {
        let img = rasterize(*p, resolution)?;
        let rel: PathBuf = ["images", &format!("{index}.pgm")].iter().collect();
        img.to_gray().write_pgm(&out_dir.join(&rel))?;
        if *split == Split::Train {
            let fg = img.pixels.iter().map(|&v| v as usize).sum::<usize>() as f64;
            sum += fg;
            sum2 += fg;
            count += img.pixels.len();
        }
        entries.push(ManifestEntry {
            index,
            h1: p.h1,
            l: p.l,
            x1: p.x1,
            y1: p.y1,
            split: *split,
            path: rel.to_string_lossy().replace('\\', "/"),
        });
    }
    let (mean, std) = if count > 0 {
        let mean = sum / count as f64;
        (mean, (sum2 / count as f64 - mean * mean).max(0.0).sqrt())
    } else {
        (0.0, 1.0)
    };
    let manifest = Manifest {
        entries,
        stats: PixelStats {
            mean,
            std,
            resolution,
            split_seed,
        },
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}
