//! Grayscale image files (binary PGM and PNG) and tensor conversions.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height || width == 0 || height == 0 {
            return Err(dim_err(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Gray {
            width,
            height,
            pixels,
        })
    }

    /// Clamp to `[0, 1]` and quantize; accepts `[H, W]` or `[1, 1, H, W]`.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [1, 1, h, w] => (h, w),
            ref s => return Err(dim_err(format!("cannot view {s:?} as one image"))),
        };
        let pixels = t
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Gray::new(w, h, pixels)
    }

    /// `[1, 1, H, W]` with values `pixel / 255`.
    pub fn to_unit_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(vec![1, 1, self.height, self.width], data).expect("validated extents")
    }

    fn ensure_dir(path: &Path) -> Result<()> {
        match path.parent().filter(|d| !d.as_os_str().is_empty()) {
            Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
            None => Ok(()),
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        Self::ensure_dir(path)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let enc = PnmEncoder::new(BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
        enc.write_image(
            &self.pixels,
            self.width as u32,
            self.height as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| encode_err(path, e))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        Self::ensure_dir(path)?;
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("validated extents");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| encode_err(path, e))
    }

    /// Read any PGM or PNG, converting to 8-bit luma.
    pub fn read(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                what: path.display().to_string(),
                offset: 0,
                reason: other.to_string(),
            },
        })?;
        let g = img.to_luma8();
        Gray::new(g.width() as usize, g.height() as usize, g.into_raw())
    }
}

fn encode_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    }
}

/// Tile equally sized images into rows of `cols`, separated by `pad` pixels
/// of `background`.
pub fn tile(images: &[Gray], cols: usize, pad: usize, background: u8) -> Result<Gray> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("nothing to tile".into()))?;
    let (w, h) = (first.width, first.height);
    if images.iter().any(|g| g.width != w || g.height != h) || cols == 0 {
        return Err(dim_err("tiles must share one size"));
    }
    let rows = images.len().div_ceil(cols);
    let (tw, th) = (cols * w + (cols + 1) * pad, rows * h + (rows + 1) * pad);
    let mut pixels = vec![background; tw * th];
    for (i, g) in images.iter().enumerate() {
        let (ox, oy) = (pad + (i % cols) * (w + pad), pad + (i / cols) * (h + pad));
        for r in 0..h {
            let dst = (oy + r) * tw + ox;
            pixels[dst..dst + w].copy_from_slice(&g.pixels[r * w..(r + 1) * w]);
        }
    }
    Gray::new(tw, th, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_and_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Gray::new(3, 2, vec![0, 255, 7, 128, 0, 255]).unwrap();
        for name in ["a.pgm", "nested/b.png"] {
            let p = dir.path().join(name);
            if name.ends_with("pgm") {
                g.write_pgm(&p).unwrap();
            } else {
                g.write_png(&p).unwrap();
            }
            assert_eq!(Gray::read(&p).unwrap(), g);
        }
        let raw = std::fs::read(dir.path().join("a.pgm")).unwrap();
        assert!(raw.starts_with(b"P5"));
    }

    #[test]
    fn tensor_conversion_clamps() {
        let t = Tensor::new(vec![1, 3], vec![-0.5, 0.5, 2.0]).unwrap();
        let g = Gray::from_unit_tensor(&t).unwrap();
        assert_eq!(g.pixels, vec![0, 128, 255]);
        assert_eq!(g.to_unit_tensor().shape(), &[1, 1, 1, 3]);
        assert!(Gray::from_unit_tensor(&Tensor::zeros(&[2, 1, 2, 2])).is_err());
    }

    #[test]
    fn tiling_layout() {
        let a = Gray::new(2, 1, vec![1, 2]).unwrap();
        let b = Gray::new(2, 1, vec![3, 4]).unwrap();
        let t = tile(&[a.clone(), b, a], 2, 1, 9).unwrap();
        assert_eq!((t.width, t.height), (7, 5));
        assert_eq!(&t.pixels[7..14], &[9, 1, 2, 9, 3, 4, 9]);
        assert_eq!(&t.pixels[21..28], &[9, 1, 2, 9, 9, 9, 9]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = Gray::read(Path::new("/nonexistent/x.pgm")).unwrap_err();
        assert_eq!(e.category(), "io");
    }
}
