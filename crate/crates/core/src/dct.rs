//! Whole-image orthonormal DCT-II with zigzag-prefix truncation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::kernels::gemm;
use crate::tensor::Tensor;

/// Row-major `n x n` orthonormal DCT-II basis: `D[k][i] = a(k) cos(π(2i+1)k / 2n)`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    let nf = n as f64;
    for k in 0..n {
        let a = if k == 0 {
            (1.0 / nf).sqrt()
        } else {
            (2.0 / nf).sqrt()
        };
        for i in 0..n {
            d[k * n + i] = a * (PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos();
        }
    }
    d
}

fn plane(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] => Ok((h, w)),
        [1, 1, h, w] => Ok((h, w)),
        ref s => Err(dim_err(format!("expected an H x W image, got {s:?}"))),
    }
}

/// `A · X · Bᵀ` or `Aᵀ · X · B` for square bases `A` (h x h) and `B` (w x w).
fn separable(x: &[f64], h: usize, w: usize, a: &[f64], b: &[f64], inverse: bool) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    gemm(h, h, w, a, inverse, x, false, 0.0, &mut tmp);
    let mut out = vec![0.0; h * w];
    gemm(h, w, w, &tmp, false, b, !inverse, 0.0, &mut out);
    out
}

/// Forward transform of an `[H, W]` (or `[1, 1, H, W]`) image; returns `[H, W]`.
pub fn dct2(x: &Tensor) -> Result<Tensor> {
    let (h, w) = plane(x)?;
    let out = separable(x.data(), h, w, &dct_matrix(h), &dct_matrix(w), false);
    Tensor::new(vec![h, w], out)
}

/// Exact inverse of [`dct2`].
pub fn idct2(c: &Tensor) -> Result<Tensor> {
    let (h, w) = plane(c)?;
    let out = separable(c.data(), h, w, &dct_matrix(h), &dct_matrix(w), true);
    Tensor::new(vec![h, w], out)
}

/// JPEG scan order: anti-diagonals from the top-left corner, moving down
/// the diagonal on odd sums and up on even ones.
pub fn zigzag_indices(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(h * w);
    if h == 0 || w == 0 {
        return out;
    }
    for s in 0..h + w - 1 {
        let lo = s.saturating_sub(w - 1);
        let hi = s.min(h - 1);
        if s % 2 == 1 {
            out.extend((lo..=hi).map(|r| (r, s - r)));
        } else {
            out.extend((lo..=hi).rev().map(|r| (r, s - r)));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DctCode {
    pub height: usize,
    pub width: usize,
    /// The first `k` coefficients in zigzag order.
    pub coefficients: Vec<f64>,
}

impl DctCode {
    pub fn k(&self) -> usize {
        self.coefficients.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("DCT1 {} {} {}\n", self.height, self.width, self.k());
        for c in &self.coefficients {
            writeln!(s, "{c}").expect("writing to a String");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let fail = |offset: usize, reason: String| Error::Format {
            what: "dct code".into(),
            offset: offset as u64,
            reason,
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
        let dims: Option<Vec<usize>> = match header.as_slice() {
            ["DCT1", rest @ ..] if rest.len() == 3 => rest.iter().map(|v| v.parse().ok()).collect(),
            _ => None,
        };
        let Some([height, width, k]) = dims.as_deref().map(|d| [d[0], d[1], d[2]]) else {
            return Err(fail(0, "header must read \"DCT1 H W k\"".into()));
        };
        let coefficients = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| fail(i + 2, format!("bad coefficient {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if coefficients.len() != k {
            return Err(fail(
                0,
                format!(
                    "header declares {k} coefficients, found {}",
                    coefficients.len()
                ),
            ));
        }
        check_k(height, width, k).map_err(|e| fail(0, e.to_string()))?;
        Ok(DctCode {
            height,
            width,
            coefficients,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn check_k(h: usize, w: usize, k: usize) -> Result<()> {
    if k == 0 || k > h * w {
        return Err(Error::Domain(format!(
            "k must be in 1..={} for a {h}x{w} image, got {k}",
            h * w
        )));
    }
    Ok(())
}

/// Keep the first `k` zigzag-ordered coefficients of `dct2(x)`.
pub fn encode_topk(x: &Tensor, k: usize) -> Result<DctCode> {
    Truncation::new(x)?.encode(k)
}

/// Zero-fill the missing coefficients and invert; returns `[H, W]`.
pub fn decode_topk(code: &DctCode) -> Result<Tensor> {
    let (h, w) = (code.height, code.width);
    check_k(h, w, code.k())?;
    let mut c = vec![0.0; h * w];
    for (&v, (r, col)) in code.coefficients.iter().zip(zigzag_indices(h, w)) {
        c[r * w + col] = v;
    }
    idct2(&Tensor::new(vec![h, w], c)?)
}

/// One forward transform reused across many truncation lengths.
pub struct Truncation {
    height: usize,
    width: usize,
    original: Vec<f64>,
    zigzag_coefficients: Vec<f64>,
}

impl Truncation {
    pub fn new(x: &Tensor) -> Result<Self> {
        let (h, w) = plane(x)?;
        let c = dct2(x)?;
        let zigzag_coefficients = zigzag_indices(h, w)
            .into_iter()
            .map(|(r, col)| c.data()[r * w + col])
            .collect();
        Ok(Truncation {
            height: h,
            width: w,
            original: x.data().to_vec(),
            zigzag_coefficients,
        })
    }

    pub fn len(&self) -> usize {
        self.zigzag_coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zigzag_coefficients.is_empty()
    }

    pub fn encode(&self, k: usize) -> Result<DctCode> {
        check_k(self.height, self.width, k)?;
        Ok(DctCode {
            height: self.height,
            width: self.width,
            coefficients: self.zigzag_coefficients[..k].to_vec(),
        })
    }

    /// Mean absolute reconstruction error with `k` coefficients kept.
    pub fn l1(&self, k: usize) -> Result<f64> {
        let rec = decode_topk(&self.encode(k)?)?;
        let n = self.original.len() as f64;
        Ok(self
            .original
            .iter()
            .zip(rec.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    /// Smallest `k` whose reconstruction L1 is at most `target`, found by
    /// bisection. Returns `(H·W, its L1)` when no prefix reaches the target.
    pub fn smallest_k_for_l1(&self, target: f64) -> Result<(usize, f64)> {
        let n = self.len();
        let full = self.l1(n)?;
        if full > target {
            return Ok((n, full));
        }
        let (mut lo, mut hi, mut best) = (1usize, n, full);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let e = self.l1(mid)?;
            if e <= target {
                hi = mid;
                best = e;
            } else {
                lo = mid + 1;
            }
        }
        if hi == n {
            best = full;
        }
        Ok((hi, best))
    }
}
