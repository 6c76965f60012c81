//! Frequency-aware transform: orthonormal 2-D DCT-II, a triangular
//! high-pass mask over the low-frequency corner, then the inverse DCT.
//!
//! The DCT is computed as a pair of matrix products with the orthonormal
//! basis, so `idct2(dct2(x)) == x` up to rounding and Parseval holds.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Default fraction of the anti-diagonal whose top-left triangle is zeroed.
pub const DEFAULT_CUTOFF: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HighPassSpec {
    cutoff_fraction: f64,
}

impl HighPassSpec {
    pub fn new(cutoff_fraction: f64) -> Result<Self> {
        if !(cutoff_fraction > 0.0 && cutoff_fraction < 1.0) {
            return Err(Error::Config(format!(
                "high-pass cutoff fraction must lie in (0, 1), got {cutoff_fraction}"
            )));
        }
        Ok(Self { cutoff_fraction })
    }

    pub fn cutoff_fraction(&self) -> f64 {
        self.cutoff_fraction
    }

    /// True when coefficient `(u, v)` of an `h×w` spectrum is zeroed.
    pub fn is_masked(&self, u: usize, v: usize, h: usize, w: usize) -> bool {
        (u as f64) / (h as f64) + (v as f64) / (w as f64) < self.cutoff_fraction
    }
}

impl Default for HighPassSpec {
    fn default() -> Self {
        Self { cutoff_fraction: DEFAULT_CUTOFF }
    }
}

/// Orthonormal DCT-II basis, `C[k][i] = a(k) cos(pi (2i+1) k / 2n)`.
pub fn dct_matrix(n: usize) -> Tensor {
    let mut c = Tensor::zeros(&[n, n]);
    let nf = n as f64;
    for k in 0..n {
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            c.set(&[k, i], a * (PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos());
        }
    }
    c
}

fn check_2d(x: &Tensor, op: &str) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::Dimension(format!("{op} expects an H×W tensor, got {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1)))
}

/// Precomputed bases for repeated transforms of one image size.
#[derive(Debug, Clone)]
pub struct Dct2 {
    rows: Tensor,
    rows_t: Tensor,
    cols: Tensor,
    cols_t: Tensor,
}

impl Dct2 {
    pub fn new(h: usize, w: usize) -> Self {
        let rows = dct_matrix(h);
        let cols = dct_matrix(w);
        Self {
            rows_t: rows.transpose().expect("square"),
            cols_t: cols.transpose().expect("square"),
            rows,
            cols,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        matmul(&matmul(&self.rows, x)?, &self.cols_t)
    }

    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        matmul(&matmul(&self.rows_t, x)?, &self.cols)
    }
}

pub fn dct2(x: &Tensor) -> Result<Tensor> {
    let (h, w) = check_2d(x, "dct2")?;
    Dct2::new(h, w).forward(x)
}

pub fn idct2(x: &Tensor) -> Result<Tensor> {
    let (h, w) = check_2d(x, "idct2")?;
    Dct2::new(h, w).inverse(x)
}

/// Zero the masked low-frequency triangle of an `H×W` spectrum in place.
pub fn apply_high_pass(spectrum: &mut Tensor, spec: &HighPassSpec) {
    let (h, w) = (spectrum.dim(0), spectrum.dim(1));
    let data = spectrum.data_mut();
    for u in 0..h {
        for v in 0..w {
            if spec.is_masked(u, v, h, w) {
                data[u * w + v] = 0.0;
            }
        }
    }
}

/// Per-channel `idct2(mask(dct2(x)))` of a `C×H×W` image.
pub fn frequency_transform(x: &Tensor, spec: &HighPassSpec) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Dimension(format!(
            "frequency_transform expects C×H×W, got {:?}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    FrequencyTransform::new(h, w, *spec).apply(x).map(|t| {
        debug_assert_eq!(t.shape(), &[c, h, w]);
        t
    })
}

/// Reusable transform for a fixed image size.
#[derive(Debug, Clone)]
pub struct FrequencyTransform {
    dct: Dct2,
    spec: HighPassSpec,
    h: usize,
    w: usize,
}

impl FrequencyTransform {
    pub fn new(h: usize, w: usize, spec: HighPassSpec) -> Self {
        Self { dct: Dct2::new(h, w), spec, h, w }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 || x.dim(1) != self.h || x.dim(2) != self.w {
            return Err(Error::Dimension(format!(
                "frequency transform built for {}x{}, got {:?}",
                self.h,
                self.w,
                x.shape()
            )));
        }
        let plane = self.h * self.w;
        let mut out = Vec::with_capacity(x.len());
        for ch in x.data().chunks(plane) {
            let img = Tensor::new(vec![self.h, self.w], ch.to_vec())?;
            let mut spec = self.dct.forward(&img)?;
            apply_high_pass(&mut spec, &self.spec);
            out.extend(self.dct.inverse(&spec)?.into_data());
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Transform every image of an `N×C×H×W` batch.
    pub fn apply_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 {
            return Err(Error::Dimension(format!("expected N×C×H×W, got {:?}", x.shape())));
        }
        let per = x.len() / x.dim(0);
        let mut out = Vec::with_capacity(x.len());
        for img in x.data().chunks(per) {
            let t = Tensor::new(x.shape()[1..].to_vec(), img.to_vec())?;
            out.extend(self.apply(&t)?.into_data());
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct definition of the orthonormal 2-D DCT-II.
    fn dct2_definition(x: &Tensor) -> Tensor {
        let (h, w) = (x.dim(0), x.dim(1));
        let a = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        let mut out = Tensor::zeros(&[h, w]);
        for u in 0..h {
            for v in 0..w {
                let mut s = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        s += x.get(&[i, j])
                            * (PI * (2 * i + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                            * (PI * (2 * j + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                    }
                }
                out.set(&[u, v], a(u, h) * a(v, w) * s);
            }
        }
        out
    }

    #[test]
    fn constant_image_is_dc_only() {
        let (h, w, c) = (4, 6, 0.7);
        let s = dct2(&Tensor::full(&[h, w], c)).unwrap();
        assert!((s.get(&[0, 0]) - c * ((h * w) as f64).sqrt()).abs() < 1e-12);
        let rest: f64 = s.data()[1..].iter().map(|v| v.abs()).sum();
        assert!(rest < 1e-12);
        assert_eq!(dct2(&Tensor::zeros(&[3, 3])).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn dct2_matches_definition_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[8, 8], &mut rng);
        let d = dct2(&x).unwrap().max_abs_diff(&dct2_definition(&x)).unwrap();
        assert!(d < 1e-10, "{d}");
        let y = Tensor::randn(&[5, 7], &mut rng);
        assert!(dct2(&y).unwrap().max_abs_diff(&dct2_definition(&y)).unwrap() < 1e-10);
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[16, 16], &mut rng);
        let s = dct2(&x).unwrap();
        assert!((s.l2_norm() - x.l2_norm()).abs() < 1e-9);
        assert!(idct2(&s).unwrap().max_abs_diff(&x).unwrap() < 1e-9);
    }

    #[test]
    fn inverse_special_cases() {
        assert_eq!(idct2(&Tensor::zeros(&[4, 4])).unwrap().max_abs(), 0.0);
        let (h, w) = (4, 5);
        let mut s = Tensor::zeros(&[h, w]);
        s.set(&[0, 0], ((h * w) as f64).sqrt());
        let img = idct2(&s).unwrap();
        assert!(img.max_abs_diff(&Tensor::ones(&[h, w])).unwrap() < 1e-12);
    }

    #[test]
    fn constant_image_filters_to_zero() {
        let spec = HighPassSpec::default();
        let y = frequency_transform(&Tensor::full(&[3, 8, 8], 0.4), &spec).unwrap();
        assert!(y.max_abs() < 1e-12);
    }

    #[test]
    fn tiny_cutoff_only_removes_mean() {
        // With a vanishing cutoff only the DC coefficient is masked, so a
        // zero-mean channel passes through untouched.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut x = Tensor::randn(&[2, 8, 8], &mut rng);
        for ch in x.data_mut().chunks_mut(64) {
            let m = ch.iter().sum::<f64>() / 64.0;
            ch.iter_mut().for_each(|v| *v -= m);
        }
        let spec = HighPassSpec::new(1e-12).unwrap();
        let y = frequency_transform(&x, &spec).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-9);
    }

    #[test]
    fn output_spectrum_vanishes_on_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::randn(&[3, 32, 32], &mut rng);
        let spec = HighPassSpec::default();
        let y = frequency_transform(&x, &spec).unwrap();
        assert_eq!(y.shape(), x.shape());
        let mut masked = 0;
        for ch in y.data().chunks(32 * 32) {
            let s = dct2(&Tensor::new(vec![32, 32], ch.to_vec()).unwrap()).unwrap();
            for u in 0..32 {
                for v in 0..32 {
                    if spec.is_masked(u, v, 32, 32) {
                        masked += 1;
                        assert!(s.get(&[u, v]).abs() < 1e-9);
                    }
                }
            }
        }
        assert!(masked > 0);
    }

    #[test]
    fn spec_rejects_out_of_range() {
        for bad in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(HighPassSpec::new(bad).is_err());
        }
    }

    #[test]
    fn mask_matches_triangle_rule() {
        let spec = HighPassSpec::new(0.5).unwrap();
        assert!(spec.is_masked(0, 0, 8, 8));
        assert!(spec.is_masked(3, 0, 8, 8));
        assert!(!spec.is_masked(4, 0, 8, 8));
        assert!(spec.is_masked(1, 2, 8, 8));
        assert!(!spec.is_masked(2, 2, 8, 8));
    }
}
