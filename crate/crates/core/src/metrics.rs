//! Reconstruction and distribution proxies: PSNR and a pixel-space Fréchet
//! distance between Gaussian fits of downsampled images.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::io::Image;
use crate::{NfError, Result};

pub const PSNR_CAP: f64 = 99.0;
pub const MIN_FRECHET_IMAGES: usize = 16;
const FRECHET_SIZE: usize = 8;

/// PSNR in dB for values in `[0, 1]`, capped at 99 dB for identical inputs.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(NfError::InvalidArgument(format!("psnr over {} vs {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Mean PSNR over paired images.
pub fn mean_psnr(pred: &[Image], target: &[Image]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NfError::InvalidArgument("psnr needs equally many paired images".into()));
    }
    let mut s = 0.0;
    for (p, t) in pred.iter().zip(target) {
        s += psnr(&p.data, &t.data)?;
    }
    Ok(s / pred.len() as f64)
}

/// Box-filters an image to `8×8×3` features.
pub fn downsample_features(img: &Image) -> Vec<f64> {
    let mut out = vec![0.0; FRECHET_SIZE * FRECHET_SIZE * 3];
    let mut counts = vec![0usize; FRECHET_SIZE * FRECHET_SIZE];
    for y in 0..img.height {
        for x in 0..img.width {
            let cell = (y * FRECHET_SIZE / img.height) * FRECHET_SIZE + x * FRECHET_SIZE / img.width;
            counts[cell] += 1;
            let px = img.pixel(x, y);
            for c in 0..3 {
                out[cell * 3 + c] += px[c] as f64;
            }
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        for c in 0..3 {
            out[cell * 3 + c] /= n.max(1) as f64;
        }
    }
    out
}

fn gaussian_fit(images: &[Image]) -> (DVector<f64>, DMatrix<f64>) {
    let feats: Vec<Vec<f64>> = images.iter().map(downsample_features).collect();
    let d = feats[0].len();
    let n = feats.len() as f64;
    let mut mean = DVector::zeros(d);
    for f in &feats {
        mean += DVector::from_column_slice(f);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for f in &feats {
        let c = DVector::from_column_slice(f) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})` over 8×8-downsampled
/// pixels. A distribution proxy, not FID.
pub fn pixel_frechet(real: &[Image], generated: &[Image]) -> Result<f64> {
    if real.len() < MIN_FRECHET_IMAGES || generated.len() < MIN_FRECHET_IMAGES {
        return Err(NfError::InvalidArgument(format!(
            "pixel Fréchet needs at least {MIN_FRECHET_IMAGES} images per side (got {} and {})",
            real.len(),
            generated.len()
        )));
    }
    let (m1, c1) = gaussian_fit(real);
    let (m2, c2) = gaussian_fit(generated);
    let s1 = psd_sqrt(&c1);
    let cross = psd_sqrt(&(&s1 * &c2 * &s1));
    let d = (&m1 - &m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}
