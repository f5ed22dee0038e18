//! Quality metrics and residual diagnostics.

use std::io::Write;

use crate::error::{Error, Result};
use crate::image::{reflect_index, ImageGrid, Plane};
use crate::patch::{gather_into, PatchGroupIndex};

fn check_grids(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )))
    }
}

pub fn mse(x: &ImageGrid, reference: &ImageGrid) -> Result<f64> {
    check_grids(x, reference)?;
    let n = (x.height() * x.width() * x.channels()) as f64;
    let sum: f64 = x.values().zip(reference.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio for unit peak. Identical images give
/// `f64::INFINITY`.
pub fn psnr(x: &ImageGrid, reference: &ImageGrid) -> Result<f64> {
    let e = mse(x, reference)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / e).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_STD: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(len: usize, std: f64) -> Vec<f64> {
    let c = (len / 2) as f64;
    let mut t: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * std * std)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

fn blur(p: &Plane, taps: &[f64]) -> Plane {
    let (h, w) = (p.height(), p.width());
    let half = (taps.len() / 2) as isize;
    let rows = Plane::from_fn(h, w, |r, c| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * p.get(r, reflect_index(c as isize + k as isize - half, w)))
            .sum()
    });
    Plane::from_fn(h, w, |r, c| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * rows.get(reflect_index(r as isize + k as isize - half, h), c))
            .sum()
    })
}

fn ssim_plane(a: &Plane, b: &Plane, taps: &[f64]) -> f64 {
    let mu_a = blur(a, taps);
    let mu_b = blur(b, taps);
    let aa = blur(&a.zip_map(a, |x, y| x * y), taps);
    let bb = blur(&b.zip_map(b, |x, y| x * y), taps);
    let ab = blur(&a.zip_map(b, |x, y| x * y), taps);
    let n = a.len() as f64;
    (0..a.len())
        .map(|i| {
            let (ma, mb) = (mu_a.data()[i], mu_b.data()[i]);
            let va = aa.data()[i] - ma * ma;
            let vb = bb.data()[i] - mb * mb;
            let cov = ab.data()[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum::<f64>()
        / n
}

/// Mean structural similarity with an 11x11 Gaussian window (std 1.5),
/// reflect padding at the borders, averaged over channels.
pub fn ssim(x: &ImageGrid, reference: &ImageGrid) -> Result<f64> {
    check_grids(x, reference)?;
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_STD);
    let total: f64 = x
        .planes()
        .iter()
        .zip(reference.planes())
        .map(|(a, b)| ssim_plane(a, b, &taps))
        .sum();
    Ok(total / x.channels() as f64)
}

/// Fixed-width histogram whose edge bins absorb out-of-range values.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Config(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
        }
        Ok(Histogram {
            lo,
            hi,
            counts: vec![0; bins],
        })
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn add(&mut self, v: f64) {
        let n = self.counts.len();
        let i = ((v - self.lo) / self.bin_width()).floor();
        let i = if i.is_nan() || i < 0.0 { 0 } else { (i as usize).min(n - 1) };
        self.counts[i] += 1;
    }

    pub fn centers(&self) -> Vec<f64> {
        let bw = self.bin_width();
        (0..self.counts.len()).map(|i| self.lo + (i as f64 + 0.5) * bw).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "bin_center,count")?;
        for (c, n) in self.centers().iter().zip(&self.counts) {
            writeln!(out, "{c},{n}")?;
        }
        Ok(())
    }
}

/// Statistics of `255 W (Y - X)` in 8-bit units.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    pub mean: f64,
    pub variance: f64,
    pub std: f64,
    pub histogram: Histogram,
}

impl ResidualStats {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "mean,variance,std,count")?;
        writeln!(out, "{},{},{},{}", self.mean, self.variance, self.std, self.histogram.total())
    }
}

pub fn weighted_residual_stats(y: &ImageGrid, x: &ImageGrid, w: &[Plane]) -> Result<ResidualStats> {
    weighted_residual_stats_binned(y, x, w, Histogram::new(-50.0, 50.0, 101)?)
}

pub fn weighted_residual_stats_binned(
    y: &ImageGrid,
    x: &ImageGrid,
    w: &[Plane],
    mut histogram: Histogram,
) -> Result<ResidualStats> {
    check_grids(y, x)?;
    if w.len() != y.channels() || w.iter().any(|p| p.height() != y.height() || p.width() != y.width()) {
        return Err(Error::Shape("weights do not match the image".into()));
    }
    let mut values = Vec::with_capacity(y.height() * y.width() * y.channels());
    for c in 0..y.channels() {
        let (yp, xp, wp) = (y.plane(c), x.plane(c), &w[c]);
        for i in 0..yp.len() {
            values.push(255.0 * wp.data()[i] * (yp.data()[i] - xp.data()[i]));
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    for &v in &values {
        histogram.add(v);
    }
    Ok(ResidualStats {
        mean,
        variance,
        std: variance.sqrt(),
        histogram,
    })
}

/// Per-pixel and per-group-entry mean squared norms of `X - B - U`:
/// `E1 = ||Z||^2 / (MN)`, `E2 = sum_p ||R_p Z||^2 / (m K C)` with `C` the
/// number of groups.
pub fn equivalence_check(x: &[Plane], b: &[Plane], u: &[Plane], groups: &[PatchGroupIndex]) -> Result<(f64, f64)> {
    if x.len() != b.len() || x.len() != u.len() || x.len() != groups.len() {
        return Err(Error::Shape("channel counts differ".into()));
    }
    let (mut s1, mut n1, mut s2, mut n2) = (0.0, 0usize, 0.0, 0usize);
    let mut buf = Vec::new();
    for c in 0..x.len() {
        x[c].check_shape(&b[c], "equivalence B")?;
        x[c].check_shape(&u[c], "equivalence U")?;
        let z = x[c].sub(&b[c]).sub(&u[c]);
        s1 += z.data().iter().map(|v| v * v).sum::<f64>();
        n1 += z.len();
        let index = &groups[c];
        for g in &index.groups {
            for &p in &g.members {
                buf.clear();
                gather_into(&z, p, index.side, &mut buf);
                s2 += buf.iter().map(|v| v * v).sum::<f64>();
            }
            n2 += index.patch_len() * g.members.len();
        }
    }
    Ok((s1 / n1 as f64, s2 / n2 as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(p: Plane) -> ImageGrid {
        ImageGrid::gray(p).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = gray(Plane::filled(4, 4, 0.5));
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = gray(Plane::filled(4, 4, 0.6));
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = gray(Plane::filled(5, 4, 0.6));
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = gray(Plane::from_fn(20, 20, |r, c| ((r * 7 + c * 3) % 10) as f64 / 10.0));
        let b = gray(Plane::from_fn(20, 20, |r, c| ((r * 5 + c * 2) % 9) as f64 / 9.0));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn taps_sum_to_one() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((t[0] - t[10]).abs() < 1e-18);
    }

    #[test]
    fn histogram_clamps_edges() {
        let mut h = Histogram::new(-50.0, 50.0, 101).unwrap();
        for v in [-1e9, -50.0, 0.0, 49.99, 50.0, 1e9, f64::NAN] {
            h.add(v);
        }
        assert_eq!(h.total(), 7);
        assert_eq!(h.counts[100], 3);
        assert_eq!(h.counts[0], 3);
    }

    #[test]
    fn residual_stats_zero() {
        let a = gray(Plane::filled(6, 6, 0.3));
        let w = vec![Plane::filled(6, 6, 1.0)];
        let s = weighted_residual_stats(&a, &a, &w).unwrap();
        assert_eq!((s.mean, s.variance), (0.0, 0.0));
        assert_eq!(s.histogram.total(), 36);
    }

    #[test]
    fn equivalence_zero_when_split_exact() {
        let x = vec![Plane::from_fn(12, 12, |r, c| (r + c) as f64 / 24.0)];
        let b = vec![Plane::filled(12, 12, 0.1)];
        let u = vec![x[0].sub(&b[0])];
        let groups = vec![PatchGroupIndex::build(&x[0], 4, 4, 3, 5).unwrap()];
        assert_eq!(equivalence_check(&x, &b, &u, &groups).unwrap(), (0.0, 0.0));
    }
}
