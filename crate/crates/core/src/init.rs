//! Impulse pre-filters used to build the starting estimate.
//!
//! * [`amf`]: two-stage adaptive median filter, aimed at salt-and-pepper noise.
//! * [`acwmf`]: adaptive center-weighted median filter, aimed at random-valued
//!   impulses.
//!
//! Both filters use whole-sample symmetric padding at the borders.

use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{ImageGrid, Plane};

/// Which impulse family the observation carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Spin,
    Rvin,
    SpinRvin,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spin" => Ok(NoiseKind::Spin),
            "rvin" => Ok(NoiseKind::Rvin),
            "both" | "spin+rvin" | "spin_rvin" => Ok(NoiseKind::SpinRvin),
            other => Err(Error::Config(format!(
                "unknown noise kind {other:?} (expected spin, rvin or both)"
            ))),
        }
    }
}

impl NoiseKind {
    /// Kind implied by which impulse ratios are non-zero.
    pub fn from_ratios(spin: f64, rvin: f64) -> Self {
        match (spin > 0.0, rvin > 0.0) {
            (true, true) => NoiseKind::SpinRvin,
            (false, true) => NoiseKind::Rvin,
            _ => NoiseKind::Spin,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::Spin => "spin",
            NoiseKind::Rvin => "rvin",
            NoiseKind::SpinRvin => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    /// Largest (odd) AMF window side.
    pub amf_max_window: usize,
    /// ACWMF thresholds for extra center repetitions 0, 2, 4, 6.
    pub acwmf_thresholds: [f64; 4],
    pub acwmf_center_weights: [usize; 4],
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            amf_max_window: 39,
            acwmf_thresholds: [40.0 / 255.0, 25.0 / 255.0, 10.0 / 255.0, 5.0 / 255.0],
            acwmf_center_weights: [0, 2, 4, 6],
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.amf_max_window < 3 || self.amf_max_window % 2 == 0 {
            return Err(Error::Config(format!(
                "amf_max_window {} must be odd and >= 3",
                self.amf_max_window
            )));
        }
        let t = &self.acwmf_thresholds;
        if t.iter().any(|&v| !(v > 0.0)) || t.windows(2).any(|p| p[0] <= p[1]) {
            return Err(Error::Config(
                "acwmf thresholds must be positive and strictly descending".into(),
            ));
        }
        if self.acwmf_center_weights.iter().any(|w| w % 2 == 1) {
            return Err(Error::Config("acwmf center weights must be even".into()));
        }
        Ok(())
    }
}

fn median_in_place(buf: &mut [f64]) -> f64 {
    let mid = buf.len() / 2;
    let (_, m, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

fn gather_window(plane: &Plane, row: usize, col: usize, radius: usize, buf: &mut Vec<f64>) {
    buf.clear();
    let r = radius as isize;
    let (row, col) = (row as isize, col as isize);
    for dr in -r..=r {
        for dc in -r..=r {
            buf.push(plane.get_reflect(row + dr, col + dc));
        }
    }
}

fn amf_pixel(plane: &Plane, row: usize, col: usize, max_window: usize, buf: &mut Vec<f64>) -> f64 {
    let center = plane.get(row, col);
    let mut window = 3;
    loop {
        gather_window(plane, row, col, window / 2, buf);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in buf.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let med = median_in_place(buf);
        if lo < med && med < hi {
            return if lo < center && center < hi { center } else { med };
        }
        if window + 2 > max_window {
            return med;
        }
        window += 2;
    }
}

fn amf_plane(plane: &Plane, cfg: &InitConfig) -> Plane {
    let (h, w) = (plane.height(), plane.width());
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map_init(Vec::new, |buf, r| {
            (0..w)
                .map(|c| amf_pixel(plane, r, c, cfg.amf_max_window, buf))
                .collect()
        })
        .collect();
    Plane::new(h, w, rows.concat()).unwrap()
}

fn acwmf_pixel(plane: &Plane, row: usize, col: usize, cfg: &InitConfig, buf: &mut Vec<f64>) -> f64 {
    let center = plane.get(row, col);
    gather_window(plane, row, col, 1, buf);
    let base_len = buf.len();
    let mut scratch = buf.clone();
    let plain = median_in_place(&mut scratch);
    for (&extra, &threshold) in cfg.acwmf_center_weights.iter().zip(&cfg.acwmf_thresholds) {
        let weighted = if extra == 0 {
            plain
        } else {
            buf.truncate(base_len);
            buf.extend(std::iter::repeat_n(center, extra));
            scratch.clear();
            scratch.extend_from_slice(buf);
            median_in_place(&mut scratch)
        };
        if (weighted - center).abs() > threshold {
            return plain;
        }
    }
    center
}

fn acwmf_plane(plane: &Plane, cfg: &InitConfig) -> Plane {
    let (h, w) = (plane.height(), plane.width());
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map_init(Vec::new, |buf, r| {
            (0..w).map(|c| acwmf_pixel(plane, r, c, cfg, buf)).collect()
        })
        .collect();
    Plane::new(h, w, rows.concat()).unwrap()
}

fn per_channel(noisy: &ImageGrid, f: impl Fn(&Plane) -> Plane) -> ImageGrid {
    ImageGrid::from_planes(noisy.planes().iter().map(f).collect())
        .expect("median filters keep values inside the input range")
}

/// Two-stage adaptive median filter.
///
/// The window grows from 3x3 while its median touches the window minimum or
/// maximum. Once the median is strictly interior, the center is kept if it is
/// strictly interior too, otherwise replaced by the median. At the largest
/// window the median is returned.
pub fn amf(noisy: &ImageGrid, cfg: &InitConfig) -> Result<ImageGrid> {
    cfg.validate()?;
    Ok(per_channel(noisy, |p| amf_plane(p, cfg)))
}

/// Adaptive center-weighted median filter on 3x3 windows.
///
/// For each configured number of extra center repetitions the weighted
/// median is compared with the center; if any deviation exceeds its threshold
/// the center is replaced by the plain 3x3 median.
pub fn acwmf(noisy: &ImageGrid, cfg: &InitConfig) -> Result<ImageGrid> {
    cfg.validate()?;
    Ok(per_channel(noisy, |p| acwmf_plane(p, cfg)))
}

/// Starting estimate for the given noise kind (AMF, ACWMF, or AMF then ACWMF).
pub fn initialize(noisy: &ImageGrid, kind: NoiseKind, cfg: &InitConfig) -> Result<ImageGrid> {
    match kind {
        NoiseKind::Spin => amf(noisy, cfg),
        NoiseKind::Rvin => acwmf(noisy, cfg),
        NoiseKind::SpinRvin => acwmf(&amf(noisy, cfg)?, cfg),
    }
}
