//! The reweighted-fidelity denoiser.
//!
//! Each outer iteration re-estimates the noise level `sigma`, the per-pixel
//! shape parameter `gamma` and the fidelity weights `W`, then runs a fixed
//! number of split-Bregman steps that alternate a closed-form data step
//! with singular-value thresholding of similar-patch groups.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{reflect_index, ImageGrid, Plane};
use crate::init::{initialize, InitConfig, NoiseKind};
use crate::linalg::{nuclear_norm_gram, svt_gram_in_place, Shrinkage, SvtWorkspace};
use crate::metrics::{psnr, ssim, weighted_residual_stats};
use crate::noise::CorruptionMask;
use crate::patch::{deposit, gather_into, normalize, PatchGroupIndex};

/// Consistency factor turning a Gaussian MAD into a standard deviation.
pub const MAD_TO_STD: f64 = 1.4826;

/// How fidelity weights are derived from the current residual.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightRule {
    Pareto,
    /// Exponential weights of width `xi`; `None` means `10 * sigma^2`.
    Rcsr { xi: Option<f64> },
    Ones,
    /// Weight 1 on Gaussian-only pixels, 0 on impulses.
    Oracle(CorruptionMask),
}

impl WeightRule {
    pub fn name(&self) -> &'static str {
        match self {
            WeightRule::Pareto => "pareto",
            WeightRule::Rcsr { .. } => "rcsr",
            WeightRule::Ones => "ones",
            WeightRule::Oracle(_) => "oracle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaScope {
    /// MAD over a `patch_side` window around each pixel.
    Local,
    /// One MAD over the whole residual.
    Global,
}

impl FromStr for GammaScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(GammaScope::Local),
            "global" => Ok(GammaScope::Global),
            other => Err(Error::Config(format!("unknown gamma scope {other:?}"))),
        }
    }
}

/// How the singular-value threshold follows the noise level (unit scale).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThetaRule {
    /// `theta = factor * sigma^power` for every singular value.
    Uniform { factor: f64, sigma_power: f64 },
    /// Per-component `factor * sqrt(n) * nu^2 / sd_i` (see
    /// [`Shrinkage::Adaptive`]) with `nu^2` the noise variance of the
    /// thresholded argument, see [`argument_noise_var`].
    Adaptive { factor: f64 },
}

impl ThetaRule {
    /// `2 * sqrt(2) * sigma^2` for every singular value.
    pub const QUADRATIC: ThetaRule = ThetaRule::Uniform {
        factor: 2.0 * std::f64::consts::SQRT_2,
        sigma_power: 2.0,
    };

    pub fn shrinkage(&self, sigma: f64, noise_var: f64) -> Shrinkage {
        match *self {
            ThetaRule::Uniform { factor, sigma_power } => Shrinkage::Uniform(factor * sigma.powf(sigma_power)),
            ThetaRule::Adaptive { factor } => Shrinkage::Adaptive { factor, noise_var },
        }
    }

    /// Scalar threshold used for reporting: the uniform value, or the
    /// adaptive numerator `factor * nu^2`.
    pub fn nominal(&self, sigma: f64, noise_var: f64) -> f64 {
        match *self {
            ThetaRule::Uniform { factor, sigma_power } => factor * sigma.powf(sigma_power),
            ThetaRule::Adaptive { factor } => factor * noise_var,
        }
    }

    fn validate(&self) -> Result<()> {
        let (factor, power) = match *self {
            ThetaRule::Uniform { factor, sigma_power } => (factor, sigma_power),
            ThetaRule::Adaptive { factor } => (factor, 0.0),
        };
        if !(factor > 0.0 && factor.is_finite()) || !power.is_finite() {
            return Err(Error::Config(format!("bad threshold rule {self:?}")));
        }
        Ok(())
    }
}

impl Default for ThetaRule {
    fn default() -> Self {
        ThetaRule::Adaptive { factor: 1.0 }
    }
}

/// How the data-step penalty is obtained from [`SolverConfig::beta`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaRule {
    /// Use `beta` as given.
    Fixed,
    /// Treat `beta` as the product `beta * sigma^2` and rescale it with
    /// the current noise level.
    NoiseScaled,
}

/// How the noise level evolves across outer iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaRule {
    /// Keep the robust initial estimate.
    Hold,
    /// Re-estimate from the weighted residual, see [`update_sigma`].
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub patch_side: usize,
    pub k: usize,
    pub stride: usize,
    pub search_window: usize,
    pub beta: f64,
    pub beta_rule: BetaRule,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub regroup_every: usize,
    pub epsilon: f64,
    pub sigma_floor: f64,
    pub theta: ThetaRule,
    pub sigma_rule: SigmaRule,
    pub weight_rule: WeightRule,
    pub gamma_scope: GammaScope,
    pub init: InitConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            patch_side: 11,
            k: 60,
            stride: 4,
            search_window: 31,
            beta: 1.0,
            beta_rule: BetaRule::NoiseScaled,
            inner_iters: 8,
            outer_iters: 3,
            regroup_every: 4,
            epsilon: 1e-6,
            sigma_floor: 1e-4,
            theta: ThetaRule::default(),
            sigma_rule: SigmaRule::Hold,
            weight_rule: WeightRule::Pareto,
            gamma_scope: GammaScope::Local,
            init: InitConfig::default(),
        }
    }
}

impl SolverConfig {
    /// Data-step penalty at noise level `sigma`.
    pub fn effective_beta(&self, sigma: f64) -> f64 {
        match self.beta_rule {
            BetaRule::Fixed => self.beta,
            BetaRule::NoiseScaled => self.beta / (sigma * sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_side", self.patch_side),
            ("k", self.k),
            ("stride", self.stride),
            ("search_window", self.search_window),
            ("inner_iters", self.inner_iters),
            ("outer_iters", self.outer_iters),
            ("regroup_every", self.regroup_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.patch_side % 2 == 0 {
            return Err(Error::Config(format!("patch_side {} must be odd", self.patch_side)));
        }
        if self.search_window % 2 == 0 {
            return Err(Error::Config(format!(
                "search_window {} must be odd",
                self.search_window
            )));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("epsilon", self.epsilon),
            ("sigma_floor", self.sigma_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        self.theta.validate()?;
        if let WeightRule::Rcsr { xi: Some(xi) } = self.weight_rule {
            if !(xi > 0.0) {
                return Err(Error::Config(format!("xi must be positive, got {xi}")));
            }
        }
        self.init.validate()
    }
}

/// Iterates of the solver, one plane per channel.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub x: Vec<Plane>,
    pub w: Vec<Plane>,
    pub u: Vec<Plane>,
    pub b: Vec<Plane>,
    pub gamma: Vec<Plane>,
    pub sigma: f64,
    pub groups: Vec<PatchGroupIndex>,
    coverage: Vec<Vec<u32>>,
}

impl SolverState {
    /// Start from `x0` with unit weights and groups built on `x0`.
    pub fn new(x0: Vec<Plane>, sigma: f64, cfg: &SolverConfig) -> Result<Self> {
        let groups = x0
            .iter()
            .map(|p| PatchGroupIndex::build(p, cfg.patch_side, cfg.stride, cfg.k, cfg.search_window))
            .collect::<Result<Vec<_>>>()?;
        let coverage = groups.iter().map(PatchGroupIndex::coverage).collect();
        let ones: Vec<Plane> = x0.iter().map(|p| Plane::filled(p.height(), p.width(), 1.0)).collect();
        let zeros: Vec<Plane> = x0.iter().map(|p| Plane::zeros(p.height(), p.width())).collect();
        Ok(SolverState {
            u: x0.clone(),
            w: ones.clone(),
            gamma: ones,
            b: zeros,
            x: x0,
            sigma,
            groups,
            coverage,
        })
    }

    pub fn regroup(&mut self, cfg: &SolverConfig) -> Result<()> {
        self.groups = self
            .x
            .iter()
            .map(|p| PatchGroupIndex::build(p, cfg.patch_side, cfg.stride, cfg.k, cfg.search_window))
            .collect::<Result<Vec<_>>>()?;
        self.coverage = self.groups.iter().map(PatchGroupIndex::coverage).collect();
        Ok(())
    }
}

/// Median absolute deviation, `median(|z - median(z)|)`. Reorders `z`.
pub fn mad(z: &mut [f64]) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    let mid = z.len() / 2;
    let med = *z.select_nth_unstable_by(mid, f64::total_cmp).1;
    z.iter_mut().for_each(|v| *v = (*v - med).abs());
    *z.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// `gamma = exp(-MAD(Y - X_prev))`, either per pixel over a `side x side`
/// reflect-padded window or once over the whole residual.
pub fn update_gamma(y: &Plane, x_prev: &Plane, side: usize, scope: GammaScope) -> Result<Plane> {
    y.check_shape(x_prev, "solver planes")?;
    let s = y.sub(x_prev);
    let (h, w) = (s.height(), s.width());
    match scope {
        GammaScope::Global => {
            let mut all = s.into_data();
            Ok(Plane::filled(h, w, (-mad(&mut all)).exp()))
        }
        GammaScope::Local => {
            let half = (side / 2) as isize;
            let rows: Vec<Vec<f64>> = (0..h)
                .into_par_iter()
                .map_init(Vec::new, |buf: &mut Vec<f64>, r| {
                    let row_idx: Vec<usize> = (-half..=half)
                        .map(|d| reflect_index(r as isize + d, h))
                        .collect();
                    (0..w)
                        .map(|c| {
                            buf.clear();
                            for &rr in &row_idx {
                                for d in -half..=half {
                                    buf.push(s.get(rr, reflect_index(c as isize + d, w)));
                                }
                            }
                            (-mad(buf)).exp()
                        })
                        .collect()
                })
                .collect();
            Plane::new(h, w, rows.concat())
        }
    }
}

/// Closed-form minimizer over `W` in `[0, 1]` of
/// `e^2 W^2 / (2 sigma^2) - gamma ln(W + eps)`.
#[inline]
pub fn pareto_weight(e: f64, sigma: f64, gamma: f64, eps: f64) -> f64 {
    let knee = gamma.sqrt() * sigma;
    if knee < e {
        knee / (e + eps)
    } else {
        1.0
    }
}

#[inline]
pub fn rcsr_weight(e: f64, xi: f64) -> f64 {
    (-0.5 - e * e / (2.0 * xi)).exp()
}

pub fn update_weights_pareto(y: &Plane, x: &Plane, sigma: f64, gamma: &Plane, eps: f64) -> Result<Plane> {
    y.check_shape(x, "solver planes")?;
    y.check_shape(gamma, "solver planes")?;
    let data = y
        .data()
        .iter()
        .zip(x.data())
        .zip(gamma.data())
        .map(|((yv, xv), g)| pareto_weight((yv - xv).abs(), sigma, *g, eps))
        .collect();
    Plane::new(y.height(), y.width(), data)
}

pub fn update_weights_rcsr(y: &Plane, x: &Plane, xi: f64) -> Result<Plane> {
    y.check_shape(x, "solver planes")?;
    if !(xi > 0.0) {
        return Err(Error::Config(format!("xi must be positive, got {xi}")));
    }
    Ok(y.zip_map(x, |a, b| rcsr_weight(a - b, xi)))
}

/// `max(floor, sqrt(||W (Y - X)||^2 / n))` over every channel.
pub fn update_sigma(y: &[Plane], x: &[Plane], w: &[Plane], floor: f64) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for ((yp, xp), wp) in y.iter().zip(x).zip(w) {
        yp.check_shape(xp, "solver planes")?;
        yp.check_shape(wp, "solver planes")?;
        acc += yp
            .data()
            .iter()
            .zip(xp.data())
            .zip(wp.data())
            .map(|((a, b), c)| {
                let r = c * (a - b);
                r * r
            })
            .sum::<f64>();
        n += yp.len();
    }
    if n == 0 {
        return Ok(floor);
    }
    Ok((acc / n as f64).sqrt().max(floor))
}

/// Noise variance of the thresholded argument `X - B` near the split-Bregman
/// fixed point, where it equals `X + W^2 (Y - X) / (beta sigma^2)`:
/// `sigma^2 * mean((W^2 / (beta sigma^2))^2)`.
pub fn argument_noise_var(sigma: f64, w: &[Plane], beta: f64) -> f64 {
    let rho = beta * sigma * sigma;
    let (mut acc, mut n) = (0.0, 0usize);
    for p in w {
        acc += p.data().iter().map(|v| (v * v / rho).powi(2)).sum::<f64>();
        n += p.len();
    }
    if n == 0 {
        return sigma * sigma;
    }
    sigma * sigma * acc / n as f64
}

/// `X = (W^2 Y + beta sigma^2 (U + B)) / (W^2 + beta sigma^2)`.
pub fn x_closed_form(y: &Plane, w: &Plane, u: &Plane, b: &Plane, beta: f64, sigma: f64) -> Result<Plane> {
    for p in [w, u, b] {
        y.check_shape(p, "solver planes")?;
    }
    let bs2 = beta * sigma * sigma;
    let data = y
        .data()
        .iter()
        .zip(w.data())
        .zip(u.data().iter().zip(b.data()))
        .map(|((yv, wv), (uv, bv))| {
            let w2 = wv * wv;
            (w2 * yv + bs2 * (uv + bv)) / (w2 + bs2)
        })
        .collect();
    Plane::new(y.height(), y.width(), data)
}

const GROUP_CHUNK: usize = 256;

/// Threshold every group of `d` and aggregate the results.
fn low_rank_step(d: &Plane, index: &PatchGroupIndex, coverage: &[u32], shrink: Shrinkage) -> Result<Plane> {
    let (h, w, side, m) = (index.height, index.width, index.side, index.patch_len());
    let mut sums = vec![0.0; h * w];
    for chunk in index.groups.chunks(GROUP_CHUNK) {
        let shrunk = chunk
            .par_iter()
            .map_init(SvtWorkspace::default, |ws, g| {
                let mut buf = Vec::with_capacity(m * g.members.len());
                for &p in &g.members {
                    gather_into(d, p, side, &mut buf);
                }
                svt_gram_in_place(&mut buf, g.members.len(), m, shrink, ws)?;
                Ok(buf)
            })
            .collect::<Result<Vec<_>>>()?;
        for (g, buf) in chunk.iter().zip(&shrunk) {
            for (j, &p) in g.members.iter().enumerate() {
                deposit(&mut sums, w, p, side, &buf[j * m..(j + 1) * m]);
            }
        }
    }
    normalize(sums, coverage, h, w)
}

fn squared_norm(p: &Plane) -> f64 {
    p.data().iter().map(|v| v * v).sum()
}

fn group_squared_norm(p: &Plane, index: &PatchGroupIndex) -> f64 {
    let side = index.side;
    let mut buf = Vec::with_capacity(index.patch_len());
    let mut acc = 0.0;
    for g in &index.groups {
        for &m in &g.members {
            buf.clear();
            gather_into(p, m, side, &mut buf);
            acc += buf.iter().map(|v| v * v).sum::<f64>();
        }
    }
    acc
}

/// Per-pixel and per-group mean squared split residual `X - B - U`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equivalence {
    pub e1: f64,
    pub e2: f64,
}

/// Run `inner_iters` split-Bregman steps from `U = X`, `B = 0`.
///
/// Returns the split residual measured on the last step, with `B` taken
/// before its final update so that `X - B - U` is the thresholding residual.
pub fn inner_bregman_loop(
    state: &mut SolverState,
    y: &[Plane],
    cfg: &SolverConfig,
    beta: f64,
    shrink: Shrinkage,
) -> Result<Equivalence> {
    let channels = y.len();
    for c in 0..channels {
        state.u[c] = state.x[c].clone();
        state.b[c] = Plane::zeros(y[c].height(), y[c].width());
    }
    let mut last = Equivalence { e1: 0.0, e2: 0.0 };
    for it in 0..cfg.inner_iters {
        let mut e1_acc = 0.0;
        let mut e2_acc = 0.0;
        let mut pixels = 0usize;
        let mut entries = 0usize;
        for c in 0..channels {
            state.x[c] = x_closed_form(&y[c], &state.w[c], &state.u[c], &state.b[c], beta, state.sigma)?;
            let d = state.x[c].sub(&state.b[c]);
            state.u[c] = low_rank_step(&d, &state.groups[c], &state.coverage[c], shrink)?;
            if it + 1 == cfg.inner_iters {
                let z = d.sub(&state.u[c]);
                e1_acc += squared_norm(&z);
                e2_acc += group_squared_norm(&z, &state.groups[c]);
                pixels += z.len();
                entries += state.groups[c].len() * state.groups[c].patch_len() * cfg.k;
            }
            state.b[c] = state.b[c].add(&state.u[c].sub(&state.x[c]));
        }
        if it + 1 == cfg.inner_iters {
            last = Equivalence {
                e1: e1_acc / pixels as f64,
                e2: e2_acc / entries as f64,
            };
        }
    }
    for p in &state.x {
        if !p.is_finite() {
            return Err(Error::NonFinite("solver estimate"));
        }
    }
    Ok(last)
}

/// One row of the per-iteration report.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub sigma: f64,
    pub theta: f64,
    pub objective: f64,
    pub e1: f64,
    pub e2: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    /// Mean of `255 W (Y - X)`.
    pub mean_weighted_residual: f64,
    /// Variance of `255 W (Y - X)`.
    pub var_weighted_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenoiseReport {
    pub sigma0: f64,
    pub init_psnr: Option<f64>,
    pub init_ssim: Option<f64>,
    pub iterations: Vec<IterationRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl DenoiseReport {
    pub fn final_psnr(&self) -> Option<f64> {
        self.iterations.last().and_then(|r| r.psnr)
    }

    pub fn final_ssim(&self) -> Option<f64> {
        self.iterations.last().and_then(|r| r.ssim)
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "iter,sigma,objective,E1,E2,psnr,ssim,mean_weighted_residual,var_weighted_residual"
        )?;
        for r in &self.iterations {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.iter,
                r.sigma,
                r.objective,
                r.e1,
                r.e2,
                opt(r.psnr),
                opt(r.ssim),
                r.mean_weighted_residual,
                r.var_weighted_residual
            )?;
        }
        Ok(())
    }
}

/// Value of the relaxed objective with the nuclear norm standing in for rank
/// and `lambda = theta * alpha`, `alpha = beta * MN / (m K)`.
pub fn objective(state: &SolverState, y: &[Plane], cfg: &SolverConfig, beta: f64, theta: f64) -> f64 {
    let s2 = state.sigma * state.sigma;
    let mut total = 0.0;
    let mut pixels = 0usize;
    for c in 0..y.len() {
        let (yp, xp, wp, gp) = (&y[c], &state.x[c], &state.w[c], &state.gamma[c]);
        for i in 0..yp.len() {
            let r = wp.data()[i] * (yp.data()[i] - xp.data()[i]);
            total += r * r / (2.0 * s2) - gp.data()[i] * (wp.data()[i] + cfg.epsilon).ln();
        }
        pixels += yp.len();
        let index = &state.groups[c];
        let m = index.patch_len();
        let alpha = beta * yp.len() as f64 / (m * cfg.k) as f64;
        let nuclear: f64 = index
            .groups
            .par_iter()
            .map_init(Vec::new, |buf: &mut Vec<f64>, g| {
                buf.clear();
                for &p in &g.members {
                    gather_into(xp, p, index.side, buf);
                }
                nuclear_norm_gram(buf, g.members.len(), m)
            })
            .sum();
        total += theta * alpha * nuclear;
    }
    total + pixels as f64 * state.sigma.ln()
}

/// Fewest impulse-free 2x2 blocks needed before the noise estimate restricts
/// itself to them.
pub const MIN_CLEAN_BLOCKS: usize = 32;

/// Rounds of the median-deviation refinement for random-valued impulses.
pub const SUSPECT_ROUNDS: usize = 4;

/// Median-deviation cutoff, in units of the current noise estimate.
pub const SUSPECT_CUTOFF: f64 = 2.25;

fn median3(p: &Plane) -> Plane {
    let mut buf = Vec::with_capacity(9);
    Plane::from_fn(p.height(), p.width(), |r, c| {
        buf.clear();
        for dr in -1..=1 {
            for dc in -1..=1 {
                buf.push(p.get_reflect(r as isize + dr, c as isize + dc));
            }
        }
        buf.sort_by(f64::total_cmp);
        buf[4]
    })
}

fn extremes(y: &[Plane]) -> Vec<Vec<bool>> {
    y.iter()
        .map(|p| p.data().iter().map(|&v| v == 0.0 || v == 1.0).collect())
        .collect()
}

/// Robust initial noise level for an observation with impulses of `kind`.
///
/// Salt-and-pepper suspects are the pixels at 0 or 1. Random-valued suspects
/// start as the pixels changed by the pre-filter and are then refined a few
/// times to the pixels deviating from their 3x3 median by more than
/// [`SUSPECT_CUTOFF`] times the current estimate.
pub fn initial_sigma(y: &[Plane], x0: &[Plane], kind: NoiseKind, floor: f64) -> Result<f64> {
    for (a, b) in y.iter().zip(x0) {
        a.check_shape(b, "solver planes")?;
    }
    let ext = extremes(y);
    if kind == NoiseKind::Spin {
        return clean_block_sigma(y, &ext, floor);
    }
    let changed: Vec<Vec<bool>> = y
        .iter()
        .zip(x0)
        .zip(&ext)
        .map(|((a, b), e)| a.data().iter().zip(b.data()).zip(e).map(|((p, q), &x)| p != q || x).collect())
        .collect();
    let mut sigma = clean_block_sigma(y, &changed, floor)?;
    let medians: Vec<Plane> = y.iter().map(median3).collect();
    for _ in 0..SUSPECT_ROUNDS {
        let flags: Vec<Vec<bool>> = y
            .iter()
            .zip(&medians)
            .zip(&ext)
            .map(|((a, m), e)| {
                a.data()
                    .iter()
                    .zip(m.data())
                    .zip(e)
                    .map(|((p, q), &x)| (p - q).abs() > SUSPECT_CUTOFF * sigma || (x && kind == NoiseKind::SpinRvin))
                    .collect()
            })
            .collect();
        sigma = clean_block_sigma(y, &flags, floor)?;
    }
    Ok(sigma)
}

/// Robust noise level `1.4826 MAD` of the finest diagonal Haar coefficients
/// `(a - b - c + d) / 2` over 2x2 blocks of `y` without suspect pixels.
///
/// Falls back to every block when fewer than [`MIN_CLEAN_BLOCKS`] are clean.
fn clean_block_sigma(y: &[Plane], suspects: &[Vec<bool>], floor: f64) -> Result<f64> {
    if suspects.len() != y.len() || y.iter().zip(suspects).any(|(p, s)| s.len() != p.len()) {
        return Err(Error::Shape("suspect mask does not match the image".into()));
    }
    let mut clean = Vec::new();
    let mut all = Vec::new();
    for (p, flags) in y.iter().zip(suspects) {
        let w = p.width();
        for r in (0..p.height().saturating_sub(1)).step_by(2) {
            for c in (0..w.saturating_sub(1)).step_by(2) {
                let idx = [r * w + c, r * w + c + 1, (r + 1) * w + c, (r + 1) * w + c + 1];
                let v = idx.map(|i| p.data()[i]);
                let hh = (v[0] - v[1] - v[2] + v[3]) / 2.0;
                if idx.iter().all(|&i| !flags[i]) {
                    clean.push(hh);
                }
                all.push(hh);
            }
        }
    }
    let coeffs = if clean.len() >= MIN_CLEAN_BLOCKS { &mut clean } else { &mut all };
    if coeffs.is_empty() {
        return Ok(floor);
    }
    Ok((MAD_TO_STD * mad(coeffs)).max(floor))
}

fn update_weights(state: &mut SolverState, y: &[Plane], cfg: &SolverConfig) -> Result<()> {
    for c in 0..y.len() {
        state.w[c] = match &cfg.weight_rule {
            WeightRule::Pareto => {
                update_weights_pareto(&y[c], &state.x[c], state.sigma, &state.gamma[c], cfg.epsilon)?
            }
            WeightRule::Rcsr { xi } => {
                let xi = xi.unwrap_or(10.0 * state.sigma * state.sigma);
                update_weights_rcsr(&y[c], &state.x[c], xi)?
            }
            WeightRule::Ones => Plane::filled(y[c].height(), y[c].width(), 1.0),
            WeightRule::Oracle(mask) => {
                if mask.height() != y[c].height() || mask.width() != y[c].width() || mask.channels() != y.len() {
                    return Err(Error::Shape("oracle mask does not match the image".into()));
                }
                mask.oracle_weights(c)
            }
        };
    }
    Ok(())
}

fn check_invariants(state: &SolverState, cfg: &SolverConfig) -> Result<()> {
    debug_assert!(state.sigma >= cfg.sigma_floor);
    for (w, g) in state.w.iter().zip(&state.gamma) {
        if w.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::NonFinite("weights outside [0, 1]"));
        }
        if g.data().iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(Error::NonFinite("gamma outside (0, 1]"));
        }
    }
    Ok(())
}

/// Full denoising run: impulse pre-filter, then the outer loop.
pub fn denoise(
    y: &ImageGrid,
    cfg: &SolverConfig,
    kind: NoiseKind,
    reference: Option<&ImageGrid>,
) -> Result<(ImageGrid, DenoiseReport)> {
    cfg.validate()?;
    let x0 = initialize(y, kind, &cfg.init)?;
    denoise_from(y, &x0, kind, cfg, reference)
}

/// Outer loop from a given starting estimate.
pub fn denoise_from(
    y: &ImageGrid,
    x0: &ImageGrid,
    kind: NoiseKind,
    cfg: &SolverConfig,
    reference: Option<&ImageGrid>,
) -> Result<(ImageGrid, DenoiseReport)> {
    cfg.validate()?;
    if !y.same_shape(x0) {
        return Err(Error::Shape("initial estimate does not match the observation".into()));
    }
    if let Some(r) = reference {
        if !y.same_shape(r) {
            return Err(Error::Shape("reference does not match the observation".into()));
        }
    }
    if y.height() < cfg.patch_side || y.width() < cfg.patch_side {
        return Err(Error::ImageTooSmall {
            height: y.height(),
            width: y.width(),
            side: cfg.patch_side,
        });
    }
    let yp = y.planes();
    let sigma0 = initial_sigma(yp, x0.planes(), kind, cfg.sigma_floor)?;
    let mut state = SolverState::new(x0.planes().to_vec(), sigma0, cfg)?;
    let mut report = DenoiseReport {
        sigma0,
        ..Default::default()
    };
    if let Some(r) = reference {
        report.init_psnr = Some(psnr(x0, r)?);
        report.init_ssim = Some(ssim(x0, r)?);
    }

    for t in 1..=cfg.outer_iters {
        if t > 1 && cfg.sigma_rule == SigmaRule::Weighted {
            state.sigma = update_sigma(yp, &state.x, &state.w, cfg.sigma_floor)?;
        }
        for c in 0..yp.len() {
            state.gamma[c] = update_gamma(&yp[c], &state.x[c], cfg.patch_side, cfg.gamma_scope)?;
        }
        update_weights(&mut state, yp, cfg)?;
        check_invariants(&state, cfg)?;
        let beta = cfg.effective_beta(state.sigma);
        let noise_var = argument_noise_var(state.sigma, &state.w, beta);
        let theta = cfg.theta.nominal(state.sigma, noise_var);
        let shrink = cfg.theta.shrinkage(state.sigma, noise_var);
        let eq = inner_bregman_loop(&mut state, yp, cfg, beta, shrink)?;

        let current = ImageGrid::from_planes_clamped(state.x.clone())?;
        let stats = weighted_residual_stats(y, &current, &state.w)?;
        let (p, s) = match reference {
            Some(r) => (Some(psnr(&current, r)?), Some(ssim(&current, r)?)),
            None => (None, None),
        };
        report.iterations.push(IterationRecord {
            iter: t,
            sigma: state.sigma,
            theta,
            objective: objective(&state, yp, cfg, beta, theta),
            e1: eq.e1,
            e2: eq.e2,
            psnr: p,
            ssim: s,
            mean_weighted_residual: stats.mean,
            var_weighted_residual: stats.variance,
        });
        if t % cfg.regroup_every == 0 && t < cfg.outer_iters {
            state.regroup(cfg)?;
        }
    }

    let out = ImageGrid::from_planes_clamped(state.x)?;
    Ok((out, report))
}
