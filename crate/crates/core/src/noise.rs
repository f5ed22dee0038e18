//! Seeded mixed-noise synthesis: additive Gaussian noise combined with
//! salt-and-pepper (SPIN) and random-valued (RVIN) impulses.
//!
//! Every pixel owns a ChaCha8 stream selected by its channel-major index, so
//! output is reproducible across platforms and independent of traversal
//! order. Per pixel, draws happen in a fixed order: SPIN test, SPIN polarity,
//! RVIN test, RVIN value, Gaussian sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{clamp_unit, to_byte, ImageGrid, Plane};

const STAGE_MIXED: u64 = 0x6d69_7865_645f_6e7a;
const STAGE_AWGN: u64 = 0x6177_676e_5f6f_6e6c;

/// Mixed-noise description. `sigma8` is on the 8-bit scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma8: f64,
    pub spin_ratio: f64,
    pub rvin_ratio: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma8: f64, spin_ratio: f64, rvin_ratio: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec {
            sigma8,
            spin_ratio,
            rvin_ratio,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma8.is_finite() && self.sigma8 >= 0.0) {
            return Err(Error::Config(format!("sigma {} must be >= 0", self.sigma8)));
        }
        for (name, v) in [("spin", self.spin_ratio), ("rvin", self.rvin_ratio)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} ratio {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Gaussian standard deviation on the `[0, 1]` scale.
    pub fn sigma_unit(&self) -> f64 {
        self.sigma8 / 255.0
    }

    /// Category probabilities (GAUSS, SPIN_LOW, SPIN_HIGH, RVIN).
    pub fn label_probabilities(&self) -> [f64; 4] {
        let (s, r) = (self.spin_ratio, self.rvin_ratio);
        [(1.0 - s) * (1.0 - r), s / 2.0, s / 2.0, r * (1.0 - s)]
    }
}

/// What happened to a pixel during synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseLabel {
    Gauss,
    SpinLow,
    SpinHigh,
    Rvin,
}

impl NoiseLabel {
    pub const ALL: [NoiseLabel; 4] = [
        NoiseLabel::Gauss,
        NoiseLabel::SpinLow,
        NoiseLabel::SpinHigh,
        NoiseLabel::Rvin,
    ];

    /// Gray level used in the PGM label map.
    pub fn code(self) -> u8 {
        match self {
            NoiseLabel::Gauss => 0,
            NoiseLabel::SpinLow => 64,
            NoiseLabel::SpinHigh => 128,
            NoiseLabel::Rvin => 192,
        }
    }

    pub fn is_impulse(self) -> bool {
        self != NoiseLabel::Gauss
    }
}

/// One label per pixel and channel, channel-major like [`ImageGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionMask {
    height: usize,
    width: usize,
    labels: Vec<Vec<NoiseLabel>>,
}

impl CorruptionMask {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self, channel: usize) -> &[NoiseLabel] {
        &self.labels[channel]
    }

    pub fn counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for l in self.labels.iter().flatten() {
            counts[NoiseLabel::ALL.iter().position(|x| x == l).unwrap()] += 1;
        }
        counts
    }

    /// Rebuild a mask from per-channel label maps (codes 0/64/128/192).
    pub fn from_label_planes(planes: &[Plane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidImage("empty label map list".into()))?;
        let mut labels = Vec::with_capacity(planes.len());
        for p in planes {
            first.check_shape(p, "label maps")?;
            let channel = p
                .data()
                .iter()
                .map(|&v| {
                    let code = to_byte(v);
                    NoiseLabel::ALL
                        .into_iter()
                        .find(|l| l.code() == code)
                        .ok_or_else(|| Error::InvalidImage(format!("unknown label code {code}")))
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(channel);
        }
        Ok(CorruptionMask {
            height: first.height(),
            width: first.width(),
            labels,
        })
    }

    /// Label map of one channel as a gray image (0/64/128/192).
    pub fn to_grid(&self, channel: usize) -> ImageGrid {
        let data = self.labels[channel]
            .iter()
            .map(|l| f64::from(l.code()) / 255.0)
            .collect();
        ImageGrid::gray(Plane::new(self.height, self.width, data).unwrap()).unwrap()
    }

    /// Oracle fidelity weights: 1 on Gaussian pixels, 0 on impulses.
    pub fn oracle_weights(&self, channel: usize) -> Plane {
        let data = self.labels[channel]
            .iter()
            .map(|l| if l.is_impulse() { 0.0 } else { 1.0 })
            .collect();
        Plane::new(self.height, self.width, data).unwrap()
    }
}

fn pixel_rng(base: &ChaCha8Rng, index: u64) -> ChaCha8Rng {
    let mut rng = base.clone();
    rng.set_stream(index);
    rng
}

/// Corrupt `clean` with the mixture described by `spec`.
pub fn synthesize(clean: &ImageGrid, spec: &NoiseSpec) -> Result<(ImageGrid, CorruptionMask)> {
    spec.validate()?;
    let base = ChaCha8Rng::seed_from_u64(spec.seed ^ STAGE_MIXED);
    let sigma = spec.sigma_unit();
    let n = clean.height() * clean.width();
    let mut planes = Vec::with_capacity(clean.channels());
    let mut labels = Vec::with_capacity(clean.channels());
    for (ch, plane) in clean.planes().iter().enumerate() {
        let (values, lab): (Vec<f64>, Vec<NoiseLabel>) = plane
            .data()
            .par_iter()
            .enumerate()
            .map(|(i, &x)| {
                let mut rng = pixel_rng(&base, (ch * n + i) as u64);
                corrupt_pixel(&mut rng, x, sigma, spec.spin_ratio, spec.rvin_ratio)
            })
            .unzip();
        planes.push(Plane::new(clean.height(), clean.width(), values)?);
        labels.push(lab);
    }
    let mask = CorruptionMask {
        height: clean.height(),
        width: clean.width(),
        labels,
    };
    Ok((ImageGrid::from_planes(planes)?, mask))
}

fn corrupt_pixel(rng: &mut ChaCha8Rng, x: f64, sigma: f64, s: f64, r: f64) -> (f64, NoiseLabel) {
    let spin: f64 = rng.random();
    let polarity: f64 = rng.random();
    let rvin: f64 = rng.random();
    let q: f64 = rng.random();
    if spin < s {
        if polarity < 0.5 {
            (0.0, NoiseLabel::SpinLow)
        } else {
            (1.0, NoiseLabel::SpinHigh)
        }
    } else if rvin < r {
        (q, NoiseLabel::Rvin)
    } else {
        let g: f64 = rng.sample(StandardNormal);
        (clamp_unit(x + sigma * g), NoiseLabel::Gauss)
    }
}

/// Additive white Gaussian noise only (8-bit `sigma8`), clipped to `[0, 1]`.
pub fn awgn_only(clean: &ImageGrid, sigma8: f64, seed: u64) -> Result<ImageGrid> {
    if !(sigma8.is_finite() && sigma8 >= 0.0) {
        return Err(Error::Config(format!("sigma {sigma8} must be >= 0")));
    }
    let base = ChaCha8Rng::seed_from_u64(seed ^ STAGE_AWGN);
    let sigma = sigma8 / 255.0;
    let n = clean.height() * clean.width();
    let planes = clean
        .planes()
        .iter()
        .enumerate()
        .map(|(ch, plane)| {
            let values = plane
                .data()
                .par_iter()
                .enumerate()
                .map(|(i, &x)| {
                    let mut rng = pixel_rng(&base, (ch * n + i) as u64);
                    let g: f64 = rng.sample(StandardNormal);
                    clamp_unit(x + sigma * g)
                })
                .collect();
            Plane::new(clean.height(), clean.width(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    ImageGrid::from_planes(planes)
}
