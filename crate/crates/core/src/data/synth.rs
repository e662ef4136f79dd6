use std::f64::consts::TAU;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{IdentityDataset, ImageSource, Record};
use crate::error::{Error, Result};
use crate::exec;

pub const SYNTH_TAGS: [&str; 4] = ["A", "B", "C", "D"];

const WAVES_PER_CHANNEL: usize = 8;
const MAX_FREQUENCY: i32 = 3;
const AMPLITUDE: f64 = 0.4;
const MAX_ROTATION: f64 = 6.0 * std::f64::consts::PI / 180.0;
const MAX_SCALE: f64 = 0.05;
const MAX_SHIFT: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub imgs_per_id: usize,
    pub size: usize,
    /// Standard deviation of per-pixel noise, in units of the full 0..1 range.
    pub noise_sigma: f64,
    /// Random rotation, scaling and shift of each variant.
    pub jitter: bool,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ids < 2 || self.imgs_per_id < 2 {
            return Err(Error::InvalidParams(format!(
                "need at least 2 identities and 2 images each, got {} x {}",
                self.n_ids, self.imgs_per_id
            )));
        }
        if self.size == 0 || u32::try_from(self.size).is_err() {
            return Err(Error::InvalidParams(format!("image size {}", self.size)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "noise sigma {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// A smooth periodic colour field on the unit square.
struct Prototype {
    // (fx, fy, phase, amplitude) per channel
    waves: [Vec<(f64, f64, f64, f64)>; 3],
}

impl Prototype {
    fn draw(rng: &mut impl Rng) -> Self {
        let mut channel = || {
            let mut waves: Vec<(f64, f64, f64, f64)> = (0..WAVES_PER_CHANNEL)
                .map(|_| {
                    let (fx, fy) = loop {
                        let fx = rng.random_range(-MAX_FREQUENCY..=MAX_FREQUENCY);
                        let fy = rng.random_range(-MAX_FREQUENCY..=MAX_FREQUENCY);
                        if (fx, fy) != (0, 0) {
                            break (f64::from(fx), f64::from(fy));
                        }
                    };
                    (
                        fx,
                        fy,
                        rng.random_range(0.0..TAU),
                        rng.random_range(0.2..1.0),
                    )
                })
                .collect();
            let total: f64 = waves.iter().map(|w| w.3).sum();
            waves.iter_mut().for_each(|w| w.3 *= AMPLITUDE / total);
            waves
        };
        Self {
            waves: [channel(), channel(), channel()],
        }
    }

    fn at(&self, c: usize, u: f64, v: f64) -> f64 {
        0.5 + self.waves[c]
            .iter()
            .map(|&(fx, fy, ph, a)| a * (TAU * (fx * u + fy * v) + ph).cos())
            .sum::<f64>()
    }
}

/// Renders `prototype` under a random similarity transform plus noise.
fn render(proto: &Prototype, cfg: &SynthConfig, rng: &mut impl Rng) -> RgbImage {
    let (rot, scale, du, dv) = if cfg.jitter {
        (
            rng.random_range(-MAX_ROTATION..=MAX_ROTATION),
            1.0 + rng.random_range(-MAX_SCALE..=MAX_SCALE),
            rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
        )
    } else {
        (0.0, 1.0, 0.0, 0.0)
    };
    let (sin, cos) = rot.sin_cos();
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let side = cfg.size as u32;
    let n = cfg.size as f64;
    RgbImage::from_fn(side, side, |x, y| {
        let px = (f64::from(x) + 0.5) / n - 0.5;
        let py = (f64::from(y) + 0.5) / n - 0.5;
        let u = (cos * px - sin * py) / scale + 0.5 + du;
        let v = (sin * px + cos * py) / scale + 0.5 + dv;
        let mut rgb = [0u8; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let mut val = proto.at(c, u, v);
            if cfg.noise_sigma > 0.0 {
                val += noise.sample(rng);
            }
            *out = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(rgb)
    })
}

/// Synthetic identity clusters: one random smooth prototype per identity and
/// `imgs_per_id` jittered, noisy renderings of it. Identities are tagged
/// round-robin with [`SYNTH_TAGS`].
pub fn synth_dataset(
    n_ids: usize,
    imgs_per_id: usize,
    size: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<IdentityDataset> {
    synth_dataset_with(&SynthConfig {
        n_ids,
        imgs_per_id,
        size,
        noise_sigma,
        jitter: true,
        seed,
    })
}

pub fn synth_dataset_with(cfg: &SynthConfig) -> Result<IdentityDataset> {
    cfg.validate()?;
    let per_id: Vec<Vec<Record>> = exec::map_range(cfg.n_ids, |id| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(id as u64);
        let proto = Prototype::draw(&mut rng);
        let tag = SYNTH_TAGS[id % SYNTH_TAGS.len()];
        (0..cfg.imgs_per_id)
            .map(|_| Record {
                source: ImageSource::Pixels(Arc::new(render(&proto, cfg, &mut rng))),
                identity_id: id,
                tag: Some(tag.to_string()),
            })
            .collect()
    });
    IdentityDataset::new(per_id.into_iter().flatten().collect())
}
