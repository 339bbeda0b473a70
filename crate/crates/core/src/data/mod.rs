//! Synthetic slice volumes with photometric acquisition domains.
//!
//! Geometry (the masks) depends only on the shape statistics of a domain and
//! the volume seed, so two domains with the same shape statistics label a
//! given `(volume_seed, slice_index)` identically and differ only in how the
//! image is rendered.

mod dataset;
mod format;

pub use dataset::{generate_dataset, DataConfig, MANIFEST_FILE, Dataset, DatasetManifest, DomainEntry, SplitEntry, SplitSizes, VolumeEntry};
pub use format::{decode_sample, encode_sample, read_sample, write_sample, SDIM_MAGIC, SDIM_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest per-slice drift of a blob center, in pixels.
const MAX_DRIFT: f64 = 0.8;
/// Relative amplitude of the slice-wise radius oscillation.
const RADIUS_WOBBLE: f64 = 0.1;
/// Width of the soft falloff outside each blob, in pixels.
const EDGE: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainConfig {
    pub name: String,
    /// Inclusive range of blobs forming the foreground.
    pub num_blobs: (usize, usize),
    /// Inclusive range of blob semi-axes, in pixels.
    pub radius: (f64, f64),
    pub fg_intensity: (f64, f64),
    pub bg_intensity: (f64, f64),
    /// Amplitude of the smooth background texture.
    pub bg_texture: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub speckle_sigma: f64,
    /// Box-blur radius in pixels; 0 disables blurring.
    pub blur_radius: usize,
    pub seed: u64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig::source()
    }
}

impl DomainConfig {
    pub fn source() -> Self {
        DomainConfig {
            name: "source".into(),
            num_blobs: (1, 3),
            radius: (7.0, 12.0),
            fg_intensity: (0.65, 0.85),
            bg_intensity: (0.15, 0.35),
            bg_texture: 0.08,
            gamma: 1.0,
            noise_sigma: 0.04,
            speckle_sigma: 0.05,
            blur_radius: 0,
            seed: 1,
        }
    }

    /// Same anatomy as [`DomainConfig::source`], different device.
    pub fn target() -> Self {
        DomainConfig {
            name: "target".into(),
            fg_intensity: (0.55, 0.75),
            bg_intensity: (0.2, 0.4),
            bg_texture: 0.12,
            gamma: 1.3,
            noise_sigma: 0.07,
            speckle_sigma: 0.12,
            blur_radius: 1,
            seed: 2,
            ..DomainConfig::source()
        }
    }

    /// Same anatomy with no degradation at all.
    pub fn clean(name: &str) -> Self {
        DomainConfig {
            name: name.into(),
            bg_texture: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            speckle_sigma: 0.0,
            blur_radius: 0,
            ..DomainConfig::source()
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("domain `{}`: {m}", self.name)));
        if self.name.is_empty() {
            return bad("empty name".into());
        }
        let (b0, b1) = self.num_blobs;
        if b0 == 0 || b0 > b1 {
            return bad(format!("num_blobs range {:?} invalid", self.num_blobs));
        }
        let (r0, r1) = self.radius;
        if !(r0 >= 1.0 && r0 <= r1) {
            return bad(format!("radius range {:?} invalid (need 1 ≤ lo ≤ hi)", self.radius));
        }
        if 2.0 * r1 * (1.0 + RADIUS_WOBBLE) + 2.0 >= image_size as f64 {
            return bad(format!("radius {r1} too large for {image_size}px images"));
        }
        for (what, (lo, hi)) in [("fg_intensity", self.fg_intensity), ("bg_intensity", self.bg_intensity)] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return bad(format!("{what} range ({lo}, {hi}) must be ordered within [0, 1]"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be > 0", self.gamma));
        }
        for (what, v) in [
            ("noise_sigma", self.noise_sigma),
            ("speckle_sigma", self.speckle_sigma),
            ("bg_texture", self.bg_texture),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{what} {v} must be ≥ 0"));
            }
        }
        Ok(())
    }
}

/// One rendered slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H × W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major `{0, 1}`.
    pub mask: Vec<u8>,
    pub volume_id: u32,
    pub slice_index: u32,
    pub domain: String,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn mask_bool(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m != 0).collect()
    }

    pub fn mask_tensor<F: crate::tensor::Float>(&self) -> Tensor<F> {
        let s = self.size();
        Tensor::new(vec![s, s], self.mask.iter().map(|&m| F::of(m as f64)).collect())
            .expect("mask matches image size")
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m != 0).count() as f64 / self.mask.len() as f64
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc ^ mix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    phase: f64,
    freq: f64,
}

/// Blob geometry of a volume; a function of shape statistics and seed only.
fn volume_blobs(dom: &DomainConfig, size: usize, volume_seed: u64) -> Vec<Blob> {
    let mut rng = rng_for(&[0x6E0, volume_seed]);
    let n = rng.random_range(dom.num_blobs.0..=dom.num_blobs.1);
    let (r0, r1) = dom.radius;
    let s = size as f64;
    // Blobs of one volume cluster around a common anchor, like one organ.
    let margin = r1 * (1.0 + RADIUS_WOBBLE) + 1.0;
    let ax = rng.random_range(margin..=s - margin);
    let ay = rng.random_range(margin..=s - margin);
    (0..n)
        .map(|_| {
            let spread = r1;
            Blob {
                cx: ax + rng.random_range(-spread..=spread),
                cy: ay + rng.random_range(-spread..=spread),
                vx: rng.random_range(-MAX_DRIFT..=MAX_DRIFT),
                vy: rng.random_range(-MAX_DRIFT..=MAX_DRIFT),
                rx: rng.random_range(r0..=r1),
                ry: rng.random_range(r0..=r1),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                freq: rng.random_range(0.2..0.6),
            }
        })
        .collect()
}

/// Approximate signed pixel distance to each blob boundary, negative inside.
fn blob_fields(blobs: &[Blob], size: usize, slice: u32) -> Vec<Vec<f64>> {
    let s = size as f64;
    let t = slice as f64;
    blobs
        .iter()
        .map(|b| {
            let wob = 1.0 + RADIUS_WOBBLE * (b.freq * t + b.phase).sin();
            let (rx, ry) = (b.rx * wob, b.ry * wob);
            let margin = rx.max(ry) + 1.0;
            let cx = (b.cx + b.vx * t).clamp(margin, s - margin);
            let cy = (b.cy + b.vy * t).clamp(margin, s - margin);
            let (sa, ca) = b.angle.sin_cos();
            let mut field = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let u = (ca * dx + sa * dy) / rx;
                    let v = (-sa * dx + ca * dy) / ry;
                    // First-order pixel distance to the boundary: (ρ − 1) / |∇ρ|.
                    let rho = (u * u + v * v).sqrt().max(1e-9);
                    let grad = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt() / rho;
                    let d = (rho - 1.0) / grad.max(1e-9);
                    field.push(d);
                }
            }
            field
        })
        .collect()
}

fn box_blur(img: &mut [f64], size: usize, r: usize) {
    if r == 0 {
        return;
    }
    let mut tmp = vec![0.0; img.len()];
    let pass = |src: &[f64], dst: &mut [f64], horizontal: bool| {
        for a in 0..size {
            for b in 0..size {
                let lo = b.saturating_sub(r);
                let hi = (b + r).min(size - 1);
                let mut acc = 0.0;
                for k in lo..=hi {
                    acc += if horizontal { src[a * size + k] } else { src[k * size + a] };
                }
                let v = acc / (hi - lo + 1) as f64;
                if horizontal {
                    dst[a * size + b] = v;
                } else {
                    dst[b * size + a] = v;
                }
            }
        }
    };
    pass(img, &mut tmp, true);
    pass(&tmp, img, false);
}

/// Renders slice `slice_index` of volume `volume_seed` in domain `dom`.
pub fn generate_sample(dom: &DomainConfig, size: usize, volume_seed: u64, slice_index: u32) -> Result<Sample> {
    dom.validate(size)?;
    let blobs = volume_blobs(dom, size, volume_seed);
    let fields = blob_fields(&blobs, size, slice_index);

    let mut vol_rng = rng_for(&[dom.seed, volume_seed]);
    let bg = vol_rng.random_range(dom.bg_intensity.0..=dom.bg_intensity.1);
    let fgs: Vec<f64> = blobs
        .iter()
        .map(|_| vol_rng.random_range(dom.fg_intensity.0..=dom.fg_intensity.1))
        .collect();
    let tex: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                vol_rng.random_range(0.5..2.5),
                vol_rng.random_range(0.5..2.5),
                vol_rng.random_range(0.0..std::f64::consts::TAU),
                vol_rng.random_range(-0.2..0.2),
            )
        })
        .collect();

    let n = size * size;
    let mut mask = vec![0u8; n];
    let mut img = vec![0.0f64; n];
    let s = size as f64;
    for i in 0..n {
        let (y, x) = ((i / size) as f64 / s, (i % size) as f64 / s);
        let mut v = bg;
        for &(fx, fy, ph, drift) in &tex {
            let z = slice_index as f64 * drift;
            v += dom.bg_texture / 3.0 * (std::f64::consts::TAU * (fx * x + fy * y) + ph + z).sin();
        }
        for (field, &fg) in fields.iter().zip(&fgs) {
            let d = field[i];
            if d <= 0.0 {
                mask[i] = 1;
            }
            let w = (1.0 - d / EDGE).clamp(0.0, 1.0);
            v = v * (1.0 - w) + fg * w;
        }
        img[i] = v.clamp(0.0, 1.0);
    }

    if dom.gamma != 1.0 {
        for v in &mut img {
            *v = v.powf(dom.gamma);
        }
    }
    box_blur(&mut img, size, dom.blur_radius);
    let mut rng = rng_for(&[dom.seed, volume_seed, slice_index as u64 + 1]);
    for v in &mut img {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        if dom.speckle_sigma > 0.0 {
            *v *= 1.0 + dom.speckle_sigma * a;
        }
        if dom.noise_sigma > 0.0 {
            *v += dom.noise_sigma * b;
        }
        *v = v.clamp(0.0, 1.0);
    }

    Ok(Sample {
        image: Tensor::new(vec![size, size], img.into_iter().map(|v| v as f32).collect())?,
        mask,
        volume_id: volume_seed as u32,
        slice_index,
        domain: dom.name.clone(),
    })
}

/// Photometrically randomized renderings of a domain's anatomy. Every volume
/// gets its own device (intensities, gamma, noise, speckle, blur, texture),
/// drawn from ranges wide enough to cover both default domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub train_volumes: usize,
    pub val_volumes: usize,
    /// Volume ids start here; they must not collide with dataset volumes.
    pub first_volume: u32,
    pub slices_per_volume: usize,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            train_volumes: 20,
            val_volumes: 5,
            first_volume: 10_000,
            slices_per_volume: 10,
            seed: 7,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_volumes == 0 || self.val_volumes == 0 || self.slices_per_volume == 0 {
            return Err(Error::Validation(format!(
                "pool needs train and val volumes with ≥ 1 slice (got {}/{} × {})",
                self.train_volumes, self.val_volumes, self.slices_per_volume
            )));
        }
        let last = self.first_volume as u64 + (self.train_volumes + self.val_volumes) as u64;
        if last > u32::MAX as u64 {
            return Err(Error::Validation(format!("pool volume ids overflow from {}", self.first_volume)));
        }
        Ok(())
    }

    /// Volume ids of the pool's train and val parts.
    pub fn volume_ids(&self) -> (std::ops::Range<u32>, std::ops::Range<u32>) {
        let a = self.first_volume;
        let b = a + self.train_volumes as u32;
        (a..b, b..b + self.val_volumes as u32)
    }
}

/// The device drawn for pool volume `volume_id`, on the anatomy of `anatomy`.
pub fn pool_domain(anatomy: &DomainConfig, pool_seed: u64, volume_id: u32) -> DomainConfig {
    let mut r = rng_for(&[0x9001, pool_seed, volume_id as u64]);
    let bg0: f64 = r.random_range(0.05..0.45);
    let fg0 = (bg0 + r.random_range(0.15..0.55)).min(0.8);
    DomainConfig {
        name: "pool".into(),
        bg_intensity: (bg0, bg0 + 0.15),
        fg_intensity: (fg0, (fg0 + 0.2).min(1.0)),
        gamma: r.random_range(0.7..1.6),
        noise_sigma: r.random_range(0.0..0.1),
        speckle_sigma: r.random_range(0.0..0.2),
        blur_radius: r.random_range(0..=1),
        bg_texture: r.random_range(0.0..0.15),
        seed: mix(pool_seed ^ volume_id as u64),
        ..anatomy.clone()
    }
}

/// Renders the pool's `(train, val)` samples in memory.
pub fn pool_samples(cfg: &PoolConfig, anatomy: &DomainConfig, image_size: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let render = |ids: std::ops::Range<u32>| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(ids.len() * cfg.slices_per_volume);
        for v in ids {
            let dom = pool_domain(anatomy, cfg.seed, v);
            for s in 0..cfg.slices_per_volume as u32 {
                out.push(generate_sample(&dom, image_size, v as u64, s)?);
            }
        }
        Ok(out)
    };
    let (train, val) = cfg.volume_ids();
    Ok((render(train)?, render(val)?))
}
