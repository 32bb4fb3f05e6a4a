//! Synthetic source/target domains with proximity engineered by construction:
//! the proximal target of each modality is a small perturbation of the source
//! (rotation, added blob), the distant one has disjoint support (offset line,
//! different texture family).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMG_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum TextureFamily {
    /// Sinusoidal gratings with frequency, phase, and orientation ranges.
    Gratings {
        freq: (f64, f64),
        orient: (f64, f64),
        /// Peak amplitude of an additive Gaussian blob (0 disables it).
        blob_amp: f64,
    },
    /// Axis-aligned checkerboards with a range of cell sizes.
    Checker { cell: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainSpec {
    Gmm2d { components: Vec<([f64; 2], f64)> },
    Texture16 { family: TextureFamily },
}

impl DomainSpec {
    pub fn is_gmm(&self) -> bool {
        matches!(self, DomainSpec::Gmm2d { .. })
    }

    fn validate(&self) -> Result<()> {
        if let DomainSpec::Gmm2d { components } = self {
            if components.is_empty() {
                return Err(Error::InvalidArgument("gmm2d needs >= 1 component".into()));
            }
            if components.iter().any(|(_, s)| *s <= 0.0) {
                return Err(Error::InvalidArgument("gmm2d stdev must be > 0".into()));
            }
        }
        Ok(())
    }
}

fn ring8(rotation_deg: f64) -> DomainSpec {
    let components = (0..8)
        .map(|i| {
            let angle = 2.0 * PI * i as f64 / 8.0 + rotation_deg.to_radians();
            ([2.0 * angle.cos(), 2.0 * angle.sin()], 0.02)
        })
        .collect();
    DomainSpec::Gmm2d { components }
}

/// Named domains used across the experiment surface.
pub fn builtin_domain(name: &str) -> Result<DomainSpec> {
    Ok(match name {
        "ring8_src" => ring8(0.0),
        "ring8_rot_proximal" => ring8(10.0),
        "line3_distant" => DomainSpec::Gmm2d {
            components: vec![
                ([4.0, 0.0], 0.05),
                ([5.0, 0.0], 0.05),
                ([6.0, 0.0], 0.05),
            ],
        },
        "gratings_src" => DomainSpec::Texture16 {
            family: TextureFamily::Gratings { freq: (1.0, 3.0), orient: (0.0, PI), blob_amp: 0.0 },
        },
        "gratings_blob_proximal" => DomainSpec::Texture16 {
            family: TextureFamily::Gratings { freq: (1.0, 3.0), orient: (0.0, PI), blob_amp: 0.6 },
        },
        "checker_distant" => DomainSpec::Texture16 {
            family: TextureFamily::Checker { cell: (2, 5) },
        },
        other => return Err(Error::InvalidArgument(format!("unknown domain '{other}'"))),
    })
}

fn sample_texture(family: &TextureFamily, rng: &mut impl Rng, out: &mut [f64]) {
    let n = IMG_SIZE as f64;
    match family {
        TextureFamily::Gratings { freq, orient, blob_amp } => {
            let f = rng.gen_range(freq.0..freq.1);
            let theta = rng.gen_range(orient.0..orient.1);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let (c, s) = (theta.cos(), theta.sin());
            let (bx, by, br) = if *blob_amp > 0.0 {
                (
                    rng.gen_range(0.25..0.75),
                    rng.gen_range(0.25..0.75),
                    rng.gen_range(0.1..0.25),
                )
            } else {
                (0.0, 0.0, 1.0)
            };
            for y in 0..IMG_SIZE {
                for x in 0..IMG_SIZE {
                    let (u, v) = (x as f64 / n, y as f64 / n);
                    let mut val = (2.0 * PI * f * (c * u + s * v) + phase).sin();
                    if *blob_amp > 0.0 {
                        let d2 = (u - bx).powi(2) + (v - by).powi(2);
                        val += blob_amp * (-d2 / (2.0 * br * br)).exp();
                    }
                    out[y * IMG_SIZE + x] = val.clamp(-1.0, 1.0);
                }
            }
        }
        TextureFamily::Checker { cell } => {
            let size = rng.gen_range(cell.0..=cell.1);
            let (ox, oy) = (rng.gen_range(0..size), rng.gen_range(0..size));
            let polarity = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for y in 0..IMG_SIZE {
                for x in 0..IMG_SIZE {
                    let parity = (((x + ox) / size) + ((y + oy) / size)) % 2;
                    out[y * IMG_SIZE + x] = if parity == 0 { polarity } else { -polarity };
                }
            }
        }
    }
}

/// Draw `n` samples; deterministic for a given seed. gmm2d picks a component
/// uniformly and adds isotropic Gaussian noise.
pub fn sample(domain: &DomainSpec, n: usize, seed: u64) -> Result<Tensor> {
    domain.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match domain {
        DomainSpec::Gmm2d { components } => {
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut values = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let (mean, std) = components[rng.gen_range(0..components.len())];
                values.push(mean[0] + std * normal.sample(&mut rng));
                values.push(mean[1] + std * normal.sample(&mut rng));
            }
            Tensor::new(vec![n, 2], values)
        }
        DomainSpec::Texture16 { family } => {
            let mut values = vec![0.0; n * IMG_SIZE * IMG_SIZE];
            for i in 0..n {
                sample_texture(
                    family,
                    &mut rng,
                    &mut values[i * IMG_SIZE * IMG_SIZE..(i + 1) * IMG_SIZE * IMG_SIZE],
                );
            }
            Tensor::new(vec![n, 1, IMG_SIZE, IMG_SIZE], values)
        }
    }
}

/// A pinned k-shot training set for one target domain.
#[derive(Debug, Clone)]
pub struct FewShotSet {
    pub samples: Tensor,
    pub k: usize,
    pub domain_name: String,
    pub seed: u64,
}

/// Size of the pregenerated pool that few-shot sets are drawn from. Fixed so
/// that shot sweeps with the same seed select nested subsets.
pub const FEW_SHOT_POOL: usize = 1024;

/// Draw `k` samples without replacement from a pregenerated pool. For a fixed
/// seed, increasing k yields nested supersets.
pub fn few_shot(domain: &DomainSpec, domain_name: &str, k: usize, seed: u64) -> Result<FewShotSet> {
    if k < 1 {
        return Err(Error::InvalidArgument("few_shot needs k >= 1".into()));
    }
    if k > FEW_SHOT_POOL {
        return Err(Error::InvalidArgument(format!(
            "few_shot k {} exceeds pool size {}",
            k, FEW_SHOT_POOL
        )));
    }
    let pool = sample(domain, FEW_SHOT_POOL, seed.wrapping_mul(0x9e3779b97f4a7c15))?;
    let mut order: Vec<usize> = (0..FEW_SHOT_POOL).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let row = pool.len() / FEW_SHOT_POOL;
    let mut values = Vec::with_capacity(k * row);
    for &idx in order.iter().take(k) {
        values.extend_from_slice(&pool.values[idx * row..(idx + 1) * row]);
    }
    let mut shape = pool.shape.clone();
    shape[0] = k;
    Ok(FewShotSet {
        samples: Tensor::new(shape, values)?,
        k,
        domain_name: domain_name.to_string(),
        seed,
    })
}

/// Write gmm2d samples as `x,y` CSV rows.
pub fn export_csv(samples: &Tensor, path: &std::path::Path) -> Result<()> {
    if samples.rank() != 2 || samples.shape[1] != 2 {
        return Err(Error::InvalidShape("csv export expects [n, 2] samples".into()));
    }
    let mut out = String::from("x,y\n");
    for row in samples.values.chunks(2) {
        out.push_str(&format!("{},{}\n", row[0], row[1]));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write one [1, 16, 16] image as binary PGM, mapping [-1, 1] to [0, 255].
pub fn export_pgm(image: &[f64], path: &std::path::Path) -> Result<()> {
    if image.len() != IMG_SIZE * IMG_SIZE {
        return Err(Error::InvalidShape("pgm export expects a 16x16 image".into()));
    }
    let mut buf = format!("P5\n{} {}\n255\n", IMG_SIZE, IMG_SIZE).into_bytes();
    buf.extend(
        image
            .iter()
            .map(|v| (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8),
    );
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
}
