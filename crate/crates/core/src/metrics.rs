//! Evaluation metrics: Fréchet distance with a mean/trace split, KID
//! (polynomial-kernel MMD), intra-cluster diversity, GMM mode coverage, and
//! the restrained-update ratio q%. All metrics are pure functions of their
//! inputs; the conv feature extractor is generated once from a fixed seed and
//! never trained.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{DomainSpec, FewShotSet};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::nets::{forward, Activation, LayerKind, LayerSpec, LayerVars};
use crate::persist::Checkpoint;
use crate::tensor::Tensor;

/// Seed for the fixed random-conv feature network. Changing this constant
/// changes every image-domain metric, so it is part of the artifact contract.
pub const FEATURE_SEED: u64 = 0x5EED_F3A7;

/// Output dimension of the conv feature extractor.
pub const CONV_FEATURE_DIM: usize = 32;

/// Maps raw samples into the feature space all distances are measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureExtractor {
    /// Raw 2-D coordinates pass through unchanged.
    Identity2d,
    /// A frozen, seed-generated conv net over 1x16x16 images; a stand-in for
    /// pretrained perceptual features.
    SeededRandomConv,
}

fn conv_feature_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec {
            name: "f.l0".into(),
            kind: LayerKind::Conv { c_in: 1, c_out: 16, k: 3, stride: 2, padding: 1 },
            activation: Activation::LeakyRelu,
        },
        LayerSpec {
            name: "f.l1".into(),
            kind: LayerKind::Conv { c_in: 16, c_out: CONV_FEATURE_DIM, k: 3, stride: 2, padding: 1 },
            activation: Activation::LeakyRelu,
        },
        LayerSpec {
            name: "f.p0".into(),
            kind: LayerKind::MeanPoolSpatial,
            activation: Activation::None,
        },
    ]
}

fn conv_feature_params() -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
    let mut params = BTreeMap::new();
    for layer in conv_feature_layers() {
        let LayerKind::Conv { c_in, c_out, k, .. } = layer.kind else { continue };
        let fan_in = c_in * k * k;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let w = Tensor::new(
            vec![c_out, c_in, k, k],
            (0..c_out * fan_in).map(|_| normal.sample(&mut rng)).collect(),
        )
        .expect("feature weight");
        params.insert(layer.weight_name().unwrap(), w);
        params.insert(layer.bias_name().unwrap(), Tensor::zeros(vec![c_out]));
    }
    params
}

impl FeatureExtractor {
    /// Map a batch of samples to `[n, d]` features.
    pub fn extract(&self, samples: &Tensor) -> Result<Tensor> {
        match self {
            FeatureExtractor::Identity2d => {
                if samples.rank() != 2 || samples.shape[1] != 2 {
                    return Err(Error::InvalidShape(format!(
                        "identity2d expects [n,2], got {:?}",
                        samples.shape
                    )));
                }
                Ok(samples.clone())
            }
            FeatureExtractor::SeededRandomConv => {
                if samples.shape != [samples.shape.first().copied().unwrap_or(0), 1, 16, 16] {
                    return Err(Error::InvalidShape(format!(
                        "seeded_random_conv expects [n,1,16,16], got {:?}",
                        samples.shape
                    )));
                }
                let n = samples.shape[0];
                if n == 0 {
                    return Ok(Tensor::zeros(vec![0, CONV_FEATURE_DIM]));
                }
                let layers = conv_feature_layers();
                let params = conv_feature_params();
                let mut tape = Tape::new();
                let x = tape.constant(samples.clone());
                let mut vars = BTreeMap::new();
                for layer in &layers {
                    if let (Some(wn), Some(bn)) = (layer.weight_name(), layer.bias_name()) {
                        let w = tape.constant(params[&wn].clone());
                        let b = tape.constant(params[&bn].clone());
                        vars.insert(layer.name.clone(), LayerVars { w, b });
                    }
                }
                let out = forward(&mut tape, &layers, &vars, x)?;
                tape.value(out).clone().reshaped(vec![n, CONV_FEATURE_DIM])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fréchet distance

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetResult {
    pub total: f64,
    pub mean_component: f64,
    pub trace_component: f64,
}

fn check_features(feats: &Tensor, what: &str) -> Result<(usize, usize)> {
    if feats.rank() != 2 {
        return Err(Error::InvalidShape(format!("{what}: expected [n,d] features")));
    }
    let (n, d) = (feats.shape[0], feats.shape[1]);
    if d == 0 || d > 64 {
        return Err(Error::InvalidShape(format!("{what}: feature dim {d} out of range 1..=64")));
    }
    Ok((n, d))
}

/// Sample mean and population covariance of `[n, d]` features.
pub fn moments(feats: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = check_features(feats, "moments")?;
    if n == 0 {
        return Err(Error::InvalidArgument("moments of empty sample".into()));
    }
    let mut mu = DVector::zeros(d);
    for row in 0..n {
        for j in 0..d {
            mu[j] += feats.values[row * d + j];
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in 0..n {
        for i in 0..d {
            let ci = feats.values[row * d + i] - mu[i];
            for j in 0..d {
                cov[(i, j)] += ci * (feats.values[row * d + j] - mu[j]);
            }
        }
    }
    cov /= n as f64;
    Ok((mu, cov))
}

/// Clamped principal square root of a symmetric PSD matrix. Eigenvalues in
/// [-1e-8, 0) clamp to zero; anything more negative is a numeric error.
fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-8 {
            return Err(Error::Numeric(format!("covariance not PSD: eigenvalue {v}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians given their moments directly.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<FrechetResult> {
    if mu_a.len() != mu_b.len() || cov_a.shape() != cov_b.shape() {
        return Err(Error::InvalidShape("moment dimension mismatch".into()));
    }
    let mean_component = (mu_a - mu_b).norm_squared();
    let b_half = sym_sqrt(cov_b)?;
    let inner = &b_half * cov_a * &b_half;
    let cross = sym_sqrt(&inner)?;
    let trace_component = cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    // Exact zero distance can land a hair below zero in floating point.
    let trace_component = if trace_component > -1e-8 {
        trace_component.max(0.0)
    } else {
        return Err(Error::Numeric(format!("negative trace component {trace_component}")));
    };
    Ok(FrechetResult {
        total: mean_component + trace_component,
        mean_component,
        trace_component,
    })
}

/// Fréchet distance between the Gaussian fits of two feature samples.
pub fn frechet(feats_a: &Tensor, feats_b: &Tensor) -> Result<FrechetResult> {
    let (_, da) = check_features(feats_a, "frechet a")?;
    let (_, db) = check_features(feats_b, "frechet b")?;
    if da != db {
        return Err(Error::InvalidShape(format!("feature dims {da} vs {db}")));
    }
    let (mu_a, cov_a) = moments(feats_a)?;
    let (mu_b, cov_b) = moments(feats_b)?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

// ---------------------------------------------------------------------------
// KID

fn poly_kernel(x: &[f64], y: &[f64], d: usize) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let v = dot / d as f64 + 1.0;
    v * v * v
}

/// Unbiased squared-MMD estimate with the cubic polynomial kernel
/// (x.y/d + 1)^3.
pub fn kid(feats_a: &Tensor, feats_b: &Tensor) -> Result<f64> {
    let (n, da) = check_features(feats_a, "kid a")?;
    let (m, db) = check_features(feats_b, "kid b")?;
    if da != db {
        return Err(Error::InvalidShape(format!("feature dims {da} vs {db}")));
    }
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument("kid needs at least 2 samples per side".into()));
    }
    let d = da;
    let row_a = |i: usize| &feats_a.values[i * d..(i + 1) * d];
    let row_b = |i: usize| &feats_b.values[i * d..(i + 1) * d];

    let mut k_aa = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                k_aa += poly_kernel(row_a(i), row_a(j), d);
            }
        }
    }
    let mut k_bb = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                k_bb += poly_kernel(row_b(i), row_b(j), d);
            }
        }
    }
    let mut k_ab = 0.0;
    for i in 0..n {
        for j in 0..m {
            k_ab += poly_kernel(row_a(i), row_b(j), d);
        }
    }
    Ok(k_aa / (n * (n - 1)) as f64 + k_bb / (m * (m - 1)) as f64
        - 2.0 * k_ab / (n * m) as f64)
}

// ---------------------------------------------------------------------------
// Intra-cluster diversity

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Assign each generated sample to its nearest anchor (ties break to the
/// lowest anchor index), then average the mean pairwise feature distance of
/// each non-empty cluster. Clusters with a single member contribute 0.
pub fn intra_diversity(
    generated: &Tensor,
    anchors: &FewShotSet,
    extractor: FeatureExtractor,
) -> Result<f64> {
    if generated.shape.first().copied().unwrap_or(0) == 0 {
        return Err(Error::InvalidArgument("intra_diversity on empty batch".into()));
    }
    let gen_feats = extractor.extract(generated)?;
    let anchor_feats = extractor.extract(&anchors.samples)?;
    let d = gen_feats.shape[1];
    let n = gen_feats.shape[0];
    let k = anchor_feats.shape[0];
    if k == 0 {
        return Err(Error::InvalidArgument("intra_diversity needs at least one anchor".into()));
    }

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..n {
        let gi = &gen_feats.values[i * d..(i + 1) * d];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for a in 0..k {
            let dist = sq_dist(gi, &anchor_feats.values[a * d..(a + 1) * d]);
            if dist < best_d {
                best_d = dist;
                best = a;
            }
        }
        clusters[best].push(i);
    }

    let mut total = 0.0;
    let mut used = 0usize;
    for members in &clusters {
        if members.is_empty() {
            continue;
        }
        used += 1;
        if members.len() < 2 {
            continue; // single-member cluster contributes 0
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (ai, &i) in members.iter().enumerate() {
            for &j in &members[ai + 1..] {
                sum += sq_dist(
                    &gen_feats.values[i * d..(i + 1) * d],
                    &gen_feats.values[j * d..(j + 1) * d],
                )
                .sqrt();
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / used as f64)
}

// ---------------------------------------------------------------------------
// Mode coverage

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageResult {
    pub covered: usize,
    pub total_modes: usize,
    pub high_quality_frac: f64,
}

/// Count GMM modes with at least max(1, N/(10*modes)) samples within
/// `radius_mult * stdev` of the mode mean, and the fraction of samples near
/// any mode.
pub fn mode_coverage(
    samples: &Tensor,
    domain: &DomainSpec,
    radius_mult: f64,
) -> Result<CoverageResult> {
    let DomainSpec::Gmm2d { components } = domain else {
        return Err(Error::InvalidArgument("mode_coverage requires a 2-D GMM domain".into()));
    };
    if samples.rank() != 2 || samples.shape[1] != 2 {
        return Err(Error::InvalidShape(format!(
            "mode_coverage expects [n,2] samples, got {:?}",
            samples.shape
        )));
    }
    let n = samples.shape[0];
    let modes = components.len();
    let need = std::cmp::max(1, n / (10 * modes));

    let mut counts = vec![0usize; modes];
    let mut high_quality = 0usize;
    for i in 0..n {
        let (x, y) = (samples.values[2 * i], samples.values[2 * i + 1]);
        let mut near_any = false;
        for (m, (mean, stdev)) in components.iter().enumerate() {
            let dist = ((x - mean[0]).powi(2) + (y - mean[1]).powi(2)).sqrt();
            if dist <= radius_mult * stdev {
                counts[m] += 1;
                near_any = true;
            }
        }
        if near_any {
            high_quality += 1;
        }
    }
    Ok(CoverageResult {
        covered: counts.iter().filter(|&&c| c >= need).count(),
        total_modes: modes,
        high_quality_frac: if n == 0 { 0.0 } else { high_quality as f64 / n as f64 },
    })
}

// ---------------------------------------------------------------------------
// Restrained-update ratio q%

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRatio {
    pub gen_q_pct: f64,
    pub disc_q_pct: f64,
}

/// Per-filter relative Frobenius change between a checkpoint's base weights
/// and another checkpoint's effective weights, averaged per network.
pub fn update_ratio(before: &Checkpoint, after: &Checkpoint) -> Result<UpdateRatio> {
    if before.arch != after.arch {
        return Err(Error::InvalidArgument("update_ratio: architecture mismatch".into()));
    }
    let effective = after.effective_weights()?;
    let mut sums = BTreeMap::from([("g", (0.0f64, 0usize)), ("d", (0.0f64, 0usize))]);
    for (weight_name, shape) in before.arch.kernels() {
        let w_before = before
            .tensors
            .get(&weight_name)
            .ok_or_else(|| Error::UnknownParameter(weight_name.clone()))?;
        let w_after = &effective[&weight_name];
        let q = shape.row_width();
        let net = if weight_name.starts_with("g.") { "g" } else { "d" };
        let entry = sums.get_mut(net).unwrap();
        for f in 0..shape.c_out {
            let row_b = &w_before.values[f * q..(f + 1) * q];
            let row_a = &w_after.values[f * q..(f + 1) * q];
            let norm_b = row_b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = sq_dist(row_a, row_b).sqrt();
            if norm_b == 0.0 {
                if diff == 0.0 {
                    entry.1 += 1;
                    continue;
                }
                return Err(Error::Numeric(format!(
                    "update_ratio: zero-norm base filter in {weight_name}"
                )));
            }
            entry.0 += 100.0 * diff / norm_b;
            entry.1 += 1;
        }
    }
    let avg = |key: &str| {
        let (sum, count) = sums[key];
        if count == 0 { 0.0 } else { sum / count as f64 }
    };
    Ok(UpdateRatio { gen_q_pct: avg("g"), disc_q_pct: avg("d") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{builtin_domain, sample};
    use crate::modulation::KernelShape;
    use crate::nets::{ArchDescriptor, ArchKind};
    use rand::Rng;

    fn random_points(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn frechet_self_distance_is_zero() {
        let pts = random_points(50, 1);
        let r = frechet(&pts, &pts).unwrap();
        assert!(r.total.abs() < 1e-9, "total {}", r.total);
        assert!((r.total - (r.mean_component + r.trace_component)).abs() < 1e-9);
    }

    #[test]
    fn frechet_analytic_one_dimensional_cases() {
        // N(0,1) vs N(1,1): distance entirely from the means.
        let r = frechet_from_moments(
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_vec(1, 1, vec![1.0]),
            &DVector::from_vec(vec![1.0]),
            &DMatrix::from_vec(1, 1, vec![1.0]),
        )
        .unwrap();
        assert!((r.total - 1.0).abs() < 1e-12);
        assert!((r.mean_component - 1.0).abs() < 1e-12);
        assert!(r.trace_component.abs() < 1e-12);

        // N(0,4) vs N(0,1): 4 + 1 - 2*2 = 1, entirely from the traces.
        let r = frechet_from_moments(
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_vec(1, 1, vec![4.0]),
            &DVector::from_vec(vec![0.0]),
            &DMatrix::from_vec(1, 1, vec![1.0]),
        )
        .unwrap();
        assert!((r.trace_component - 1.0).abs() < 1e-12);
        assert!((r.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_is_symmetric() {
        let a = random_points(60, 2);
        let b = random_points(40, 3);
        let ab = frechet(&a, &b).unwrap();
        let ba = frechet(&b, &a).unwrap();
        assert!((ab.total - ba.total).abs() < 1e-9);
    }

    #[test]
    fn frechet_rejects_bad_shapes() {
        let a = random_points(10, 4);
        let b = Tensor::zeros(vec![10, 3]);
        assert!(frechet(&a, &b).is_err());
        let non_psd = DMatrix::from_vec(1, 1, vec![-1.0]);
        let mu = DVector::from_vec(vec![0.0]);
        assert!(frechet_from_moments(&mu, &non_psd, &mu, &non_psd).is_err());
    }

    #[test]
    fn kid_point_masses_and_symmetry() {
        let a = Tensor::new(vec![4, 2], vec![0.0; 8]).unwrap();
        let b = Tensor::new(vec![4, 2], vec![5.0; 8]).unwrap();
        let k = kid(&a, &b).unwrap();
        assert!(k > 0.0, "kid {k}");
        let k_rev = kid(&b, &a).unwrap();
        assert!((k - k_rev).abs() < 1e-12);
        assert!((kid(&a, &a).unwrap()).abs() < 1e-12);
        assert!(kid(&a, &Tensor::zeros(vec![1, 2])).is_err());
    }

    #[test]
    fn kid_near_zero_for_split_sample() {
        let pool = random_points(400, 5);
        let half = |start: usize| {
            Tensor::new(vec![200, 2], pool.values[start * 2..(start + 200) * 2].to_vec()).unwrap()
        };
        let k = kid(&half(0), &half(200)).unwrap();
        assert!(k.abs() < 0.05, "kid {k}");
    }

    #[test]
    fn intra_diversity_degenerate_cases() {
        let anchors = FewShotSet {
            samples: Tensor::new(vec![2, 2], vec![0.0, 0.0, 10.0, 10.0]).unwrap(),
            k: 2,
            domain_name: "test".into(),
            seed: 0,
        };
        // All generated samples identical -> zero diversity.
        let same = Tensor::new(vec![4, 2], vec![1.0; 8]).unwrap();
        assert_eq!(intra_diversity(&same, &anchors, FeatureExtractor::Identity2d).unwrap(), 0.0);
        // One sample per cluster -> no pairs -> zero.
        let spread = Tensor::new(vec![2, 2], vec![0.1, 0.0, 9.9, 10.0]).unwrap();
        assert_eq!(intra_diversity(&spread, &anchors, FeatureExtractor::Identity2d).unwrap(), 0.0);
        assert!(intra_diversity(&Tensor::zeros(vec![0, 2]), &anchors, FeatureExtractor::Identity2d)
            .is_err());
    }

    #[test]
    fn intra_diversity_invariant_under_anchor_permutation() {
        let gen = random_points(30, 7);
        let anchor_pts = random_points(5, 8);
        let mut reversed = Vec::new();
        for i in (0..5).rev() {
            reversed.extend_from_slice(&anchor_pts.values[i * 2..(i + 1) * 2]);
        }
        let fwd = FewShotSet { samples: anchor_pts.clone(), k: 5, domain_name: "t".into(), seed: 0 };
        let rev = FewShotSet {
            samples: Tensor::new(vec![5, 2], reversed).unwrap(),
            k: 5,
            domain_name: "t".into(),
            seed: 0,
        };
        let a = intra_diversity(&gen, &fwd, FeatureExtractor::Identity2d).unwrap();
        let b = intra_diversity(&gen, &rev, FeatureExtractor::Identity2d).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a > 0.0);
    }

    #[test]
    fn mode_coverage_trivial_cases() {
        let ring = builtin_domain("ring8_src").unwrap();
        let DomainSpec::Gmm2d { ref components } = ring else { unreachable!() };
        let (mean, _) = components[0];
        let at_mode = Tensor::new(vec![16, 2], (0..16).flat_map(|_| mean).collect()).unwrap();
        let r = mode_coverage(&at_mode, &ring, 3.0).unwrap();
        assert_eq!((r.covered, r.total_modes), (1, 8));
        assert_eq!(r.high_quality_frac, 1.0);

        let far = Tensor::new(vec![16, 2], vec![50.0; 32]).unwrap();
        let r = mode_coverage(&far, &ring, 3.0).unwrap();
        assert_eq!(r.covered, 0);
        assert_eq!(r.high_quality_frac, 0.0);

        assert!(mode_coverage(&far, &builtin_domain("gratings_src").unwrap(), 3.0).is_err());
    }

    #[test]
    fn mode_coverage_full_on_true_samples() {
        let ring = builtin_domain("ring8_src").unwrap();
        let samples = sample(&ring, 8000, 11).unwrap();
        let r = mode_coverage(&samples, &ring, 3.0).unwrap();
        assert_eq!((r.covered, r.total_modes), (8, 8));
        assert!(r.high_quality_frac > 0.95);
    }

    fn single_kernel_checkpoint(values: Vec<f64>) -> Checkpoint {
        let arch = ArchDescriptor {
            kind: ArchKind::Mlp2d,
            latent_dim: 2,
            gen: vec![LayerSpec {
                name: "g.l0".into(),
                kind: LayerKind::Linear { in_dim: 2, out_dim: 1 },
                activation: Activation::None,
            }],
            disc: vec![],
        };
        let mut tensors = BTreeMap::new();
        tensors.insert("g.l0.w".to_string(), Tensor::new(vec![1, 2], values).unwrap());
        tensors.insert("g.l0.b".to_string(), Tensor::zeros(vec![1]));
        Checkpoint { arch, rng_seed: 0, iteration: 0, tensors, modes: BTreeMap::new() }
    }

    #[test]
    fn update_ratio_examples() {
        let before = single_kernel_checkpoint(vec![3.0, 4.0]);
        let same = update_ratio(&before, &before).unwrap();
        assert_eq!(same.gen_q_pct, 0.0);

        // ||[0, 0.5]|| / ||[3,4]|| = 0.5/5 -> 10%.
        let after = single_kernel_checkpoint(vec![3.0, 4.5]);
        let r = update_ratio(&before, &after).unwrap();
        assert!((r.gen_q_pct - 10.0).abs() < 1e-12);
    }

    #[test]
    fn update_ratio_uniform_scaling_gives_uniform_q() {
        let gan = crate::nets::build_gan(ArchKind::Mlp2d, 4, 21).unwrap();
        let before = Checkpoint {
            arch: gan.arch.clone(),
            rng_seed: 21,
            iteration: 0,
            tensors: gan.params.clone(),
            modes: BTreeMap::new(),
        };
        let mut after = before.clone();
        for (name, t) in after.tensors.iter_mut() {
            if name.ends_with(".w") {
                for v in t.values.iter_mut() {
                    *v *= 1.1;
                }
            }
        }
        let r = update_ratio(&before, &after).unwrap();
        assert!((r.gen_q_pct - 10.0).abs() < 1e-9, "gen q% {}", r.gen_q_pct);
        assert!((r.disc_q_pct - 10.0).abs() < 1e-9);

        // Shapes must agree.
        let other = single_kernel_checkpoint(vec![1.0, 2.0]);
        assert!(update_ratio(&before, &other).is_err());
    }

    #[test]
    fn conv_extractor_is_deterministic_and_shaped() {
        let imgs = Tensor::new(
            vec![3, 1, 16, 16],
            (0..3 * 256).map(|i| ((i % 17) as f64 / 8.0) - 1.0).collect(),
        )
        .unwrap();
        let a = FeatureExtractor::SeededRandomConv.extract(&imgs).unwrap();
        let b = FeatureExtractor::SeededRandomConv.extract(&imgs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape, vec![3, CONV_FEATURE_DIM]);
        assert!(FeatureExtractor::SeededRandomConv.extract(&random_points(3, 1)).is_err());
        assert!(FeatureExtractor::Identity2d.extract(&imgs).is_err());
    }

    #[test]
    fn kernel_shape_row_width_matches_layout() {
        // Guard the row-slicing assumption used by update_ratio.
        let s = KernelShape { c_out: 3, c_in: 2, k: 2 };
        assert_eq!(s.row_width(), 8);
        assert_eq!(s.total(), 24);
    }
}
