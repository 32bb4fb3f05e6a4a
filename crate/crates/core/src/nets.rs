//! Tiny generator/discriminator pairs: an MLP GAN for 2-D point domains and a
//! conv GAN for 16x16 grayscale images. No normalization layers, so the set
//! of modulatable kernels is unambiguous: every conv/linear weight, one
//! "kernel" per output filter or row.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::modulation::KernelShape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchKind {
    Mlp2d,
    Conv16,
}

impl ArchKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp2d" => Ok(ArchKind::Mlp2d),
            "conv16" => Ok(ArchKind::Conv16),
            other => Err(Error::InvalidArgument(format!("unknown arch_kind '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Mlp2d => "mlp2d",
            ArchKind::Conv16 => "conv16",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    LeakyRelu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Linear { in_dim: usize, out_dim: usize },
    Conv { c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize },
    Upsample2x,
    /// Trailing (per-sample) shape after reshape.
    Reshape(Vec<usize>),
    MeanPoolSpatial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn weight_name(&self) -> Option<String> {
        self.has_params().then(|| format!("{}.w", self.name))
    }

    pub fn bias_name(&self) -> Option<String> {
        self.has_params().then(|| format!("{}.b", self.name))
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Linear { .. } | LayerKind::Conv { .. })
    }

    /// Kernel-level view of this layer's weight, if it has one.
    pub fn kernel_shape(&self) -> Option<KernelShape> {
        match self.kind {
            LayerKind::Linear { in_dim, out_dim } => {
                Some(KernelShape { c_out: out_dim, c_in: in_dim, k: 1 })
            }
            LayerKind::Conv { c_in, c_out, k, .. } => Some(KernelShape { c_out, c_in, k }),
            _ => None,
        }
    }
}

/// Full architecture description, serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub kind: ArchKind,
    pub latent_dim: usize,
    pub gen: Vec<LayerSpec>,
    pub disc: Vec<LayerSpec>,
}

impl ArchDescriptor {
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.gen.iter().chain(self.disc.iter())
    }

    /// (weight name, kernel shape) for every modulatable weight in G and D.
    pub fn kernels(&self) -> Vec<(String, KernelShape)> {
        self.layers()
            .filter_map(|l| Some((l.weight_name()?, l.kernel_shape()?)))
            .collect()
    }

    pub fn total_param_count(&self) -> usize {
        self.layers()
            .filter_map(|l| l.kernel_shape())
            .map(|s| s.total() + s.c_out)
            .sum()
    }
}

/// A GAN: architecture plus named parameters for both networks.
/// Generator parameters are prefixed "g.", discriminator parameters "d.".
#[derive(Debug, Clone)]
pub struct GanPair {
    pub arch: ArchDescriptor,
    pub params: BTreeMap<String, Tensor>,
}

fn mlp(prefix: &str, dims: &[usize], last_act: Activation) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        let act = if i + 2 == dims.len() { last_act } else { Activation::LeakyRelu };
        layers.push(LayerSpec {
            name: format!("{prefix}.l{i}"),
            kind: LayerKind::Linear { in_dim: w[0], out_dim: w[1] },
            activation: act,
        });
    }
    layers
}

fn conv16_gen(latent_dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec {
            name: "g.l0".into(),
            kind: LayerKind::Linear { in_dim: latent_dim, out_dim: 512 },
            activation: Activation::LeakyRelu,
        },
        LayerSpec {
            name: "g.r0".into(),
            kind: LayerKind::Reshape(vec![32, 4, 4]),
            activation: Activation::None,
        },
        LayerSpec { name: "g.u0".into(), kind: LayerKind::Upsample2x, activation: Activation::None },
        LayerSpec {
            name: "g.l1".into(),
            kind: LayerKind::Conv { c_in: 32, c_out: 64, k: 3, stride: 1, padding: 1 },
            activation: Activation::LeakyRelu,
        },
        LayerSpec { name: "g.u1".into(), kind: LayerKind::Upsample2x, activation: Activation::None },
        LayerSpec {
            name: "g.l2".into(),
            kind: LayerKind::Conv { c_in: 64, c_out: 32, k: 3, stride: 1, padding: 1 },
            activation: Activation::LeakyRelu,
        },
        LayerSpec {
            name: "g.l3".into(),
            kind: LayerKind::Conv { c_in: 32, c_out: 1, k: 3, stride: 1, padding: 1 },
            activation: Activation::Tanh,
        },
    ]
}

fn conv16_disc() -> Vec<LayerSpec> {
    vec![
        LayerSpec {
            name: "d.l0".into(),
            kind: LayerKind::Conv { c_in: 1, c_out: 32, k: 3, stride: 2, padding: 1 },
            activation: Activation::LeakyRelu,
        },
        LayerSpec {
            name: "d.l1".into(),
            kind: LayerKind::Conv { c_in: 32, c_out: 64, k: 3, stride: 2, padding: 1 },
            activation: Activation::LeakyRelu,
        },
        LayerSpec {
            name: "d.p0".into(),
            kind: LayerKind::MeanPoolSpatial,
            activation: Activation::None,
        },
        LayerSpec {
            name: "d.l2".into(),
            kind: LayerKind::Linear { in_dim: 64, out_dim: 1 },
            activation: Activation::None,
        },
    ]
}

pub fn descriptor(kind: ArchKind, latent_dim: usize) -> Result<ArchDescriptor> {
    if latent_dim < 1 {
        return Err(Error::InvalidArgument("latent_dim must be >= 1".into()));
    }
    let (gen, disc) = match kind {
        ArchKind::Mlp2d => (
            mlp("g", &[latent_dim, 64, 64, 64, 2], Activation::None),
            mlp("d", &[2, 64, 64, 64, 1], Activation::None),
        ),
        ArchKind::Conv16 => (conv16_gen(latent_dim), conv16_disc()),
    };
    Ok(ArchDescriptor { kind, latent_dim, gen, disc })
}

/// He-normal initialization for every weight, zero biases; deterministic for a
/// given seed.
pub fn init_params(arch: &ArchDescriptor, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    // Iterate in layer order (not map order) so draws are position-stable.
    for layer in arch.gen.iter().chain(arch.disc.iter()) {
        let Some(shape) = layer.kernel_shape() else { continue };
        let fan_in = shape.row_width();
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let w_shape = match layer.kind {
            LayerKind::Linear { in_dim, out_dim } => vec![out_dim, in_dim],
            LayerKind::Conv { c_in, c_out, k, .. } => vec![c_out, c_in, k, k],
            _ => unreachable!(),
        };
        let w = Tensor::new(
            w_shape,
            (0..shape.total()).map(|_| normal.sample(&mut rng)).collect(),
        )
        .expect("init weight");
        params.insert(layer.weight_name().unwrap(), w);
        params.insert(layer.bias_name().unwrap(), Tensor::zeros(vec![shape.c_out]));
    }
    params
}

pub fn build_gan(kind: ArchKind, latent_dim: usize, seed: u64) -> Result<GanPair> {
    let arch = descriptor(kind, latent_dim)?;
    let params = init_params(&arch, seed);
    Ok(GanPair { arch, params })
}

/// Weight/bias vars prepared by the caller. Weights may be plain leaves,
/// constants, or assembled modulation graphs; the forward pass does not care.
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
}

/// Run `layers` on `input` inside `tape`, pulling parameter vars from `vars`.
pub fn forward(
    tape: &mut Tape,
    layers: &[LayerSpec],
    vars: &BTreeMap<String, LayerVars>,
    input: Var,
) -> Result<Var> {
    let mut x = input;
    for layer in layers {
        x = match &layer.kind {
            LayerKind::Linear { .. } => {
                let lv = vars
                    .get(&layer.name)
                    .ok_or_else(|| Error::UnknownParameter(layer.name.clone()))?;
                tape.linear(x, lv.w, lv.b)?
            }
            LayerKind::Conv { stride, padding, .. } => {
                let lv = vars
                    .get(&layer.name)
                    .ok_or_else(|| Error::UnknownParameter(layer.name.clone()))?;
                tape.conv2d(x, lv.w, lv.b, *stride, *padding)?
            }
            LayerKind::Upsample2x => tape.upsample2x(x)?,
            LayerKind::Reshape(trailing) => {
                let n = tape.value(x).shape[0];
                let mut shape = vec![n];
                shape.extend_from_slice(trailing);
                tape.reshape(x, shape)?
            }
            LayerKind::MeanPoolSpatial => tape.mean_pool_spatial(x)?,
        };
        x = match layer.activation {
            Activation::None => x,
            Activation::LeakyRelu => tape.leaky_relu(x, 0.2)?,
            Activation::Tanh => tape.tanh(x)?,
        };
    }
    Ok(x)
}

fn check_batch_input(expected_trailing: &[usize], x: &Tensor, what: &str) -> Result<()> {
    if x.rank() == 0 || x.shape[1..] != *expected_trailing {
        return Err(Error::InvalidShape(format!(
            "{what} expects trailing shape {:?}, got {:?}",
            expected_trailing, x.shape
        )));
    }
    Ok(())
}

impl GanPair {
    fn const_vars(&self, tape: &mut Tape, layers: &[LayerSpec]) -> BTreeMap<String, LayerVars> {
        let mut vars = BTreeMap::new();
        for layer in layers {
            if let (Some(wn), Some(bn)) = (layer.weight_name(), layer.bias_name()) {
                let w = tape.constant(self.params[&wn].clone());
                let b = tape.constant(self.params[&bn].clone());
                vars.insert(layer.name.clone(), LayerVars { w, b });
            }
        }
        vars
    }

    /// Evaluation-only generator pass on the frozen current parameters.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        check_batch_input(&[self.arch.latent_dim], z, "generate")?;
        if z.shape[0] == 0 {
            let trailing = output_trailing_shape(self.arch.kind);
            let mut shape = vec![0];
            shape.extend_from_slice(&trailing);
            return Ok(Tensor::zeros(shape));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let vars = self.const_vars(&mut tape, &self.arch.gen);
        let out = forward(&mut tape, &self.arch.gen, &vars, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Evaluation-only discriminator pass; returns one logit per sample.
    pub fn discriminate(&self, x: &Tensor) -> Result<Tensor> {
        check_batch_input(&output_trailing_shape(self.arch.kind), x, "discriminate")?;
        let n = x.shape[0];
        if n == 0 {
            return Ok(Tensor::zeros(vec![0]));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.const_vars(&mut tape, &self.arch.disc);
        let out = forward(&mut tape, &self.arch.disc, &vars, xv)?;
        tape.value(out).clone().reshaped(vec![n])
    }
}

/// Per-sample output shape of the generator / input shape of the discriminator.
pub fn output_trailing_shape(kind: ArchKind) -> Vec<usize> {
    match kind {
        ArchKind::Mlp2d => vec![2],
        ArchKind::Conv16 => vec![1, 16, 16],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic() {
        let a = build_gan(ArchKind::Mlp2d, 8, 1).unwrap();
        let b = build_gan(ArchKind::Mlp2d, 8, 1).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_gan(ArchKind::Mlp2d, 8, 2).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn conv16_generator_shape_and_range() {
        let gan = build_gan(ArchKind::Conv16, 16, 7).unwrap();
        let z = Tensor::new(vec![4, 16], vec![0.3; 64]).unwrap();
        let out = gan.generate(&z).unwrap();
        assert_eq!(out.shape, vec![4, 1, 16, 16]);
        assert!(out.values.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn conv16_discriminator_shape() {
        let gan = build_gan(ArchKind::Conv16, 16, 7).unwrap();
        let x = Tensor::zeros(vec![4, 1, 16, 16]);
        let logits = gan.discriminate(&x).unwrap();
        assert_eq!(logits.shape, vec![4]);
    }

    #[test]
    fn generate_deterministic_and_empty() {
        let gan = build_gan(ArchKind::Mlp2d, 8, 3).unwrap();
        let z = Tensor::new(vec![3, 8], (0..24).map(|i| i as f64 / 24.0).collect()).unwrap();
        let a = gan.generate(&z).unwrap();
        let b = gan.generate(&z).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape, vec![3, 2]);

        let empty = gan.generate(&Tensor::zeros(vec![0, 8])).unwrap();
        assert_eq!(empty.shape, vec![0, 2]);
        let no_logits = gan.discriminate(&Tensor::zeros(vec![0, 2])).unwrap();
        assert_eq!(no_logits.shape, vec![0]);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let gan = build_gan(ArchKind::Mlp2d, 8, 3).unwrap();
        assert!(gan.generate(&Tensor::zeros(vec![2, 5])).is_err());
        assert!(gan.discriminate(&Tensor::zeros(vec![2, 3])).is_err());
    }

    #[test]
    fn zero_latent_rejected() {
        assert!(build_gan(ArchKind::Mlp2d, 0, 1).is_err());
    }

    #[test]
    fn kernel_enumeration_is_stable() {
        let gan = build_gan(ArchKind::Conv16, 16, 9).unwrap();
        let kernels = gan.arch.kernels();
        let names: Vec<&str> = kernels.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            names,
            vec!["g.l0.w", "g.l1.w", "g.l2.w", "g.l3.w", "d.l0.w", "d.l1.w", "d.l2.w"]
        );
    }
}
