//! Kernel update strategies: rank-constrained modulation of a frozen base
//! kernel via proxy vectors, AdaFM per-channel scale/shift, freeze, and plain
//! fine-tuning, plus trainable-parameter accounting.
//!
//! For a conv kernel W with filters W_i, modulation computes
//! `W_hat_i = W_i . (1 + m1[i] * m2)` elementwise, where m1 and m2 are the
//! trainable proxy vectors and the all-ones term keeps the update residual:
//! zero modulation reproduces the source kernel exactly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stdev for the Gaussian init of m1/m2. Small enough that the effective
/// kernel starts at the source kernel (E|m1*m2| ~ 1e-4).
pub const MODULATION_INIT_STDEV: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelMode {
    Kml,
    Adafm,
    Freeze,
    Finetune,
}

impl KernelMode {
    pub fn as_u8(self) -> u8 {
        match self {
            KernelMode::Kml => 0,
            KernelMode::Adafm => 1,
            KernelMode::Freeze => 2,
            KernelMode::Finetune => 3,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => KernelMode::Kml,
            1 => KernelMode::Adafm,
            2 => KernelMode::Freeze,
            3 => KernelMode::Finetune,
            _ => return Err(Error::Format(format!("unknown kernel mode tag {v}"))),
        })
    }
}

/// Shape of a modulatable weight. Linear layers are treated as k = 1 kernels
/// with c_in = in_dim, so every output row is one "kernel".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelShape {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

impl KernelShape {
    pub fn row_width(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn total(&self) -> usize {
        self.c_out * self.row_width()
    }
}

/// A weight with one update mode. In kml mode the base is frozen and only the
/// proxy vectors train; in finetune mode the base itself is the live tensor.
#[derive(Debug, Clone)]
pub struct ModulatedKernel {
    pub shape: KernelShape,
    pub base: Tensor,
    pub mode: KernelMode,
    pub d_out: usize,
    pub m1: Option<Tensor>,
    pub m2: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

impl ModulatedKernel {
    /// Materialize the effective kernel from the current state.
    pub fn effective_kernel(&self) -> Tensor {
        let q = self.shape.row_width();
        match self.mode {
            KernelMode::Freeze | KernelMode::Finetune => self.base.clone(),
            KernelMode::Kml => {
                let m1 = self.m1.as_ref().expect("kml kernel missing m1");
                let m2 = self.m2.as_ref().expect("kml kernel missing m2");
                let mut out = self.base.clone();
                for i in 0..self.d_out {
                    for j in 0..q {
                        out.values[i * q + j] *= 1.0 + m1.values[i] * m2.values[j];
                    }
                }
                out
            }
            KernelMode::Adafm => {
                let gamma = self.gamma.as_ref().expect("adafm kernel missing gamma");
                let beta = self.beta.as_ref().expect("adafm kernel missing beta");
                let kk = self.shape.k * self.shape.k;
                let mut out = self.base.clone();
                for i in 0..self.shape.c_out {
                    for c in 0..self.shape.c_in {
                        let (g, b) = (
                            gamma.values[i * self.shape.c_in + c],
                            beta.values[i * self.shape.c_in + c],
                        );
                        for e in 0..kk {
                            let idx = (i * self.shape.c_in + c) * kk + e;
                            out.values[idx] = g * out.values[idx] + b;
                        }
                    }
                }
                out
            }
        }
    }

    /// Identifiers + tensors of the trainable parameters for this kernel,
    /// relative names ("m1", "m2", "gamma", "beta", or "w" for finetune).
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor)> {
        match self.mode {
            KernelMode::Freeze => vec![],
            KernelMode::Finetune => vec![("w", &self.base)],
            KernelMode::Kml => vec![
                ("m1", self.m1.as_ref().unwrap()),
                ("m2", self.m2.as_ref().unwrap()),
            ],
            KernelMode::Adafm => vec![
                ("gamma", self.gamma.as_ref().unwrap()),
                ("beta", self.beta.as_ref().unwrap()),
            ],
        }
    }
}

/// Number of trainable parameters for a weight of `shape` under `mode`.
pub fn trainable_param_count(shape: KernelShape, mode: KernelMode, d_out: usize) -> usize {
    match mode {
        KernelMode::Kml => d_out + shape.row_width(),
        KernelMode::Adafm => 2 * shape.c_out * shape.c_in,
        KernelMode::Finetune => shape.total(),
        KernelMode::Freeze => 0,
    }
}

/// Wrap a base weight in the given mode. kml proxy vectors start at
/// Normal(0, 0.01^2); adafm starts at the identity (gamma = 1, beta = 0).
pub fn init_modulation(
    base: Tensor,
    shape: KernelShape,
    mode: KernelMode,
    d_out: usize,
    rng: &mut impl Rng,
) -> Result<ModulatedKernel> {
    if d_out > shape.c_out {
        return Err(Error::InvalidArgument(format!(
            "d_out {} exceeds c_out {}",
            d_out, shape.c_out
        )));
    }
    if base.len() != shape.total() {
        return Err(Error::InvalidShape(format!(
            "base has {} values, shape implies {}",
            base.len(),
            shape.total()
        )));
    }
    let mut mk = ModulatedKernel {
        shape,
        base,
        mode,
        d_out,
        m1: None,
        m2: None,
        gamma: None,
        beta: None,
    };
    match mode {
        KernelMode::Kml => {
            let normal = Normal::new(0.0, MODULATION_INIT_STDEV).unwrap();
            mk.m1 = Some(Tensor::from_vec(
                (0..d_out).map(|_| normal.sample(rng)).collect(),
            ));
            mk.m2 = Some(Tensor::from_vec(
                (0..shape.row_width()).map(|_| normal.sample(rng)).collect(),
            ));
        }
        KernelMode::Adafm => {
            mk.gamma = Some(Tensor::new(
                vec![shape.c_out, shape.c_in],
                vec![1.0; shape.c_out * shape.c_in],
            )?);
            mk.beta = Some(Tensor::zeros(vec![shape.c_out, shape.c_in]));
        }
        KernelMode::Freeze | KernelMode::Finetune => {}
    }
    Ok(mk)
}

/// Naming helpers for modulation parameters stored in checkpoints.
/// Whole-layer modulation lives next to the weight ("g.l0.m1"); per-filter
/// modulation is keyed by kernel id ("g.l0.w.k3.m1").
pub mod names {
    pub fn kernel_id(weight: &str, filter: usize) -> String {
        format!("{weight}.k{filter}")
    }

    pub fn layer_param(weight: &str, kind: &str) -> String {
        let base = weight.strip_suffix(".w").unwrap_or(weight);
        format!("{base}.{kind}")
    }

    pub fn filter_param(weight: &str, filter: usize, kind: &str) -> String {
        format!("{}.{kind}", kernel_id(weight, filter))
    }

    /// Name of the grouped finetune block holding all non-modulated rows.
    pub fn finetune_block(weight: &str) -> String {
        let base = weight.strip_suffix(".w").unwrap_or(weight);
        format!("{base}.wft")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn base(shape: KernelShape, rng: &mut impl Rng) -> Tensor {
        Tensor::new(
            vec![shape.c_out, shape.c_in, shape.k, shape.k],
            (0..shape.total()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn kml_zero_modulation_is_identity_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = KernelShape { c_out: 4, c_in: 3, k: 3 };
        let w = base(shape, &mut rng);
        let mut mk = init_modulation(w.clone(), shape, KernelMode::Kml, 4, &mut rng).unwrap();
        mk.m1 = Some(Tensor::zeros(vec![4]));
        let eff = mk.effective_kernel();
        assert_eq!(eff.values, w.values);

        mk.m1 = Some(Tensor::from_vec(vec![0.5; 4]));
        mk.m2 = Some(Tensor::zeros(vec![shape.row_width()]));
        assert_eq!(mk.effective_kernel().values, w.values);
    }

    #[test]
    fn kml_direct_substitution() {
        let shape = KernelShape { c_out: 1, c_in: 1, k: 1 };
        let mk = ModulatedKernel {
            shape,
            base: Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap(),
            mode: KernelMode::Kml,
            d_out: 1,
            m1: Some(Tensor::from_vec(vec![0.5])),
            m2: Some(Tensor::from_vec(vec![3.0])),
            gamma: None,
            beta: None,
        };
        assert_eq!(mk.effective_kernel().values, vec![2.0 * (1.0 + 1.5)]);
    }

    #[test]
    fn adafm_identity_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = KernelShape { c_out: 3, c_in: 2, k: 3 };
        let w = base(shape, &mut rng);
        let mk = init_modulation(w.clone(), shape, KernelMode::Adafm, 3, &mut rng).unwrap();
        assert_eq!(mk.effective_kernel().values, w.values);
    }

    #[test]
    fn fresh_kml_init_stays_near_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = KernelShape { c_out: 8, c_in: 4, k: 3 };
        let w = base(shape, &mut rng);
        let mk = init_modulation(w.clone(), shape, KernelMode::Kml, 8, &mut rng).unwrap();
        let eff = mk.effective_kernel();
        let max_rel = eff
            .values
            .iter()
            .zip(&w.values)
            .map(|(e, b)| if *b != 0.0 { ((e - b) / b).abs() } else { (e - b).abs() })
            .fold(0.0f64, f64::max);
        // Modulation entries are products of two N(0, 0.01) draws.
        assert!(max_rel < 1e-2, "max relative deviation {max_rel}");
    }

    #[test]
    fn param_counts() {
        let big = KernelShape { c_out: 512, c_in: 512, k: 3 };
        assert_eq!(trainable_param_count(big, KernelMode::Kml, 512), 5120);
        assert_eq!(trainable_param_count(big, KernelMode::Finetune, 512), 2_359_296);
        let small = KernelShape { c_out: 8, c_in: 4, k: 3 };
        assert_eq!(trainable_param_count(small, KernelMode::Kml, 8), 44);
        assert_eq!(trainable_param_count(small, KernelMode::Adafm, 8), 64);
        assert_eq!(trainable_param_count(small, KernelMode::Freeze, 8), 0);
    }

    #[test]
    fn freeze_has_no_trainables() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = KernelShape { c_out: 2, c_in: 2, k: 1 };
        let mk = init_modulation(base(shape, &mut rng), shape, KernelMode::Freeze, 2, &mut rng)
            .unwrap();
        assert!(mk.trainable().is_empty());
    }

    #[test]
    fn d_out_must_not_exceed_c_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = KernelShape { c_out: 2, c_in: 2, k: 1 };
        assert!(init_modulation(base(shape, &mut rng), shape, KernelMode::Kml, 3, &mut rng).is_err());
    }

    #[test]
    fn modulation_matrix_is_rank_one() {
        // The modulation matrix m1 (x) m2, viewed as d_out x (c_in*k*k),
        // has rank <= 1: every 2x2 minor vanishes.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = KernelShape { c_out: 3, c_in: 4, k: 2 };
        let mk = init_modulation(base(shape, &mut rng), shape, KernelMode::Kml, 3, &mut rng)
            .unwrap();
        let (m1, m2) = (mk.m1.unwrap(), mk.m2.unwrap());
        let cols = shape.row_width();
        let m: Vec<f64> = m1
            .values
            .iter()
            .flat_map(|&a| m2.values.iter().map(move |&b| a * b))
            .collect();
        for r1 in 0..m1.len() {
            for r2 in r1 + 1..m1.len() {
                for c1 in 0..cols {
                    for c2 in c1 + 1..cols {
                        let det = m[r1 * cols + c1] * m[r2 * cols + c2]
                            - m[r1 * cols + c2] * m[r2 * cols + c1];
                        assert!(det.abs() < 1e-12);
                    }
                }
            }
        }
    }
}
