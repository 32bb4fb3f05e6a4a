//! A GAN wired for training under a per-weight update plan. The plan decides,
//! for every conv/linear weight, whether the raw tensor trains, stays frozen,
//! or is wrapped in rank-1 or scale/shift modulation — wholesale or filter by
//! filter. Each step rebuilds the effective weights on the tape so gradients
//! flow into exactly the parameters the plan marks trainable.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::modulation::{names, KernelMode, KernelShape, MODULATION_INIT_STDEV};
use crate::nets::{forward, ArchDescriptor, LayerVars};
use crate::persist::{Checkpoint, ModeTag};
use crate::tensor::Tensor;

/// Update mode of a single output filter inside a per-filter plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterPlan {
    /// Row index within the layer's grouped finetune block.
    Finetune(usize),
    Frozen,
    Kml,
    Adafm,
}

/// Update mode of one whole weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightPlan {
    Finetune,
    Frozen,
    /// Rank-1 modulation over the whole weight with `d_out` leading filters
    /// modulated (always c_out here).
    KmlWhole,
    /// Per-(c_out, c_in) scale and shift over the whole weight.
    AdafmWhole,
    PerFilter(Vec<FilterPlan>),
}

/// Trainable state for one network pair. `leaves` hold everything the
/// optimizer updates; `consts` hold frozen base weights and, during probing,
/// the biases.
#[derive(Debug, Clone)]
pub struct GanModel {
    pub arch: ArchDescriptor,
    pub plans: BTreeMap<String, WeightPlan>,
    pub leaves: BTreeMap<String, Tensor>,
    pub consts: BTreeMap<String, Tensor>,
    pub bias_trainable: bool,
}

fn kml_leaf(len: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, MODULATION_INIT_STDEV).unwrap();
    Tensor::from_vec((0..len).map(|_| normal.sample(rng)).collect())
}

impl GanModel {
    /// Wire a checkpoint's parameters into a trainable model under `plans`.
    /// Modulation parameters are freshly initialized from `rng`; the draw
    /// order is the architecture's layer order, then filter order.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        plans: BTreeMap<String, WeightPlan>,
        bias_trainable: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut model = GanModel {
            arch: ckpt.arch.clone(),
            plans,
            leaves: BTreeMap::new(),
            consts: BTreeMap::new(),
            bias_trainable,
        };
        for (weight_name, shape) in ckpt.arch.kernels() {
            let base = ckpt
                .tensors
                .get(&weight_name)
                .ok_or_else(|| Error::UnknownParameter(weight_name.clone()))?
                .clone();
            let plan = model
                .plans
                .get(&weight_name)
                .ok_or_else(|| Error::InvalidArgument(format!("no plan for {weight_name}")))?
                .clone();
            let q = shape.row_width();
            match plan {
                WeightPlan::Finetune => {
                    model.leaves.insert(weight_name.clone(), base);
                }
                WeightPlan::Frozen => {
                    model.consts.insert(weight_name.clone(), base);
                }
                WeightPlan::KmlWhole => {
                    model
                        .leaves
                        .insert(names::layer_param(&weight_name, "m1"), kml_leaf(shape.c_out, rng));
                    model
                        .leaves
                        .insert(names::layer_param(&weight_name, "m2"), kml_leaf(q, rng));
                    model.consts.insert(weight_name.clone(), base);
                }
                WeightPlan::AdafmWhole => {
                    model.leaves.insert(
                        names::layer_param(&weight_name, "gamma"),
                        Tensor::filled(vec![shape.c_out, shape.c_in], 1.0),
                    );
                    model.leaves.insert(
                        names::layer_param(&weight_name, "beta"),
                        Tensor::zeros(vec![shape.c_out, shape.c_in]),
                    );
                    model.consts.insert(weight_name.clone(), base);
                }
                WeightPlan::PerFilter(filters) => {
                    if filters.len() != shape.c_out {
                        return Err(Error::InvalidArgument(format!(
                            "plan for {weight_name} covers {} filters, layer has {}",
                            filters.len(),
                            shape.c_out
                        )));
                    }
                    let mut ft_rows = Vec::new();
                    for (i, f) in filters.iter().enumerate() {
                        match f {
                            FilterPlan::Finetune(idx) => {
                                if *idx != ft_rows.len() / q {
                                    return Err(Error::InvalidArgument(format!(
                                        "finetune block rows of {weight_name} out of order"
                                    )));
                                }
                                ft_rows.extend_from_slice(&base.values[i * q..(i + 1) * q]);
                            }
                            FilterPlan::Kml => {
                                model.leaves.insert(
                                    names::filter_param(&weight_name, i, "m1"),
                                    kml_leaf(1, rng),
                                );
                                model.leaves.insert(
                                    names::filter_param(&weight_name, i, "m2"),
                                    kml_leaf(q, rng),
                                );
                            }
                            FilterPlan::Adafm => {
                                model.leaves.insert(
                                    names::filter_param(&weight_name, i, "gamma"),
                                    Tensor::filled(vec![shape.c_in], 1.0),
                                );
                                model.leaves.insert(
                                    names::filter_param(&weight_name, i, "beta"),
                                    Tensor::zeros(vec![shape.c_in]),
                                );
                            }
                            FilterPlan::Frozen => {}
                        }
                    }
                    if !ft_rows.is_empty() {
                        let n_ft = ft_rows.len() / q;
                        model.leaves.insert(
                            names::finetune_block(&weight_name),
                            Tensor::new(vec![n_ft, q], ft_rows)?,
                        );
                    }
                    model.consts.insert(weight_name.clone(), base);
                }
            }
            // Bias handling is uniform across plans.
            let bias_name = names::layer_param(&weight_name, "b");
            let bias = ckpt
                .tensors
                .get(&bias_name)
                .ok_or_else(|| Error::UnknownParameter(bias_name.clone()))?
                .clone();
            if bias_trainable {
                model.leaves.insert(bias_name, bias);
            } else {
                model.consts.insert(bias_name, bias);
            }
        }
        Ok(model)
    }

    fn weight_var(
        &self,
        tape: &mut Tape,
        weight_name: &str,
        shape: KernelShape,
        natural_shape: &[usize],
    ) -> Result<Var> {
        let q = shape.row_width();
        let plan = &self.plans[weight_name];
        let v = match plan {
            WeightPlan::Finetune => tape.leaf(weight_name, self.leaves[weight_name].clone()),
            WeightPlan::Frozen => tape.constant(self.consts[weight_name].clone()),
            WeightPlan::KmlWhole => {
                let base2d = tape.constant(
                    self.consts[weight_name].clone().reshaped(vec![shape.c_out, q])?,
                );
                let m1_name = names::layer_param(weight_name, "m1");
                let m2_name = names::layer_param(weight_name, "m2");
                let m1 = tape.leaf(m1_name.as_str(), self.leaves[&m1_name].clone());
                let m2 = tape.leaf(m2_name.as_str(), self.leaves[&m2_name].clone());
                let outer = tape.outer(m1, m2)?;
                let ones = tape.constant(Tensor::filled(vec![shape.c_out, q], 1.0));
                let factor = tape.add(ones, outer)?;
                tape.hadamard(base2d, factor)?
            }
            WeightPlan::AdafmWhole => {
                let base2d = tape.constant(
                    self.consts[weight_name].clone().reshaped(vec![shape.c_out, q])?,
                );
                let g_name = names::layer_param(weight_name, "gamma");
                let b_name = names::layer_param(weight_name, "beta");
                let gamma = tape.leaf(g_name.as_str(), self.leaves[&g_name].clone());
                let beta = tape.leaf(b_name.as_str(), self.leaves[&b_name].clone());
                let kk = shape.k * shape.k;
                let g_rep = tape.repeat_inner(gamma, kk, vec![shape.c_out, q])?;
                let b_rep = tape.repeat_inner(beta, kk, vec![shape.c_out, q])?;
                let scaled = tape.hadamard(base2d, g_rep)?;
                tape.add(scaled, b_rep)?
            }
            WeightPlan::PerFilter(filters) => {
                let base2d = tape.constant(
                    self.consts[weight_name].clone().reshaped(vec![shape.c_out, q])?,
                );
                let ft_name = names::finetune_block(weight_name);
                let ft_var = self
                    .leaves
                    .get(&ft_name)
                    .map(|t| tape.leaf(ft_name.as_str(), t.clone()));
                let ones_row = tape.constant(Tensor::filled(vec![1, q], 1.0));
                let mut rows: Vec<(Var, usize)> = Vec::with_capacity(filters.len());
                for (i, f) in filters.iter().enumerate() {
                    match f {
                        FilterPlan::Frozen => rows.push((base2d, i)),
                        FilterPlan::Finetune(idx) => rows.push((ft_var.unwrap(), *idx)),
                        FilterPlan::Kml => {
                            let m1_name = names::filter_param(weight_name, i, "m1");
                            let m2_name = names::filter_param(weight_name, i, "m2");
                            let m1 = tape.leaf(m1_name.as_str(), self.leaves[&m1_name].clone());
                            let m2 = tape.leaf(m2_name.as_str(), self.leaves[&m2_name].clone());
                            let outer = tape.outer(m1, m2)?;
                            let factor = tape.add(ones_row, outer)?;
                            let base_row = tape.concat_rows(&[(base2d, i)])?;
                            let eff = tape.hadamard(base_row, factor)?;
                            rows.push((eff, 0));
                        }
                        FilterPlan::Adafm => {
                            let g_name = names::filter_param(weight_name, i, "gamma");
                            let b_name = names::filter_param(weight_name, i, "beta");
                            let gamma = tape.leaf(g_name.as_str(), self.leaves[&g_name].clone());
                            let beta = tape.leaf(b_name.as_str(), self.leaves[&b_name].clone());
                            let kk = shape.k * shape.k;
                            let g_rep = tape.repeat_inner(gamma, kk, vec![1, q])?;
                            let b_rep = tape.repeat_inner(beta, kk, vec![1, q])?;
                            let base_row = tape.concat_rows(&[(base2d, i)])?;
                            let scaled = tape.hadamard(base_row, g_rep)?;
                            let eff = tape.add(scaled, b_rep)?;
                            rows.push((eff, 0));
                        }
                    }
                }
                tape.concat_rows(&rows)?
            }
        };
        tape.reshape(v, natural_shape.to_vec())
    }

    /// Build the per-layer weight/bias vars for one forward pass.
    pub fn build_vars(&self, tape: &mut Tape) -> Result<BTreeMap<String, LayerVars>> {
        let mut vars = BTreeMap::new();
        for layer in self.arch.gen.iter().chain(self.arch.disc.iter()) {
            let Some(weight_name) = layer.weight_name() else { continue };
            let shape = layer.kernel_shape().unwrap();
            let natural = match layer.kind {
                crate::nets::LayerKind::Linear { in_dim, out_dim } => vec![out_dim, in_dim],
                crate::nets::LayerKind::Conv { c_in, c_out, k, .. } => vec![c_out, c_in, k, k],
                _ => unreachable!(),
            };
            let w = self.weight_var(tape, &weight_name, shape, &natural)?;
            let bias_name = layer.bias_name().unwrap();
            let b = if self.bias_trainable {
                tape.leaf(bias_name.as_str(), self.leaves[&bias_name].clone())
            } else {
                tape.constant(self.consts[&bias_name].clone())
            };
            vars.insert(layer.name.clone(), LayerVars { w, b });
        }
        Ok(vars)
    }

    pub fn generator_forward(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, LayerVars>,
        z: Var,
    ) -> Result<Var> {
        forward(tape, &self.arch.gen, vars, z)
    }

    pub fn discriminator_forward(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, LayerVars>,
        x: Var,
    ) -> Result<Var> {
        forward(tape, &self.arch.disc, vars, x)
    }

    /// Evaluation-only generation from the current parameters.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let vars = self.build_vars(&mut tape)?;
        let out = self.generator_forward(&mut tape, &vars, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Snapshot the model into a checkpoint. Per-filter finetuned rows are
    /// merged back into the base tensor; frozen and modulated rows keep the
    /// base values they were built from.
    pub fn to_checkpoint(&self, rng_seed: u64, iteration: u64) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        let mut modes = BTreeMap::new();
        for (weight_name, shape) in self.arch.kernels() {
            let q = shape.row_width();
            let plan = &self.plans[&weight_name];
            match plan {
                WeightPlan::Finetune => {
                    tensors.insert(weight_name.clone(), self.leaves[&weight_name].clone());
                    tag_all(&mut modes, &weight_name, shape.c_out, KernelMode::Finetune, 0);
                }
                WeightPlan::Frozen => {
                    tensors.insert(weight_name.clone(), self.consts[&weight_name].clone());
                    tag_all(&mut modes, &weight_name, shape.c_out, KernelMode::Freeze, 0);
                }
                WeightPlan::KmlWhole => {
                    tensors.insert(weight_name.clone(), self.consts[&weight_name].clone());
                    for kind in ["m1", "m2"] {
                        let n = names::layer_param(&weight_name, kind);
                        tensors.insert(n.clone(), self.leaves[&n].clone());
                    }
                    tag_all(
                        &mut modes,
                        &weight_name,
                        shape.c_out,
                        KernelMode::Kml,
                        shape.c_out as u32,
                    );
                }
                WeightPlan::AdafmWhole => {
                    tensors.insert(weight_name.clone(), self.consts[&weight_name].clone());
                    for kind in ["gamma", "beta"] {
                        let n = names::layer_param(&weight_name, kind);
                        tensors.insert(n.clone(), self.leaves[&n].clone());
                    }
                    tag_all(&mut modes, &weight_name, shape.c_out, KernelMode::Adafm, 0);
                }
                WeightPlan::PerFilter(filters) => {
                    let mut base = self.consts[&weight_name].clone();
                    for (i, f) in filters.iter().enumerate() {
                        let kid = names::kernel_id(&weight_name, i);
                        match f {
                            FilterPlan::Finetune(idx) => {
                                let ft = &self.leaves[&names::finetune_block(&weight_name)];
                                base.values[i * q..(i + 1) * q]
                                    .copy_from_slice(&ft.values[idx * q..(idx + 1) * q]);
                                modes.insert(kid, ModeTag { mode: KernelMode::Finetune, d_out: 0 });
                            }
                            FilterPlan::Frozen => {
                                modes.insert(kid, ModeTag { mode: KernelMode::Freeze, d_out: 0 });
                            }
                            FilterPlan::Kml => {
                                for kind in ["m1", "m2"] {
                                    let n = names::filter_param(&weight_name, i, kind);
                                    tensors.insert(n.clone(), self.leaves[&n].clone());
                                }
                                modes.insert(kid, ModeTag { mode: KernelMode::Kml, d_out: 1 });
                            }
                            FilterPlan::Adafm => {
                                for kind in ["gamma", "beta"] {
                                    let n = names::filter_param(&weight_name, i, kind);
                                    tensors.insert(n.clone(), self.leaves[&n].clone());
                                }
                                modes.insert(kid, ModeTag { mode: KernelMode::Adafm, d_out: 0 });
                            }
                        }
                    }
                    tensors.insert(weight_name.clone(), base);
                }
            }
            let bias_name = names::layer_param(&weight_name, "b");
            let bias = if self.bias_trainable {
                self.leaves[&bias_name].clone()
            } else {
                self.consts[&bias_name].clone()
            };
            tensors.insert(bias_name, bias);
        }
        Ok(Checkpoint { arch: self.arch.clone(), rng_seed, iteration, tensors, modes })
    }
}

fn tag_all(
    modes: &mut BTreeMap<String, ModeTag>,
    weight: &str,
    c_out: usize,
    mode: KernelMode,
    d_out: u32,
) {
    for i in 0..c_out {
        modes.insert(names::kernel_id(weight, i), ModeTag { mode, d_out });
    }
}

/// Uniform plan builder: every weight gets the same `WeightPlan`.
pub fn uniform_plans(arch: &ArchDescriptor, plan: &WeightPlan) -> BTreeMap<String, WeightPlan> {
    arch.kernels().into_iter().map(|(name, _)| (name, plan.clone())).collect()
}
