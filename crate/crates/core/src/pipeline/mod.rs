//! End-to-end training flows: source pretraining, importance probing, and
//! few-shot adaptation under eight update strategies, plus the EWC penalty
//! and per-interval metric history.

pub mod model;
pub mod optimizer;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{sample, DomainSpec, FewShotSet};
use crate::diffcore::{GradientMap, Tape};
use crate::error::{Error, Result};
use crate::importance::{
    kernel_fi_estimate, threshold_mask, FisherAccumulator, ImportanceReport, MeasureKind,
};
use crate::metrics::{
    frechet, intra_diversity, kid, mode_coverage, update_ratio, FeatureExtractor,
};
use crate::modulation::names;
use crate::nets::{build_gan, ArchKind, LayerVars};
use crate::persist::Checkpoint;
use crate::tensor::Tensor;

pub use model::{uniform_plans, FilterPlan, GanModel, WeightPlan};
pub use optimizer::AdamOpt;

/// Global-norm gradient clip guarding against divergence aborts.
pub const GRAD_CLIP_NORM: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Importance-probed kernel modulation: important kernels get frozen-base
    /// rank-1 modulation, the rest fine-tune.
    Adam,
    KmlAll,
    FreezeImportant,
    Finetune,
    Ewc,
    EwcIp,
    Adafm,
    AdafmIp,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "adam" => Strategy::Adam,
            "kml_all" => Strategy::KmlAll,
            "freeze_important" => Strategy::FreezeImportant,
            "finetune" => Strategy::Finetune,
            "ewc" => Strategy::Ewc,
            "ewc_ip" => Strategy::EwcIp,
            "adafm" => Strategy::Adafm,
            "adafm_ip" => Strategy::AdafmIp,
            other => return Err(Error::InvalidArgument(format!("unknown strategy '{other}'"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Adam => "adam",
            Strategy::KmlAll => "kml_all",
            Strategy::FreezeImportant => "freeze_important",
            Strategy::Finetune => "finetune",
            Strategy::Ewc => "ewc",
            Strategy::EwcIp => "ewc_ip",
            Strategy::Adafm => "adafm",
            Strategy::AdafmIp => "adafm_ip",
        }
    }

    /// Strategies that select kernels via an importance report.
    pub fn needs_report(self) -> bool {
        matches!(self, Strategy::Adam | Strategy::FreezeImportant | Strategy::AdafmIp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iter_probe: usize,
    pub iter_adapt: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub t_h: u32,
    pub strategy: Strategy,
    pub ewc_lambda: f64,
    pub k_shots: usize,
    pub seed: u64,
    pub latent_dim: usize,
}

impl TrainConfig {
    pub fn defaults(kind: ArchKind) -> Self {
        match kind {
            ArchKind::Mlp2d => TrainConfig {
                iter_probe: 200,
                iter_adapt: 2000,
                lr: 0.002,
                batch_size: 16,
                t_h: 50,
                strategy: Strategy::Adam,
                ewc_lambda: 10.0,
                k_shots: 10,
                seed: 1,
                latent_dim: 4,
            },
            ArchKind::Conv16 => TrainConfig {
                iter_probe: 50,
                iter_adapt: 1200,
                lr: 0.002,
                batch_size: 4,
                t_h: 75,
                strategy: Strategy::Adam,
                ewc_lambda: 10.0,
                k_shots: 10,
                seed: 1,
                latent_dim: 16,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.k_shots == 0 || self.latent_dim == 0 {
            return Err(Error::Config("batch, shot and latent counts must be positive".into()));
        }
        if self.t_h > 100 {
            return Err(Error::Config(format!("t_h {} outside 0..=100", self.t_h)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(self.ewc_lambda.is_finite() && self.ewc_lambda >= 0.0) {
            return Err(Error::Config(format!("bad ewc_lambda {}", self.ewc_lambda)));
        }
        Ok(())
    }
}

/// Derive an independent deterministic stream from the run seed.
pub fn salted(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt))
}

fn latent_batch(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![n, dim],
        (0..n * dim).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .expect("latent batch")
}

/// FI-weighted quadratic anchor for EWC: per-parameter importance weights and
/// the source values the penalty pulls toward.
#[derive(Debug, Clone)]
pub struct EwcState {
    pub fi: BTreeMap<String, Vec<f64>>,
    pub anchor: BTreeMap<String, Tensor>,
    pub lambda: f64,
}

/// lambda * sum_i F_i (theta_i - theta*_i)^2 over every trainable parameter
/// of the network selected by `prefix`, built on the live tape.
fn ewc_penalty(
    tape: &mut Tape,
    model: &GanModel,
    vars: &BTreeMap<String, LayerVars>,
    ewc: &EwcState,
    prefix: &str,
) -> Result<crate::diffcore::Var> {
    let mut acc = None;
    for layer in model.arch.gen.iter().chain(model.arch.disc.iter()) {
        if !layer.name.starts_with(prefix) {
            continue;
        }
        let Some(weight_name) = layer.weight_name() else { continue };
        let bias_name = layer.bias_name().unwrap();
        let lv = &vars[&layer.name];
        for (param_name, var) in [(&weight_name, lv.w), (&bias_name, lv.b)] {
            let anchor = ewc
                .anchor
                .get(param_name)
                .ok_or_else(|| Error::UnknownParameter(format!("ewc anchor {param_name}")))?;
            let fi = ewc
                .fi
                .get(param_name)
                .ok_or_else(|| Error::UnknownParameter(format!("ewc fi {param_name}")))?;
            let anchor_v = tape.constant(anchor.clone());
            let fi_v = tape.constant(Tensor::new(anchor.shape.clone(), fi.clone())?);
            let diff = tape.sub(var, anchor_v)?;
            let sq = tape.hadamard(diff, diff)?;
            let weighted = tape.hadamard(sq, fi_v)?;
            let term = tape.sum(weighted)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
    }
    acc.ok_or_else(|| Error::InvalidArgument("ewc penalty over empty network".into()))
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub d_loss: f64,
    pub g_loss: f64,
    /// Raw (unclipped) discriminator-loss gradients, for FI accumulation.
    pub d_grads: GradientMap,
}

fn clip_for_update(grads: &GradientMap, clip: Option<f64>) -> GradientMap {
    let mut g = grads.clone();
    if let Some(c) = clip {
        let norm = g.global_norm();
        if norm > c {
            g.scale(c / norm);
        }
    }
    g
}

/// One alternating GAN update. The discriminator minimizes
/// bce(D(real), 1) + bce(D(G(z)), 0); the generator minimizes the
/// non-saturating bce(D(G(z)), 1). Fakes stay attached in the D pass so its
/// gradients cover generator parameters too (used for FI, not for updates).
pub fn gan_step(
    model: &mut GanModel,
    opt_d: &mut AdamOpt,
    opt_g: &mut AdamOpt,
    reals: &Tensor,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    ewc: Option<&EwcState>,
    clip: Option<f64>,
) -> Result<StepOutcome> {
    let latent_dim = model.arch.latent_dim;

    // Discriminator phase.
    let mut tape = Tape::new();
    let vars = model.build_vars(&mut tape)?;
    let z = latent_batch(batch_size, latent_dim, rng);
    let zv = tape.constant(z);
    let fake = model.generator_forward(&mut tape, &vars, zv)?;
    let fake_logits = model.discriminator_forward(&mut tape, &vars, fake)?;
    let realv = tape.constant(reals.clone());
    let real_logits = model.discriminator_forward(&mut tape, &vars, realv)?;
    let n_real = reals.shape[0];
    let l_real = tape.bce_with_logits(real_logits, &vec![1.0; n_real])?;
    let l_fake = tape.bce_with_logits(fake_logits, &vec![0.0; batch_size])?;
    let mut d_loss = tape.add(l_real, l_fake)?;
    if let Some(ewc) = ewc {
        let p = ewc_penalty(&mut tape, model, &vars, ewc, "d.")?;
        let p = tape.scale(p, ewc.lambda)?;
        d_loss = tape.add(d_loss, p)?;
    }
    let d_loss_val = tape.value(d_loss).values[0];
    if !d_loss_val.is_finite() {
        return Err(Error::Numeric(format!("discriminator loss diverged: {d_loss_val}")));
    }
    let d_grads = tape.backward(d_loss)?;
    let upd = clip_for_update(&d_grads, clip);
    opt_d.step(&mut model.leaves, &upd, "d.")?;

    // Generator phase, on the freshly updated discriminator.
    let mut tape = Tape::new();
    let vars = model.build_vars(&mut tape)?;
    let z = latent_batch(batch_size, latent_dim, rng);
    let zv = tape.constant(z);
    let fake = model.generator_forward(&mut tape, &vars, zv)?;
    let fake_logits = model.discriminator_forward(&mut tape, &vars, fake)?;
    let mut g_loss = tape.bce_with_logits(fake_logits, &vec![1.0; batch_size])?;
    if let Some(ewc) = ewc {
        let p = ewc_penalty(&mut tape, model, &vars, ewc, "g.")?;
        let p = tape.scale(p, ewc.lambda)?;
        g_loss = tape.add(g_loss, p)?;
    }
    let g_loss_val = tape.value(g_loss).values[0];
    if !g_loss_val.is_finite() {
        return Err(Error::Numeric(format!("generator loss diverged: {g_loss_val}")));
    }
    let g_grads = tape.backward(g_loss)?;
    let upd = clip_for_update(&g_grads, clip);
    opt_g.step(&mut model.leaves, &upd, "g.")?;

    Ok(StepOutcome { d_loss: d_loss_val, g_loss: g_loss_val, d_grads })
}

/// Train a fresh GAN on the source domain for `cfg.iter_adapt` steps.
pub fn pretrain(domain: &DomainSpec, kind: ArchKind, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let gan = build_gan(kind, cfg.latent_dim, cfg.seed)?;
    let init = Checkpoint {
        arch: gan.arch,
        rng_seed: cfg.seed,
        iteration: 0,
        tensors: gan.params,
        modes: BTreeMap::new(),
    };
    train_from(init, domain, cfg)
}

/// Plain source training of an initialized checkpoint, all weights live.
fn train_from(init: Checkpoint, domain: &DomainSpec, cfg: &TrainConfig) -> Result<Checkpoint> {
    let plans = uniform_plans(&init.arch, &WeightPlan::Finetune);
    let mut init_rng = salted(cfg.seed, 1);
    let mut model = GanModel::from_checkpoint(&init, plans, true, &mut init_rng)?;
    let mut opt_d = AdamOpt::new(cfg.lr);
    let mut opt_g = AdamOpt::new(cfg.lr);
    let mut rng = salted(cfg.seed, 2);
    for step in 0..cfg.iter_adapt {
        let reals = sample(domain, cfg.batch_size, mix_step(cfg.seed, 3, step))?;
        gan_step(
            &mut model,
            &mut opt_d,
            &mut opt_g,
            &reals,
            cfg.batch_size,
            &mut rng,
            None,
            Some(GRAD_CLIP_NORM),
        )?;
    }
    model.to_checkpoint(cfg.seed, cfg.iter_adapt as u64)
}

fn mix_step(seed: u64, salt: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt.wrapping_mul(0x0100_0000_01B3))
        .wrapping_add(step as u64)
}

/// Real batch used during probing: the whole few-shot set when it fits the
/// batch, otherwise a with-replacement draw of `batch` shots.
fn probing_reals(shots: &FewShotSet, batch: usize, rng: &mut ChaCha8Rng) -> Tensor {
    if shots.k <= batch {
        shots.samples.clone()
    } else {
        shot_batch(shots, batch, rng)
    }
}

/// With-replacement draw of `batch` rows from the few-shot set.
fn shot_batch(shots: &FewShotSet, batch: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let row: usize = shots.samples.len() / shots.samples.shape[0];
    let mut values = Vec::with_capacity(batch * row);
    let mut shape = shots.samples.shape.clone();
    shape[0] = batch;
    for _ in 0..batch {
        let i = rng.gen_range(0..shots.samples.shape[0]);
        values.extend_from_slice(&shots.samples.values[i * row..(i + 1) * row]);
    }
    Tensor::new(shape, values).expect("shot batch")
}

/// Modulation parameter values and the gradients seen at one probing step.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub params: BTreeMap<String, Vec<f64>>,
    pub grads: GradientMap,
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub report: ImportanceReport,
    pub trace: Option<Vec<TraceStep>>,
}

/// Importance probing: wrap every kernel in whole-layer rank-1 modulation,
/// train only the modulation parameters for `iter_probe` steps, and
/// accumulate per-parameter importance from the discriminator-loss gradients.
/// The source checkpoint is not modified.
pub fn probe_traced(
    source: &Checkpoint,
    shots: &FewShotSet,
    cfg: &TrainConfig,
    measure: MeasureKind,
    record_trace: bool,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    if cfg.iter_probe == 0 {
        return Err(Error::InvalidArgument(
            "iter_probe must be positive: importance needs at least one step".into(),
        ));
    }
    let plans = uniform_plans(&source.arch, &WeightPlan::KmlWhole);
    let mut init_rng = salted(cfg.seed, 11);
    let mut model = GanModel::from_checkpoint(source, plans, false, &mut init_rng)?;
    let param_lengths: BTreeMap<String, usize> =
        model.leaves.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let mut acc = FisherAccumulator::new(&param_lengths, measure);
    let mut opt_d = AdamOpt::new(cfg.lr);
    let mut opt_g = AdamOpt::new(cfg.lr);
    let mut rng = salted(cfg.seed, 12);
    let mut trace = record_trace.then(Vec::new);
    for _ in 0..cfg.iter_probe {
        let reals = probing_reals(shots, cfg.batch_size, &mut rng);
        let params_before = record_trace.then(|| {
            model
                .leaves
                .iter()
                .map(|(k, v)| (k.clone(), v.values.clone()))
                .collect::<BTreeMap<_, _>>()
        });
        let out = gan_step(
            &mut model,
            &mut opt_d,
            &mut opt_g,
            &reals,
            cfg.batch_size,
            &mut rng,
            None,
            Some(GRAD_CLIP_NORM),
        )?;
        acc.accumulate(&out.d_grads)?;
        if let Some(t) = trace.as_mut() {
            t.push(TraceStep { params: params_before.unwrap(), grads: out.d_grads });
        }
    }

    let mut kernel_fi = BTreeMap::new();
    for (weight_name, shape) in source.arch.kernels() {
        let fi_m1 = acc.mean(&names::layer_param(&weight_name, "m1"))?;
        let fi_m2 = acc.mean(&names::layer_param(&weight_name, "m2"))?;
        for i in 0..shape.c_out {
            kernel_fi.insert(
                names::kernel_id(&weight_name, i),
                kernel_fi_estimate(fi_m1[i], &fi_m2)?,
            );
        }
    }
    Ok(ProbeOutcome { report: threshold_mask(&kernel_fi, cfg.t_h, measure)?, trace })
}

pub fn probe(
    source: &Checkpoint,
    shots: &FewShotSet,
    cfg: &TrainConfig,
    measure: MeasureKind,
) -> Result<ImportanceReport> {
    Ok(probe_traced(source, shots, cfg, measure, false)?.report)
}

fn build_plans(
    arch: &crate::nets::ArchDescriptor,
    strategy: Strategy,
    report: Option<&ImportanceReport>,
) -> Result<BTreeMap<String, WeightPlan>> {
    if strategy.needs_report() {
        let report = report.ok_or_else(|| {
            Error::InvalidArgument(format!("strategy {} needs an importance report", strategy.name()))
        })?;
        // Every report id must name a real kernel.
        let valid: std::collections::BTreeSet<String> = arch
            .kernels()
            .iter()
            .flat_map(|(w, s)| (0..s.c_out).map(move |i| names::kernel_id(w, i)))
            .collect();
        for id in report.kernel_fi.keys() {
            if !valid.contains(id) {
                return Err(Error::InvalidArgument(format!(
                    "importance report names unknown kernel '{id}'"
                )));
            }
        }
    }
    let mut plans = BTreeMap::new();
    for (weight_name, shape) in arch.kernels() {
        let plan = match strategy {
            Strategy::Finetune | Strategy::Ewc | Strategy::EwcIp => WeightPlan::Finetune,
            Strategy::KmlAll => WeightPlan::KmlWhole,
            Strategy::Adafm => WeightPlan::AdafmWhole,
            Strategy::Adam | Strategy::FreezeImportant | Strategy::AdafmIp => {
                let report = report.unwrap();
                let mut ft_next = 0usize;
                let filters = (0..shape.c_out)
                    .map(|i| {
                        if report.is_important(&names::kernel_id(&weight_name, i)) {
                            match strategy {
                                Strategy::Adam => FilterPlan::Kml,
                                Strategy::FreezeImportant => FilterPlan::Frozen,
                                _ => FilterPlan::Adafm,
                            }
                        } else {
                            let f = FilterPlan::Finetune(ft_next);
                            ft_next += 1;
                            f
                        }
                    })
                    .collect();
                WeightPlan::PerFilter(filters)
            }
        };
        plans.insert(weight_name, plan);
    }
    Ok(plans)
}

/// Element-wise Fisher estimates used by the EWC penalty. With
/// `update_during` false, gradients are measured at the frozen source; with
/// true, a short plain fine-tune runs while accumulating (the probing-aware
/// EWC variant).
fn ewc_fisher(
    source: &Checkpoint,
    shots: &FewShotSet,
    cfg: &TrainConfig,
    update_during: bool,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let steps = cfg.iter_probe.max(1);
    let plans = uniform_plans(&source.arch, &WeightPlan::Finetune);
    let mut init_rng = salted(cfg.seed, 21);
    let mut model = GanModel::from_checkpoint(source, plans, true, &mut init_rng)?;
    let param_lengths: BTreeMap<String, usize> =
        model.leaves.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let mut acc = FisherAccumulator::new(&param_lengths, MeasureKind::Fisher);
    let lr = if update_during { cfg.lr } else { 0.0 };
    let mut opt_d = AdamOpt::new(lr);
    let mut opt_g = AdamOpt::new(lr);
    let mut rng = salted(cfg.seed, 22);
    for _ in 0..steps {
        let reals = probing_reals(shots, cfg.batch_size, &mut rng);
        let out = gan_step(
            &mut model,
            &mut opt_d,
            &mut opt_g,
            &reals,
            cfg.batch_size,
            &mut rng,
            None,
            Some(GRAD_CLIP_NORM),
        )?;
        acc.accumulate(&out.d_grads)?;
    }
    let mut fi: BTreeMap<String, Vec<f64>> = param_lengths
        .keys()
        .map(|k| Ok((k.clone(), acc.mean(k)?)))
        .collect::<Result<_>>()?;
    // Normalize to unit mean so ewc_lambda sets the absolute penalty strength
    // regardless of the raw gradient scale.
    let (sum, count) = fi
        .values()
        .fold((0.0, 0usize), |(s, c), v| (s + v.iter().sum::<f64>(), c + v.len()));
    if sum > 0.0 {
        let mean = sum / count as f64;
        for v in fi.values_mut() {
            for x in v.iter_mut() {
                *x /= mean;
            }
        }
    }
    Ok(fi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub fid: f64,
    pub kid: f64,
    pub coverage: f64,
    pub intra_div: f64,
    pub q_pct: f64,
}

pub const HISTORY_HEADER: &str = "iter,d_loss,g_loss,fid,kid,coverage,intra_div,q_pct";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iter, r.d_loss, r.g_loss, r.fid, r.kid, r.coverage, r.intra_div, r.q_pct
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct AdaptationRun {
    pub source: Checkpoint,
    pub report: Option<ImportanceReport>,
    pub adapted: Checkpoint,
    pub history: Vec<HistoryRow>,
}

fn eval_sizes(kind: ArchKind) -> usize {
    match kind {
        ArchKind::Mlp2d => 256,
        ArchKind::Conv16 => 64,
    }
}

fn evaluate(
    model: &GanModel,
    source: &Checkpoint,
    shots: &FewShotSet,
    target: &DomainSpec,
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64, f64, f64)> {
    let kind = model.arch.kind;
    let n = eval_sizes(kind);
    let extractor = match kind {
        ArchKind::Mlp2d => FeatureExtractor::Identity2d,
        ArchKind::Conv16 => FeatureExtractor::SeededRandomConv,
    };
    let mut z_rng = salted(cfg.seed, 31);
    let z = latent_batch(n, cfg.latent_dim, &mut z_rng);
    let generated = model.generate(&z)?;
    let pool = sample(target, n, mix_step(cfg.seed, 32, 0))?;
    let gen_feats = extractor.extract(&generated)?;
    let pool_feats = extractor.extract(&pool)?;
    let fid = frechet(&gen_feats, &pool_feats)?.total;
    let kid_v = kid(&gen_feats, &pool_feats)?;
    let coverage = if target.is_gmm() {
        let c = mode_coverage(&generated, target, 3.0)?;
        c.covered as f64 / c.total_modes as f64
    } else {
        f64::NAN
    };
    let intra = intra_diversity(&generated, shots, extractor)?;
    let current = model.to_checkpoint(cfg.seed, 0)?;
    let q = update_ratio(source, &current)?.gen_q_pct;
    Ok((fid, kid_v, coverage, intra, q))
}

/// Main adaptation (with per-interval metric history) of a source checkpoint
/// toward the few-shot target under the configured strategy.
pub fn adapt(
    source: &Checkpoint,
    report: Option<&ImportanceReport>,
    shots: &FewShotSet,
    target: &DomainSpec,
    cfg: &TrainConfig,
) -> Result<AdaptationRun> {
    cfg.validate()?;
    let plans = build_plans(&source.arch, cfg.strategy, report)?;
    let ewc = match cfg.strategy {
        Strategy::Ewc | Strategy::EwcIp => Some(EwcState {
            fi: ewc_fisher(source, shots, cfg, cfg.strategy == Strategy::EwcIp)?,
            anchor: source.tensors.clone(),
            lambda: cfg.ewc_lambda,
        }),
        _ => None,
    };
    let mut init_rng = salted(cfg.seed, 41);
    let mut model = GanModel::from_checkpoint(source, plans, true, &mut init_rng)?;
    let mut opt_d = AdamOpt::new(cfg.lr);
    let mut opt_g = AdamOpt::new(cfg.lr);
    let mut rng = salted(cfg.seed, 42);
    let interval = (cfg.iter_adapt / 10).max(1);
    let mut history = Vec::new();
    for step in 0..cfg.iter_adapt {
        let reals = shot_batch(shots, cfg.batch_size, &mut rng);
        let out = gan_step(
            &mut model,
            &mut opt_d,
            &mut opt_g,
            &reals,
            cfg.batch_size,
            &mut rng,
            ewc.as_ref(),
            Some(GRAD_CLIP_NORM),
        )?;
        let iter = (step + 1) as u64;
        if (step + 1) % interval == 0 || step + 1 == cfg.iter_adapt {
            let (fid, kid_v, coverage, intra, q) = evaluate(&model, source, shots, target, cfg)?;
            history.push(HistoryRow {
                iter,
                d_loss: out.d_loss,
                g_loss: out.g_loss,
                fid,
                kid: kid_v,
                coverage,
                intra_div: intra,
                q_pct: q,
            });
        }
    }
    Ok(AdaptationRun {
        source: source.clone(),
        report: report.cloned(),
        adapted: model.to_checkpoint(cfg.seed, cfg.iter_adapt as u64)?,
        history,
    })
}

// ---------------------------------------------------------------------------
// Full-matrix Fisher oracle vs the low-rank estimate

/// Per-kernel comparison of the cheap additive FI estimate against the full
/// chain-rule value, both computed from one recorded probing trace.
#[derive(Debug, Clone)]
pub struct OracleComparison {
    /// The streaming importance report of the traced probe.
    pub report: ImportanceReport,
    /// (kernel id, offline estimate, oracle value), architecture order.
    pub per_kernel: Vec<(String, f64, f64)>,
    /// Rank correlation between the estimate and oracle columns.
    pub spearman: f64,
    /// Kernels excluded because a modulation parameter hit exact zero.
    pub skipped: Vec<String>,
}

/// A deliberately small MLP GAN (19 kernels) so the O(kernels x steps) oracle
/// stays cheap. Latent dim 2, hidden width 8.
pub fn oracle_arch() -> crate::nets::ArchDescriptor {
    use crate::nets::{Activation, ArchDescriptor, LayerKind, LayerSpec};
    let linear = |name: &str, i: usize, o: usize, act: Activation| LayerSpec {
        name: name.into(),
        kind: LayerKind::Linear { in_dim: i, out_dim: o },
        activation: act,
    };
    ArchDescriptor {
        kind: ArchKind::Mlp2d,
        latent_dim: 2,
        gen: vec![
            linear("g.l0", 2, 8, Activation::LeakyRelu),
            linear("g.l1", 8, 2, Activation::None),
        ],
        disc: vec![
            linear("d.l0", 2, 8, Activation::LeakyRelu),
            linear("d.l1", 8, 1, Activation::None),
        ],
    }
}

/// Briefly pretrain the oracle net on `domain` so probing gradients are not
/// those of a random function. Forces latent_dim 2 to match the net.
pub fn oracle_source(domain: &DomainSpec, cfg: &TrainConfig) -> Result<Checkpoint> {
    let arch = oracle_arch();
    let mut cfg = *cfg;
    cfg.latent_dim = arch.latent_dim;
    let init = Checkpoint {
        tensors: crate::nets::init_params(&arch, cfg.seed),
        arch,
        rng_seed: cfg.seed,
        iteration: 0,
        modes: BTreeMap::new(),
    };
    train_from(init, domain, &cfg)
}

/// Run a traced probe and compare the additive FI estimate against the full
/// chain-rule oracle on identical gradient traces.
pub fn oracle_comparison(
    source: &Checkpoint,
    shots: &FewShotSet,
    cfg: &TrainConfig,
) -> Result<OracleComparison> {
    let mut cfg = *cfg;
    cfg.latent_dim = source.arch.latent_dim;
    let outcome = probe_traced(source, shots, &cfg, MeasureKind::Fisher, true)?;
    let trace = outcome.trace.expect("trace requested");
    let steps = trace.len() as f64;

    let mut per_kernel = Vec::new();
    let mut skipped = Vec::new();
    for (weight_name, shape) in source.arch.kernels() {
        let m1_name = names::layer_param(&weight_name, "m1");
        let m2_name = names::layer_param(&weight_name, "m2");
        // Offline recomputation of the streaming estimator from the trace.
        let q = shape.row_width();
        let mut fi_m1 = vec![0.0; shape.c_out];
        let mut fi_m2 = vec![0.0; q];
        for step in &trace {
            let g1 = step.grads.get(&m1_name).expect("m1 gradient");
            let g2 = step.grads.get(&m2_name).expect("m2 gradient");
            for (f, g) in fi_m1.iter_mut().zip(g1) {
                *f += g * g / steps;
            }
            for (f, g) in fi_m2.iter_mut().zip(g2) {
                *f += g * g / steps;
            }
        }
        for i in 0..shape.c_out {
            let id = names::kernel_id(&weight_name, i);
            let estimate = kernel_fi_estimate(fi_m1[i], &fi_m2)?;
            let mut oracle_sum = 0.0;
            let mut singular = false;
            for step in &trace {
                let m1 = &step.params[&m1_name];
                let m2 = &step.params[&m2_name];
                let g1 = step.grads.get(&m1_name).unwrap();
                let g2 = step.grads.get(&m2_name).unwrap();
                match crate::importance::kernel_fi_oracle(m1[i], m2, g1[i], g2) {
                    Ok(v) => oracle_sum += v,
                    Err(Error::Singularity(_)) => {
                        singular = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if singular {
                skipped.push(id);
            } else {
                per_kernel.push((id, estimate, oracle_sum / steps));
            }
        }
    }
    if per_kernel.len() < 2 {
        return Err(Error::InvalidArgument(
            "too few non-singular kernels for a rank comparison".into(),
        ));
    }
    let est: Vec<f64> = per_kernel.iter().map(|(_, e, _)| *e).collect();
    let orc: Vec<f64> = per_kernel.iter().map(|(_, _, o)| *o).collect();
    let spearman = crate::importance::spearman(&est, &orc)?;
    Ok(OracleComparison { report: outcome.report, per_kernel, spearman, skipped })
}

#[cfg(test)]
mod tests;
