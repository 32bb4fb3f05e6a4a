use std::collections::BTreeMap;

use super::*;
use crate::data::{builtin_domain, few_shot};
use crate::modulation::KernelMode;
use crate::nets::ArchKind;

fn small_cfg() -> TrainConfig {
    TrainConfig {
        iter_probe: 5,
        iter_adapt: 20,
        lr: 0.002,
        batch_size: 8,
        t_h: 50,
        strategy: Strategy::Adam,
        ewc_lambda: 10.0,
        k_shots: 10,
        seed: 7,
        latent_dim: 4,
    }
}

fn ring_source(iters: usize) -> Checkpoint {
    let mut cfg = small_cfg();
    cfg.iter_adapt = iters;
    pretrain(&builtin_domain("ring8_src").unwrap(), ArchKind::Mlp2d, &cfg).unwrap()
}

#[test]
fn untrained_logits_give_two_ln_two() {
    // Zero the discriminator head so every logit is exactly 0: then
    // bce(real,1) + bce(fake,0) = ln 2 + ln 2.
    let gan = crate::nets::build_gan(ArchKind::Mlp2d, 4, 3).unwrap();
    let mut ckpt = Checkpoint {
        arch: gan.arch,
        rng_seed: 3,
        iteration: 0,
        tensors: gan.params,
        modes: BTreeMap::new(),
    };
    let head = ckpt.tensors.get_mut("d.l3.w").unwrap();
    for v in head.values.iter_mut() {
        *v = 0.0;
    }
    let plans = uniform_plans(&ckpt.arch, &WeightPlan::Finetune);
    let mut rng = salted(3, 0);
    let mut model = GanModel::from_checkpoint(&ckpt, plans, true, &mut rng).unwrap();
    let mut opt_d = AdamOpt::new(0.0);
    let mut opt_g = AdamOpt::new(0.0);
    let reals = crate::data::sample(&builtin_domain("ring8_src").unwrap(), 8, 1).unwrap();
    let out = gan_step(&mut model, &mut opt_d, &mut opt_g, &reals, 8, &mut rng, None, None)
        .unwrap();
    assert!((out.d_loss - 2.0 * (2.0f64).ln()).abs() < 1e-12, "d_loss {}", out.d_loss);
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let source = ring_source(0);
    let plans = uniform_plans(&source.arch, &WeightPlan::Finetune);
    let mut rng = salted(1, 0);
    let mut model = GanModel::from_checkpoint(&source, plans, true, &mut rng).unwrap();
    let before = model.leaves.clone();
    let mut opt_d = AdamOpt::new(0.0);
    let mut opt_g = AdamOpt::new(0.0);
    let reals = crate::data::sample(&builtin_domain("ring8_src").unwrap(), 8, 2).unwrap();
    gan_step(&mut model, &mut opt_d, &mut opt_g, &reals, 8, &mut rng, None, None).unwrap();
    assert_eq!(model.leaves, before);
}

#[test]
fn generator_loss_decreases_early_in_training() {
    let domain = builtin_domain("ring8_src").unwrap();
    let cfg = small_cfg();
    let gan = crate::nets::build_gan(ArchKind::Mlp2d, 4, cfg.seed).unwrap();
    let init = Checkpoint {
        arch: gan.arch,
        rng_seed: cfg.seed,
        iteration: 0,
        tensors: gan.params,
        modes: BTreeMap::new(),
    };
    let plans = uniform_plans(&init.arch, &WeightPlan::Finetune);
    let mut init_rng = salted(cfg.seed, 1);
    let mut model = GanModel::from_checkpoint(&init, plans, true, &mut init_rng).unwrap();
    let mut opt_d = AdamOpt::new(cfg.lr);
    let mut opt_g = AdamOpt::new(cfg.lr);
    let mut rng = salted(cfg.seed, 2);
    let mut g_losses = Vec::new();
    for step in 0..100 {
        let reals = crate::data::sample(&domain, cfg.batch_size, mix_step(cfg.seed, 3, step)).unwrap();
        let out = gan_step(
            &mut model,
            &mut opt_d,
            &mut opt_g,
            &reals,
            cfg.batch_size,
            &mut rng,
            None,
            Some(GRAD_CLIP_NORM),
        )
        .unwrap();
        g_losses.push(out.g_loss);
    }
    let head: f64 = g_losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = g_losses[90..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "g_loss head {head} tail {tail}");
}

#[test]
fn pretrain_zero_iterations_equals_initialization() {
    let mut cfg = small_cfg();
    cfg.iter_adapt = 0;
    let domain = builtin_domain("ring8_src").unwrap();
    let ckpt = pretrain(&domain, ArchKind::Mlp2d, &cfg).unwrap();
    let gan = crate::nets::build_gan(ArchKind::Mlp2d, cfg.latent_dim, cfg.seed).unwrap();
    for (name, t) in &gan.params {
        assert_eq!(&ckpt.tensors[name], t, "{name} differs from init");
    }
}

#[test]
fn pretrain_is_deterministic() {
    let a = ring_source(10);
    let b = ring_source(10);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
}

#[test]
fn probe_is_deterministic_and_pure() {
    let source = ring_source(10);
    let bytes_before = source.to_bytes().unwrap();
    let domain = builtin_domain("ring8_rot_proximal").unwrap();
    let cfg = small_cfg();
    let shots = few_shot(&domain, "ring8_rot_proximal", cfg.k_shots, cfg.seed).unwrap();
    let a = probe(&source, &shots, &cfg, MeasureKind::Fisher).unwrap();
    let b = probe(&source, &shots, &cfg, MeasureKind::Fisher).unwrap();
    assert_eq!(a, b);
    assert_eq!(source.to_bytes().unwrap(), bytes_before);
    assert!(a.kernel_fi.values().all(|v| *v >= 0.0));

    let mut cfg0 = cfg;
    cfg0.iter_probe = 0;
    assert!(probe(&source, &shots, &cfg0, MeasureKind::Fisher).is_err());
}

#[test]
fn probing_trainable_fraction_small_on_conv16() {
    let gan = crate::nets::build_gan(ArchKind::Conv16, 16, 1).unwrap();
    let ckpt = Checkpoint {
        arch: gan.arch,
        rng_seed: 1,
        iteration: 0,
        tensors: gan.params,
        modes: BTreeMap::new(),
    };
    let plans = uniform_plans(&ckpt.arch, &WeightPlan::KmlWhole);
    let mut rng = salted(1, 11);
    let model = GanModel::from_checkpoint(&ckpt, plans, false, &mut rng).unwrap();
    let trainable: usize = model.leaves.values().map(|t| t.len()).sum();
    let total = ckpt.arch.total_param_count();
    let frac = trainable as f64 / total as f64;
    assert!(frac < 0.05, "probing trains {trainable}/{total} = {frac}");
}

#[test]
fn adapt_adam_keeps_important_bases_frozen() {
    let source = ring_source(30);
    let domain = builtin_domain("line3_distant").unwrap();
    let cfg = small_cfg();
    let shots = few_shot(&domain, "line3_distant", cfg.k_shots, cfg.seed).unwrap();
    let report = probe(&source, &shots, &cfg, MeasureKind::Fisher).unwrap();
    let run = adapt(&source, Some(&report), &shots, &domain, &cfg).unwrap();

    let mut checked = 0;
    for (kid, tag) in &run.adapted.modes {
        if tag.mode != KernelMode::Kml {
            continue;
        }
        // kid = "<weight>.k<i>"
        let (weight, idx) = kid.rsplit_once(".k").unwrap();
        let i: usize = idx.parse().unwrap();
        let shape = source
            .arch
            .kernels()
            .into_iter()
            .find(|(w, _)| w == weight)
            .unwrap()
            .1;
        let q = shape.row_width();
        assert_eq!(
            run.adapted.tensors[weight].values[i * q..(i + 1) * q],
            source.tensors[weight].values[i * q..(i + 1) * q],
            "base of important kernel {kid} changed"
        );
        checked += 1;
    }
    assert!(checked > 0, "no kml kernels in adapted checkpoint");
    assert!(!run.history.is_empty());
    assert_eq!(run.history.last().unwrap().iter, cfg.iter_adapt as u64);
}

#[test]
fn adapt_rejects_report_with_unknown_kernel() {
    let source = ring_source(5);
    let domain = builtin_domain("line3_distant").unwrap();
    let cfg = small_cfg();
    let shots = few_shot(&domain, "line3_distant", cfg.k_shots, cfg.seed).unwrap();
    let mut fi = BTreeMap::new();
    fi.insert("g.l9.w.k0".to_string(), 1.0);
    fi.insert("g.l0.w.k0".to_string(), 0.5);
    let bogus = threshold_mask(&fi, 50, MeasureKind::Fisher).unwrap();
    assert!(matches!(
        adapt(&source, Some(&bogus), &shots, &domain, &cfg),
        Err(Error::InvalidArgument(_))
    ));
    assert!(adapt(&source, None, &shots, &domain, &cfg).is_err());
}

#[test]
fn ewc_penalty_vanishes_at_the_anchor() {
    // At the first step parameters still sit on the anchor, so the d_loss of
    // an EWC run equals the plain finetune d_loss exactly.
    let source = ring_source(10);
    let domain = builtin_domain("line3_distant").unwrap();
    let mut cfg = small_cfg();
    cfg.iter_adapt = 1;
    let shots = few_shot(&domain, "line3_distant", cfg.k_shots, cfg.seed).unwrap();

    cfg.strategy = Strategy::Finetune;
    let plain = adapt(&source, None, &shots, &domain, &cfg).unwrap();
    cfg.strategy = Strategy::Ewc;
    cfg.ewc_lambda = 1000.0;
    let ewc = adapt(&source, None, &shots, &domain, &cfg).unwrap();
    assert!(
        (plain.history[0].d_loss - ewc.history[0].d_loss).abs() < 1e-9,
        "penalty at anchor should be 0: {} vs {}",
        plain.history[0].d_loss,
        ewc.history[0].d_loss
    );
}

#[test]
fn ewc_lambda_restrains_parameter_drift() {
    let source = ring_source(30);
    let domain = builtin_domain("line3_distant").unwrap();
    let mut cfg = small_cfg();
    cfg.iter_adapt = 60;
    cfg.strategy = Strategy::Ewc;
    let shots = few_shot(&domain, "line3_distant", cfg.k_shots, cfg.seed).unwrap();

    let drift = |lambda: f64| -> f64 {
        let mut c = cfg;
        c.ewc_lambda = lambda;
        let run = adapt(&source, None, &shots, &domain, &c).unwrap();
        source
            .arch
            .kernels()
            .iter()
            .map(|(w, _)| {
                crate::tensor::l2_diff(
                    &run.adapted.tensors[w].values,
                    &source.tensors[w].values,
                )
                .powi(2)
            })
            .sum::<f64>()
            .sqrt()
    };
    let (d1, d10, d100) = (drift(1.0), drift(10.0), drift(100.0));
    assert!(d1 > d10 && d10 > d100, "drift not monotone: {d1} {d10} {d100}");
}

#[test]
fn effective_weights_match_tape_assembly() {
    // The persisted reconstruction and the on-tape graph must agree for a
    // mixed per-filter plan.
    let source = ring_source(5);
    let domain = builtin_domain("line3_distant").unwrap();
    let cfg = small_cfg();
    let shots = few_shot(&domain, "line3_distant", cfg.k_shots, cfg.seed).unwrap();
    let report = probe(&source, &shots, &cfg, MeasureKind::Fisher).unwrap();
    let plans = build_plans(&source.arch, Strategy::Adam, Some(&report)).unwrap();
    let mut rng = salted(9, 41);
    let model = GanModel::from_checkpoint(&source, plans, true, &mut rng).unwrap();

    let mut tape = Tape::new();
    let vars = model.build_vars(&mut tape).unwrap();
    let ckpt = model.to_checkpoint(9, 0).unwrap();
    let eff = ckpt.effective_weights().unwrap();
    for layer in model.arch.gen.iter().chain(model.arch.disc.iter()) {
        let Some(w) = layer.weight_name() else { continue };
        let on_tape = tape.value(vars[&layer.name].w);
        let reconstructed = &eff[&w];
        for (a, b) in on_tape.values.iter().zip(&reconstructed.values) {
            assert!((a - b).abs() < 1e-15, "{w}: {a} vs {b}");
        }
    }
}

#[test]
fn all_strategies_run_and_are_deterministic() {
    let source = ring_source(10);
    let domain = builtin_domain("line3_distant").unwrap();
    let mut cfg = small_cfg();
    cfg.iter_adapt = 6;
    cfg.iter_probe = 3;
    let shots = few_shot(&domain, "line3_distant", cfg.k_shots, cfg.seed).unwrap();
    let report = probe(&source, &shots, &cfg, MeasureKind::Fisher).unwrap();
    for strategy in [
        Strategy::Adam,
        Strategy::KmlAll,
        Strategy::FreezeImportant,
        Strategy::Finetune,
        Strategy::Ewc,
        Strategy::EwcIp,
        Strategy::Adafm,
        Strategy::AdafmIp,
    ] {
        cfg.strategy = strategy;
        let rep = strategy.needs_report().then_some(&report);
        let a = adapt(&source, rep, &shots, &domain, &cfg).unwrap();
        let b = adapt(&source, rep, &shots, &domain, &cfg).unwrap();
        assert_eq!(
            a.adapted.to_bytes().unwrap(),
            b.adapted.to_bytes().unwrap(),
            "strategy {} not deterministic",
            strategy.name()
        );
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
    }
}

#[test]
fn oracle_estimate_matches_streaming_and_correlates() {
    let mut cfg = small_cfg();
    cfg.iter_adapt = 40;
    cfg.iter_probe = 10;
    let src = builtin_domain("ring8_src").unwrap();
    let tgt = builtin_domain("line3_distant").unwrap();
    let source = oracle_source(&src, &cfg).unwrap();
    assert!(source.arch.kernels().iter().map(|(_, s)| s.c_out).sum::<usize>() <= 64);
    let shots = few_shot(&tgt, "line3_distant", cfg.k_shots, cfg.seed).unwrap();
    let cmp = oracle_comparison(&source, &shots, &cfg).unwrap();
    // Offline recomputation from the trace equals the streaming accumulator.
    for (id, estimate, _) in &cmp.per_kernel {
        let streaming = cmp.report.kernel_fi[id];
        assert!(
            (estimate - streaming).abs() < 1e-12,
            "{id}: offline {estimate} vs streaming {streaming}"
        );
    }
    assert!(cmp.spearman >= -1.0 && cmp.spearman <= 1.0);
    assert!(cmp.per_kernel.len() + cmp.skipped.len() == 19);
    // Determinism of the whole comparison.
    let again = oracle_comparison(&source, &shots, &cfg).unwrap();
    assert_eq!(again.spearman, cmp.spearman);
}

// Pinned smoke run: at this seed/batch/lr the training trajectory visits a
// checkpoint covering at least 6 of the 8 ring modes within 3000 iterations.
// The eval cadence (every 100 steps) only observes training; it does not
// perturb the parameter or data streams, which match `pretrain` exactly.
#[test]
fn pinned_ring_pretraining_reaches_six_of_eight_modes() {
    use crate::data::sample;
    use crate::metrics::mode_coverage;
    use crate::nets::build_gan;

    let ring = builtin_domain("ring8_src").unwrap();
    let (seed, batch, lr) = (5u64, 256usize, 0.001);
    let gan = build_gan(ArchKind::Mlp2d, 4, seed).unwrap();
    let init = Checkpoint {
        arch: gan.arch,
        rng_seed: seed,
        iteration: 0,
        tensors: gan.params,
        modes: BTreeMap::new(),
    };
    let plans = uniform_plans(&init.arch, &WeightPlan::Finetune);
    let mut init_rng = salted(seed, 1);
    let mut model = GanModel::from_checkpoint(&init, plans, true, &mut init_rng).unwrap();
    let mut opt_d = AdamOpt::new(lr);
    let mut opt_g = AdamOpt::new(lr);
    let mut rng = salted(seed, 2);
    let mut best = 0usize;
    for step in 0..3000usize {
        let reals = sample(&ring, batch, mix_step(seed, 3, step)).unwrap();
        gan_step(
            &mut model,
            &mut opt_d,
            &mut opt_g,
            &reals,
            batch,
            &mut rng,
            None,
            Some(GRAD_CLIP_NORM),
        )
        .unwrap();
        if (step + 1) % 100 == 0 {
            let mut z_rng = salted(seed, 77);
            let z = latent_batch(1000, 4, &mut z_rng);
            let samples = model.generate(&z).unwrap();
            best = best.max(mode_coverage(&samples, &ring, 3.0).unwrap().covered);
            if best >= 6 {
                break;
            }
        }
    }
    assert!(best >= 6, "peak ring coverage {best}/8 never reached 6/8");
}

#[test]
fn strategy_names_round_trip() {
    for name in [
        "adam",
        "kml_all",
        "freeze_important",
        "finetune",
        "ewc",
        "ewc_ip",
        "adafm",
        "adafm_ip",
    ] {
        assert_eq!(Strategy::parse(name).unwrap().name(), name);
    }
    assert!(Strategy::parse("sgd").is_err());
}
