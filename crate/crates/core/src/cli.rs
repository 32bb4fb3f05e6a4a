//! Command-line entry point. Each command reads a flat config file, applies
//! flag overrides, writes its artifacts into the configured output directory,
//! and appends a manifest line (command, config hash, seed, artifact hash) to
//! `runs.log` so identical runs are verifiable by hash.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::data::{builtin_domain, export_csv, export_pgm, few_shot, DomainSpec, FewShotSet};
use crate::error::{Error, Result};
use crate::importance::MeasureKind;
use crate::metrics::{
    frechet, intra_diversity, kid, mode_coverage, update_ratio, FeatureExtractor,
};
use crate::nets::{ArchKind, GanPair};
use crate::persist::{atomic_write, load_report, save_report, Checkpoint, Config};
use crate::pipeline::{
    adapt, oracle_comparison, oracle_source, pretrain, probe, AdaptationRun, Strategy,
    TrainConfig,
};
use crate::tensor::Tensor;

pub const SWEEP_THRESHOLDS: [u32; 5] = [0, 25, 50, 75, 90];
pub const SWEEP_SHOTS: [usize; 7] = [1, 5, 10, 25, 50, 100, 200];

#[derive(Parser)]
#[command(name = "akm", version, about = "Few-shot GAN adaptation via Fisher-probed kernel modulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Override the importance quantile percentage.
    #[arg(long = "t-h")]
    t_h: Option<u32>,
    /// Override the number of target shots.
    #[arg(long)]
    shots: Option<usize>,
    /// Override the adaptation strategy.
    #[arg(long)]
    strategy: Option<String>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source GAN and write source.ckpt.
    Pretrain(CommonArgs),
    /// Run importance probing against the target shots; write importance.txt.
    Probe(CommonArgs),
    /// Adapt the source checkpoint to the target; write adapted.ckpt + history.csv.
    Adapt(CommonArgs),
    /// Compute metrics for the adapted (or source) checkpoint; write eval.csv.
    Eval(CommonArgs),
    /// Sample the latest checkpoint's generator.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of samples to generate.
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Probe + adapt once per threshold in {0,25,50,75,90}; write sweep_threshold.csv.
    SweepThreshold(CommonArgs),
    /// Probe + adapt once per shot count in {1,5,10,25,50,100,200}; write sweep_shots.csv.
    SweepShots(CommonArgs),
    /// Compare the additive Fisher estimate against the full chain-rule
    /// oracle on a small net; write oracle_report.csv + oracle_spearman.txt.
    OracleReport(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Pretrain(c)
            | Command::Probe(c)
            | Command::Adapt(c)
            | Command::Eval(c)
            | Command::SweepThreshold(c)
            | Command::SweepShots(c)
            | Command::OracleReport(c) => c,
            Command::Gen { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain(_) => "pretrain",
            Command::Probe(_) => "probe",
            Command::Adapt(_) => "adapt",
            Command::Eval(_) => "eval",
            Command::Gen { .. } => "gen",
            Command::SweepThreshold(_) => "sweep-threshold",
            Command::SweepShots(_) => "sweep-shots",
            Command::OracleReport(_) => "oracle-report",
        }
    }
}

pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 3,
                Error::Numeric(_) => 4,
                _ => 1,
            }
        }
    }
}

/// Everything a command needs from its config file plus overrides.
struct Ctx {
    train: TrainConfig,
    arch: ArchKind,
    cfg: Config,
    out: PathBuf,
    /// Artifact files this command owns, for the manifest hash.
    artifacts: Vec<PathBuf>,
}

fn as_config_err<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    })
}

impl Ctx {
    fn new(args: &CommonArgs) -> Result<Ctx> {
        let mut cfg = as_config_err(Config::load(&args.config))?;
        if let Some(t_h) = args.t_h {
            cfg.set("t_h", t_h.to_string());
        }
        if let Some(shots) = args.shots {
            cfg.set("k_shots", shots.to_string());
        }
        if let Some(strategy) = &args.strategy {
            cfg.set("strategy", strategy.clone());
        }
        if let Some(seed) = args.seed {
            cfg.set("seed", seed.to_string());
        }
        if let Some(out) = &args.out {
            cfg.set("out_dir", out.display().to_string());
        }

        let arch = as_config_err(ArchKind::parse(cfg.require("arch")?))?;
        let mut train = TrainConfig::defaults(arch);
        if let Some(v) = cfg.get_parsed("latent_dim")? {
            train.latent_dim = v;
        }
        if let Some(v) = cfg.get_parsed("iter_probe")? {
            train.iter_probe = v;
        }
        if let Some(v) = cfg.get_parsed("iter_adapt")? {
            train.iter_adapt = v;
        }
        if let Some(v) = cfg.get_parsed("lr")? {
            train.lr = v;
        }
        if let Some(v) = cfg.get_parsed("batch_size")? {
            train.batch_size = v;
        }
        if let Some(v) = cfg.get_parsed("t_h")? {
            train.t_h = v;
        }
        if let Some(v) = cfg.get_parsed("k_shots")? {
            train.k_shots = v;
        }
        if let Some(v) = cfg.get_parsed("seed")? {
            train.seed = v;
        }
        if let Some(v) = cfg.get_parsed("ewc_lambda")? {
            train.ewc_lambda = v;
        }
        if let Some(s) = cfg.get("strategy") {
            train.strategy = as_config_err(Strategy::parse(s))?;
        }
        train.validate()?;
        let out = PathBuf::from(cfg.require("out_dir")?);
        std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
        Ok(Ctx { train, arch, cfg, out, artifacts: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn domain(&self, key: &str) -> Result<(String, DomainSpec)> {
        let name = self.cfg.require(key)?.to_string();
        let spec = as_config_err(builtin_domain(&name))?;
        Ok((name, spec))
    }

    fn target_shots(&self) -> Result<FewShotSet> {
        let (name, domain) = self.domain("target_domain")?;
        few_shot(&domain, &name, self.train.k_shots, self.train.seed)
    }

    fn load_source(&self) -> Result<Checkpoint> {
        Checkpoint::load(&self.path("source.ckpt"))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        atomic_write(&path, bytes)?;
        self.track(name);
        Ok(())
    }

    fn track(&mut self, name: &str) {
        let path = self.path(name);
        if !self.artifacts.contains(&path) {
            self.artifacts.push(path);
        }
    }

    /// Append the manifest line for this run.
    fn log_manifest(&self, command: &str) -> Result<()> {
        let config_hash = hex::encode(Sha256::digest(self.cfg.canonical().as_bytes()));
        let mut hasher = Sha256::new();
        let mut names: Vec<&PathBuf> = self.artifacts.iter().collect();
        names.sort();
        for path in names {
            let bytes =
                std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            hasher.update(path.file_name().unwrap_or_default().as_encoded_bytes());
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
        let artifact_hash = hex::encode(hasher.finalize());
        let line = format!(
            "{command} config={config_hash} seed={} artifacts={artifact_hash}\n",
            self.train.seed
        );
        let log = self.path("runs.log");
        let mut existing = std::fs::read(&log).unwrap_or_default();
        existing.extend_from_slice(line.as_bytes());
        atomic_write(&log, &existing)
    }
}

/// Evaluation-only generator pass over a checkpoint's effective weights.
fn generate_from(ckpt: &Checkpoint, n: usize, seed: u64) -> Result<Tensor> {
    let mut params = ckpt.effective_weights()?;
    for layer in ckpt.arch.gen.iter().chain(ckpt.arch.disc.iter()) {
        if let Some(bias) = layer.bias_name() {
            let t = ckpt
                .tensors
                .get(&bias)
                .ok_or_else(|| Error::UnknownParameter(bias.clone()))?;
            params.insert(bias, t.clone());
        }
    }
    let gan = GanPair { arch: ckpt.arch.clone(), params };
    use rand::SeedableRng;
    use rand_distr::Distribution;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(97),
    );
    let dim = ckpt.arch.latent_dim;
    let z = Tensor::new(
        vec![n, dim],
        (0..n * dim)
            .map(|_| rand_distr::StandardNormal.sample(&mut rng))
            .collect(),
    )?;
    gan.generate(&z)
}

struct EvalRow {
    fid: f64,
    kid: f64,
    coverage: f64,
    high_quality_frac: f64,
    intra_div: f64,
}

fn eval_checkpoint(ctx: &Ctx, ckpt: &Checkpoint, n: usize) -> Result<EvalRow> {
    let (_, target) = ctx.domain("target_domain")?;
    let shots = ctx.target_shots()?;
    let generated = generate_from(ckpt, n, ctx.train.seed)?;
    let pool = crate::data::sample(&target, n, ctx.train.seed.wrapping_add(0x5eed))?;
    let extractor = match ctx.arch {
        ArchKind::Mlp2d => FeatureExtractor::Identity2d,
        ArchKind::Conv16 => FeatureExtractor::SeededRandomConv,
    };
    let gen_feats = extractor.extract(&generated)?;
    let pool_feats = extractor.extract(&pool)?;
    let (coverage, high_quality_frac) = if target.is_gmm() {
        let c = mode_coverage(&generated, &target, 3.0)?;
        (c.covered as f64 / c.total_modes as f64, c.high_quality_frac)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(EvalRow {
        fid: frechet(&gen_feats, &pool_feats)?.total,
        kid: kid(&gen_feats, &pool_feats)?,
        coverage,
        high_quality_frac,
        intra_div: intra_diversity(&generated, &shots, extractor)?,
    })
}

fn eval_sample_count(arch: ArchKind) -> usize {
    match arch {
        ArchKind::Mlp2d => 256,
        ArchKind::Conv16 => 64,
    }
}

fn run_adaptation(ctx: &Ctx, source: &Checkpoint) -> Result<AdaptationRun> {
    let shots = ctx.target_shots()?;
    let (_, target) = ctx.domain("target_domain")?;
    let report = if ctx.train.strategy.needs_report() {
        let path = ctx.path("importance.txt");
        Some(if path.exists() {
            load_report(&path)?
        } else {
            probe(source, &shots, &ctx.train, MeasureKind::Fisher)?
        })
    } else {
        None
    };
    adapt(source, report.as_ref(), &shots, &target, &ctx.train)
}

fn execute(cmd: &Command) -> Result<()> {
    let mut ctx = Ctx::new(cmd.common())?;
    match cmd {
        Command::Pretrain(_) => {
            let (_, domain) = ctx.domain("source_domain")?;
            let ckpt = pretrain(&domain, ctx.arch, &ctx.train)?;
            ctx.write("source.ckpt", &ckpt.to_bytes()?)?;
        }
        Command::Probe(_) => {
            let source = ctx.load_source()?;
            let shots = ctx.target_shots()?;
            let report = probe(&source, &shots, &ctx.train, MeasureKind::Fisher)?;
            save_report(&report, &ctx.path("importance.txt"))?;
            ctx.track("importance.txt");
        }
        Command::Adapt(_) => {
            let source = ctx.load_source()?;
            let run = run_adaptation(&ctx, &source)?;
            if let Some(report) = &run.report {
                save_report(report, &ctx.path("importance.txt"))?;
                ctx.track("importance.txt");
            }
            ctx.write("adapted.ckpt", &run.adapted.to_bytes()?)?;
            ctx.write("history.csv", crate::pipeline::history_csv(&run.history).as_bytes())?;
        }
        Command::Eval(_) => {
            let adapted_path = ctx.path("adapted.ckpt");
            let (ckpt, source) = if adapted_path.exists() {
                (Checkpoint::load(&adapted_path)?, Some(ctx.load_source()?))
            } else {
                (ctx.load_source()?, None)
            };
            let row = eval_checkpoint(&ctx, &ckpt, eval_sample_count(ctx.arch))?;
            let (qg, qd) = match &source {
                Some(src) => {
                    let q = update_ratio(src, &ckpt)?;
                    (q.gen_q_pct, q.disc_q_pct)
                }
                None => (0.0, 0.0),
            };
            let csv = format!(
                "metric,value\nfid,{}\nkid,{}\ncoverage,{}\nhigh_quality_frac,{}\nintra_div,{}\nq_pct_gen,{qg}\nq_pct_disc,{qd}\n",
                row.fid, row.kid, row.coverage, row.high_quality_frac, row.intra_div
            );
            ctx.write("eval.csv", csv.as_bytes())?;
        }
        Command::Gen { n, .. } => {
            let adapted_path = ctx.path("adapted.ckpt");
            let ckpt = if adapted_path.exists() {
                Checkpoint::load(&adapted_path)?
            } else {
                ctx.load_source()?
            };
            let samples = generate_from(&ckpt, *n, ctx.train.seed)?;
            match ctx.arch {
                ArchKind::Mlp2d => {
                    export_csv(&samples, &ctx.path("gen.csv"))?;
                    ctx.track("gen.csv");
                }
                ArchKind::Conv16 => {
                    let per = samples.len() / (*n).max(1);
                    for i in 0..*n {
                        let name = format!("gen_{i:03}.pgm");
                        export_pgm(&samples.values[i * per..(i + 1) * per], &ctx.path(&name))?;
                        ctx.track(&name);
                    }
                }
            }
        }
        Command::SweepThreshold(_) => {
            let source = ctx.load_source()?;
            let shots = ctx.target_shots()?;
            let (_, target) = ctx.domain("target_domain")?;
            let mut csv =
                String::from("t_h,important_frac,fid,kid,coverage,intra_div,q_pct\n");
            for t_h in SWEEP_THRESHOLDS {
                let mut train = ctx.train;
                train.t_h = t_h;
                let report = probe(&source, &shots, &train, MeasureKind::Fisher)?;
                let frac = report.important.len() as f64 / report.kernel_fi.len() as f64;
                let run = adapt(&source, Some(&report), &shots, &target, &train)?;
                let last = run.history.last().ok_or_else(|| {
                    Error::InvalidArgument("sweep needs iter_adapt > 0".into())
                })?;
                csv.push_str(&format!(
                    "{t_h},{frac},{},{},{},{},{}\n",
                    last.fid, last.kid, last.coverage, last.intra_div, last.q_pct
                ));
            }
            ctx.write("sweep_threshold.csv", csv.as_bytes())?;
        }
        Command::SweepShots(_) => {
            let source = ctx.load_source()?;
            let (name, target) = ctx.domain("target_domain")?;
            let mut csv = String::from("k_shots,fid,kid,coverage,intra_div,q_pct\n");
            for k in SWEEP_SHOTS {
                let mut train = ctx.train;
                train.k_shots = k;
                // Same seed for every k: shot sets are nested supersets.
                let shots = few_shot(&target, &name, k, train.seed)?;
                let report = if train.strategy.needs_report() {
                    Some(probe(&source, &shots, &train, MeasureKind::Fisher)?)
                } else {
                    None
                };
                let run = adapt(&source, report.as_ref(), &shots, &target, &train)?;
                let last = run.history.last().ok_or_else(|| {
                    Error::InvalidArgument("sweep needs iter_adapt > 0".into())
                })?;
                csv.push_str(&format!(
                    "{k},{},{},{},{},{}\n",
                    last.fid, last.kid, last.coverage, last.intra_div, last.q_pct
                ));
            }
            ctx.write("sweep_shots.csv", csv.as_bytes())?;
        }
        Command::OracleReport(_) => {
            let (_, source_domain) = ctx.domain("source_domain")?;
            let (target_name, target) = ctx.domain("target_domain")?;
            let mut train = ctx.train;
            train.latent_dim = 2;
            let source = oracle_source(&source_domain, &train)?;
            let shots = few_shot(&target, &target_name, train.k_shots, train.seed)?;
            let cmp = oracle_comparison(&source, &shots, &train)?;
            let mut csv = String::from("kernel_id,fi_estimate,fi_oracle\n");
            for (id, est, orc) in &cmp.per_kernel {
                csv.push_str(&format!("{id},{est},{orc}\n"));
            }
            ctx.write("oracle_report.csv", csv.as_bytes())?;
            let summary = format!(
                "spearman={}\ncompared={}\nskipped={}\n",
                cmp.spearman,
                cmp.per_kernel.len(),
                cmp.skipped.len()
            );
            ctx.write("oracle_spearman.txt", summary.as_bytes())?;
        }
    }
    ctx.log_manifest(cmd.name())
}
