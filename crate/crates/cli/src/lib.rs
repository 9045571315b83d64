//! The `pgl` command line: pretraining, fine-tuning, evaluation, synthetic
//! data generation and alignment inspection.
//!
//! Every command takes an optional `--config` file plus any number of
//! `--section.key=value` overrides, which win over the file.

pub mod oracle;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pgl_core::augment::sample_crop_pair;
use pgl_core::config::RunConfig;
use pgl_core::data::{preprocess, ssl_source_shape, synth_generate, DatasetManifest, Split, Volume};
use pgl_core::networks::{init_online, init_segmentation, ParamStore, ENCODER};
use pgl_core::rng::{stream, streams};
use pgl_core::trainer::checkpoint::{read_entries, restore_store};
use pgl_core::trainer::finetune::initial_params;
use pgl_core::trainer::{evaluate, finetune, pretrain, EncoderInit, SegReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Name of the resolved-config sidecar written next to run outputs.
pub const RESOLVED_CONFIG: &str = "resolved.cfg";

#[derive(Parser, Debug)]
#[command(name = "pgl", version, about = "Prior-guided local self-supervised pretraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Self-supervised pretraining on `data.pretrain`.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a segmentation network on `data.train`, validating on `data.val`.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `random`, or `checkpoint <path>` to load a pretrained encoder.
        #[arg(long, num_args = 1..=2, value_names = ["MODE", "PATH"], default_values = ["random"])]
        init: Vec<String>,
    },
    /// Per-class Dice and IoU of fine-tuned weights.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weights written by `finetune` (`seg.pgl`).
        #[arg(long)]
        weights: PathBuf,
        /// Labeled volumes; defaults to `data.test`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write synthetic labeled volumes and a manifest.
    Gendata {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "pretrain")]
        split: String,
    },
    /// Sample crop pairs and check their alignment geometry against an exact oracle.
    InspectAlign {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print only the summary line.
        #[arg(long)]
        quiet: bool,
    },
}

/// A problem with how the tool was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Split `--section.key=value` overrides from the arguments clap parses.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let (overrides, rest) = args.into_iter().partition(|a| {
        a.strip_prefix("--")
            .and_then(|rest| rest.split_once('='))
            .is_some_and(|(name, _)| name.contains('.'))
    });
    (rest, overrides)
}

/// Exit status for an error: 2 for configuration and input problems, 3 for
/// numerical failure, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use pgl_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite { .. } => EXIT_NUMERIC,
                E::Config(_) | E::KeyMismatch(_) | E::Invalid(_) | E::Format(_) | E::Truncated { .. } => EXIT_USAGE,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

/// Parse arguments (without the program name), run, and return the exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let (rest, overrides) = split_overrides(args.into_iter().collect());
    let cli = match Cli::try_parse_from(std::iter::once("pgl".to_string()).chain(rest)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, &overrides) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(command: Command, overrides: &[String]) -> Result<()> {
    match command {
        Command::Pretrain { config, resume } => cmd_pretrain(&load_config(config.as_deref(), overrides)?, resume.as_deref()),
        Command::Finetune { config, init } => cmd_finetune(&load_config(config.as_deref(), overrides)?, &init),
        Command::Eval { config, weights, manifest } => {
            cmd_eval(&load_config(config.as_deref(), overrides)?, &weights, manifest.as_deref()).map(|_| ())
        }
        Command::Gendata { config, out, count, seed, split } => {
            let split: Split = split.parse().map_err(|e: pgl_core::Error| usage(e.to_string()))?;
            cmd_gendata(&load_config(config.as_deref(), overrides)?, &out, count, seed, split)
        }
        Command::InspectAlign { config, pairs, seed, quiet } => {
            let report = cmd_inspect_align(&load_config(config.as_deref(), overrides)?, pairs, seed, quiet)?;
            print!("{report}");
            Ok(())
        }
    }
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

/// Load and preprocess every volume of a manifest.
pub fn load_split(manifest: &str, key: &str, cfg: &RunConfig) -> Result<Vec<Volume>> {
    if manifest.is_empty() {
        return Err(usage(format!("`{key}` is not set")));
    }
    let m = DatasetManifest::load(manifest).with_context(|| format!("reading manifest {manifest}"))?;
    let (lo, hi) = cfg.clip()?;
    m.paths
        .iter()
        .map(|p| {
            let v = Volume::load(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(preprocess(&v, lo, hi)?.with_provenance(p.display().to_string()))
        })
        .collect()
}

fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join(RESOLVED_CONFIG))?;
    Ok(dir)
}

pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let plan = cfg.pretrain_plan()?;
    let vols = load_split(&cfg.data.pretrain, "data.pretrain", cfg)?;
    let dir = prepare_output(cfg)?;
    let outcome = pretrain(&plan, vols, Some(&dir), resume, &mut |m, _| {
        if m.step % 10 == 0 {
            log::info!("step {} loss {:.5} lr {:.5} omega {:.6}", m.step, m.loss, m.lr, m.omega);
        }
    })?;
    let last = outcome.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!("pretrained {} steps; final loss {last:.5}", outcome.state.step);
    if let Some(p) = outcome.last_checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

/// The online store saved in a pretraining checkpoint.
pub fn load_pretrained(cfg: &RunConfig, path: &Path) -> Result<ParamStore<f32>> {
    let net = cfg.network()?;
    let template = init_online::<f32>(&net, &mut stream(0, streams::INIT))?;
    let entries = read_entries(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    restore_store(&entries, "online/", &template)
        .with_context(|| format!("checkpoint {} does not fit the network config", path.display()))
}

fn checksum(values: &[f32]) -> u64 {
    // FNV-1a over the bit patterns
    values.iter().flat_map(|v| v.to_bits().to_le_bytes()).fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// One row per parameter: where its initial value came from and a checksum,
/// so two runs can be diffed.
pub fn init_report(params: &ParamStore<f32>, pretrained: bool) -> String {
    let mut out = String::from("name,source,checksum\n");
    for (name, p) in params.iter() {
        let source = if pretrained && name.starts_with(ENCODER) { "checkpoint" } else { "random" };
        let _ = writeln!(out, "{name},{source},{:016x}", checksum(p.value.data()));
    }
    out
}

pub fn cmd_finetune(cfg: &RunConfig, init: &[String]) -> Result<()> {
    let plan = cfg.finetune_plan()?;
    let pretrained = match init {
        [mode] if mode == "random" => None,
        [mode, path] if mode == "checkpoint" => Some(load_pretrained(cfg, Path::new(path))?),
        _ => return Err(usage(format!("--init expects `random` or `checkpoint <path>`, got {init:?}"))),
    };
    let train = load_split(&cfg.data.train, "data.train", cfg)?;
    let val = load_split(&cfg.data.val, "data.val", cfg)?;
    let dir = prepare_output(cfg)?;
    let init = match &pretrained {
        Some(store) => EncoderInit::Pretrained(store),
        None => EncoderInit::Random,
    };
    let start = initial_params(&plan, &init)?;
    std::fs::write(dir.join("init.csv"), init_report(&start, pretrained.is_some()))?;
    let outcome = finetune(&plan, train, &val, init, Some(&dir))?;
    print!("{}", render_report(&outcome.report));
    println!("weights {}", dir.join("seg.pgl").display());
    Ok(())
}

pub fn render_report(r: &SegReport) -> String {
    let mut out = String::from("class  dice      iou\n");
    for c in 0..r.classes() {
        let _ = writeln!(out, "{c:<6} {:.6}  {:.6}", r.dice[c], r.iou[c]);
    }
    let _ = writeln!(out, "mean   {:.6}  {:.6}  (foreground classes)", r.mean_dice(), r.mean_iou());
    out
}

pub fn report_csv(r: &SegReport) -> String {
    let mut out = String::from("class,dice,iou\n");
    for c in 0..r.classes() {
        let _ = writeln!(out, "{c},{},{}", r.dice[c], r.iou[c]);
    }
    let _ = writeln!(out, "mean,{},{}", r.mean_dice(), r.mean_iou());
    out
}

pub fn cmd_eval(cfg: &RunConfig, weights: &Path, manifest: Option<&Path>) -> Result<SegReport> {
    let plan = cfg.finetune_plan()?;
    let template = init_segmentation::<f32>(&plan.net, plan.head_channels(), &mut stream(0, streams::INIT))?;
    let entries = read_entries(weights).with_context(|| format!("reading weights {}", weights.display()))?;
    let params = restore_store(&entries, "seg/", &template)
        .with_context(|| format!("weights {} do not fit the network config", weights.display()))?;
    let manifest = manifest.map(|p| p.display().to_string()).unwrap_or_else(|| cfg.data.test.clone());
    let vols = load_split(&manifest, "data.test", cfg)?;
    if let Some(v) = vols.iter().find(|v| v.labels().is_none()) {
        return Err(usage(format!("volume `{}` has no labels", v.provenance)));
    }
    let report = evaluate(&params, &plan.net, &vols, plan.patch_shape, plan.report_classes())?;
    let dir = prepare_output(cfg)?;
    std::fs::write(dir.join("eval.csv"), report_csv(&report))?;
    print!("{}", render_report(&report));
    Ok(report)
}

pub fn cmd_gendata(cfg: &RunConfig, out: &Path, count: usize, seed: u64, split: Split) -> Result<()> {
    cfg.synth.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rng = stream(seed, streams::SYNTH);
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("vol_{i:04}.rvf");
        synth_generate(&cfg.synth, &mut rng)?.save(out.join(&name))?;
        paths.push(PathBuf::from(name));
    }
    DatasetManifest { split, seed, paths }.save(out.join("manifest.txt"))?;
    cfg.save(&out.join(RESOLVED_CONFIG))?;
    println!("wrote {count} volumes and {}", out.join("manifest.txt").display());
    Ok(())
}

/// Text dump of sampled record pairs and the oracle verdicts; fails unless
/// every pair agrees.
pub fn cmd_inspect_align(cfg: &RunConfig, pairs: usize, seed: u64, quiet: bool) -> Result<String> {
    cfg.augment.validate()?;
    let net = cfg.network()?;
    let view = cfg.trainer.view_shape;
    net.encoder.check_input(view)?;
    let stride = net.encoder.output_stride();
    let source = ssl_source_shape(view);
    let mut rng = stream(seed, streams::AUGMENT);
    let mut out = String::new();
    let mut agree = 0;
    for i in 0..pairs {
        let (r1, r2) = sample_crop_pair(source, view, &cfg.augment, &mut rng)?;
        let ins = oracle::inspect(&r1, &r2, stride)?;
        let ok = ins.agreement.holds(1e-9);
        agree += ok as usize;
        if !quiet {
            let _ = writeln!(out, "pair {i}");
            for (k, r) in [&r1, &r2].into_iter().enumerate() {
                let _ = writeln!(out, "  crop{}  {:?} .. {:?} flip {:?}", k + 1, r.crop_start, r.crop_end, r.flip);
            }
            if let (Some((o1, o2)), Some((f1, f2))) = (ins.boxes, ins.rois) {
                let _ = writeln!(out, "  box1   {:?} .. {:?}", o1.start, o1.end);
                let _ = writeln!(out, "  box2   {:?} .. {:?}", o2.start, o2.end);
                let _ = writeln!(out, "  roi1   {:?} .. {:?}", f1.start, f1.end);
                let _ = writeln!(out, "  roi2   {:?} .. {:?}", f2.start, f2.end);
            } else {
                let _ = writeln!(out, "  no overlap");
            }
            let a = &ins.agreement;
            let _ = writeln!(
                out,
                "  oracle boxes={} region={} roi_err={:.3e} -> {}",
                a.boxes,
                a.same_region,
                a.roi_error,
                if ok { "agree" } else { "DISAGREE" }
            );
        }
    }
    let pct = if pairs == 0 { 100.0 } else { 100.0 * agree as f64 / pairs as f64 };
    let _ = writeln!(out, "oracle agreement: {agree}/{pairs} ({pct:.2}%)");
    if agree != pairs {
        print!("{out}");
        bail!("{} of {pairs} pairs disagree with the oracle", pairs - agree);
    }
    Ok(out)
}
