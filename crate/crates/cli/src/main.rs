//! `fctl`: synthesize data, train, infer, evaluate and verify from the shell.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 failed verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fctl_core::eval::{confusion, evaluate_pipeline, metrics, thread_count, ConfusionMatrix, MergeMode};
use fctl_core::io::{
    dataset_names, read_dataset, read_pgm, read_ppm, write_atomic, write_dataset, write_pgm, Checkpoint, RunConfig,
};
use fctl_core::model::{grad_check_suite, RefineNet, SegModel};
use fctl_core::tensor::{write_ten, TenData};
use fctl_core::train::{
    generate_refinement_data, log_csv, seg_samples, synth_dataset, train_refinement, train_segmentation, SynthConfig,
};
use fctl_core::{Tensor, Var};

#[derive(Parser)]
#[command(name = "fctl", version, about = "Locality-aware multi-context segmentation of large rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset.
    Synth(SynthArgs),
    /// Train the segmentation model.
    TrainSeg(TrainSegArgs),
    /// Train the refinement network on crude masks of an early segmentation checkpoint.
    TrainRefine(TrainRefineArgs),
    /// Segment one image or a whole dataset.
    Infer(InferArgs),
    /// Print the metrics CSV for predictions or for a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every op and both networks.
    GradCheck(GradCheckArgs),
    /// Per-patch forward latency and peak memory.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key=value` run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    num: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    num_classes: usize,
    #[arg(long, default_value_t = 64)]
    patch: usize,
    #[arg(long, default_value_t = 96)]
    cue_scale: usize,
    #[arg(long, default_value_t = 12)]
    noise: u8,
}

#[derive(Args)]
struct TrainSegArgs {
    #[arg(long)]
    data: PathBuf,
    /// Final checkpoint; the effective config goes next to it as `<out>.cfg`.
    #[arg(long)]
    out: PathBuf,
    /// Also save the model after the early-stop epoch used for refinement data.
    #[arg(long)]
    early: Option<PathBuf>,
    /// Training log (default `<out>.log.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct TrainRefineArgs {
    #[arg(long)]
    data: PathBuf,
    /// Early-stopped segmentation checkpoint that produces the crude masks.
    #[arg(long)]
    seg_early: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    seg: PathBuf,
    #[arg(long)]
    refine: Option<PathBuf>,
    /// Single input image (PPM).
    #[arg(long, requires = "out", conflicts_with = "data")]
    image: Option<PathBuf>,
    /// Label map output (PGM) for `--image`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Probability map output (.ten) for `--image`.
    #[arg(long, requires = "image")]
    probs: Option<PathBuf>,
    /// Dataset directory; every image is segmented into `--out-dir`.
    #[arg(long, requires = "out_dir")]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory of predicted `<name>.pgm` label maps.
    #[arg(long, conflicts_with = "seg")]
    pred_dir: Option<PathBuf>,
    /// Segmentation checkpoint to run instead of reading predictions.
    #[arg(long, required_unless_present = "pred_dir")]
    seg: Option<PathBuf>,
    #[arg(long, requires = "seg")]
    refine: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

enum Failure {
    Usage(String),
    Verification(String),
}

impl From<fctl_core::Error> for Failure {
    fn from(e: fctl_core::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn sidecar(ckpt: &Path, ext: &str) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// File (or the checkpoint's sidecar) first, then `--set` overrides.
fn resolve_config(args: &ConfigArgs, checkpoint: Option<&Path>) -> CliResult<RunConfig> {
    let mut cfg = match (&args.config, checkpoint.map(|c| sidecar(c, ".cfg"))) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(side)) if side.exists() => RunConfig::load(&side)?,
        _ => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn load_seg(path: &Path, cfg: &RunConfig) -> CliResult<SegModel<f32>> {
    let store = Checkpoint::load(path)?.to_store()?;
    Ok(SegModel::from_params(cfg.seg_model(), store)?)
}

fn load_refine(path: &Path, cfg: &RunConfig) -> CliResult<RefineNet<f32>> {
    let store = Checkpoint::load(path)?.to_store()?;
    Ok(RefineNet::from_params(cfg.refine_model(), store)?)
}

fn synth(a: SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        size: a.size,
        num_images: a.num,
        num_classes: a.num_classes,
        seed: a.seed,
        cue_scale: a.cue_scale,
        patch: a.patch,
        noise: a.noise,
    };
    write_dataset(&a.out, &synth_dataset(&cfg)?)?;
    println!("wrote {} images to {}", a.num, a.out.display());
    Ok(())
}

fn train_seg(a: TrainSegArgs) -> CliResult {
    let mut run = resolve_config(&a.cfg, None)?;
    if let Some(s) = a.seed {
        run.seed = s;
    }
    if let Some(e) = a.epochs {
        run.epochs = e;
    }
    let data = read_dataset(&a.data)?;
    let model_cfg = run.seg_model();
    let samples = seg_samples::<f32>(&data, &model_cfg, run.overlap)?;
    let tc = run.train();
    let model = SegModel::new(model_cfg, run.seed)?;
    let save_early = |p: &Path, m: &SegModel<f32>, epoch: usize| -> fctl_core::Result<()> {
        Checkpoint::from_store(&m.params, run.seed, epoch as u32).save(p)?;
        write_atomic(&sidecar(p, ".cfg"), run.to_text().as_bytes())
    };
    if let (Some(p), 0) = (&a.early, tc.refine_source_epochs) {
        save_early(p, &model, 0)?;
    }
    let outcome = train_segmentation(model, &samples, &tc, |epoch, m| {
        eprintln!("epoch {epoch}/{}", tc.epochs);
        match &a.early {
            Some(p) if epoch == tc.refine_source_epochs => save_early(p, m, epoch),
            _ => Ok(()),
        }
    })?;
    Checkpoint::from_store(&outcome.model.params, run.seed, tc.epochs as u32).save(&a.out)?;
    write_atomic(&sidecar(&a.out, ".cfg"), run.to_text().as_bytes())?;
    let log = a.log.unwrap_or_else(|| sidecar(&a.out, ".log.csv"));
    write_atomic(&log, log_csv(&outcome.log).as_bytes())?;
    if let Some(last) = outcome.log.last() {
        println!("epochs={} iterations={} loss={:.6e}", last.epoch, last.iter, last.loss);
    }
    Ok(())
}

fn train_refine(a: TrainRefineArgs) -> CliResult {
    let mut run = resolve_config(&a.cfg, Some(&a.seg_early))?;
    if let Some(s) = a.seed {
        run.seed = s;
    }
    if let Some(e) = a.epochs {
        run.epochs = e;
    }
    let seg = load_seg(&a.seg_early, &run)?;
    let data = read_dataset(&a.data)?;
    let samples = generate_refinement_data(&seg, &data, run.overlap, run.refine_scale, thread_count())?;
    let tc = run.train();
    let net = RefineNet::new(run.refine_model(), run.seed)?;
    let outcome = train_refinement(net, &samples, &tc)?;
    Checkpoint::from_store(&outcome.model.params, run.seed, tc.epochs as u32).save(&a.out)?;
    let log = a.log.unwrap_or_else(|| sidecar(&a.out, ".log.csv"));
    write_atomic(&log, log_csv(&outcome.log).as_bytes())?;
    if let Some(last) = outcome.log.last() {
        println!("epochs={} iterations={} loss={:.6e}", last.epoch, last.iter, last.loss);
    }
    Ok(())
}

struct Pipeline {
    run: RunConfig,
    seg: SegModel<f32>,
    refine: Option<RefineNet<f32>>,
}

impl Pipeline {
    fn load(seg: &Path, refine: Option<&Path>, cfg: &ConfigArgs) -> CliResult<Self> {
        let mut run = resolve_config(cfg, Some(seg))?;
        let refine = refine.map(|p| load_refine(p, &run)).transpose()?;
        // A refinement checkpoint is only used by refine merging.
        if refine.is_some() {
            run.merge_mode = MergeMode::Refine;
        }
        Ok(Self { seg: load_seg(seg, &run)?, refine, run })
    }

    fn run(&self, image: &Tensor<f32>) -> CliResult<fctl_core::eval::PipelineOutput> {
        let cfg = self.run.pipeline(thread_count());
        Ok(evaluate_pipeline(image, None, &self.seg, self.refine.as_ref(), &cfg)?)
    }
}

fn infer(a: InferArgs) -> CliResult {
    let pipe = Pipeline::load(&a.seg, a.refine.as_deref(), &a.cfg)?;
    match (&a.image, &a.data) {
        (Some(image), None) => {
            let out = pipe.run(&read_ppm(image)?.to_tensor())?;
            write_pgm(a.out.as_deref().expect("clap requires --out"), &out.labels)?;
            if let Some(p) = &a.probs {
                let mut bytes = Vec::new();
                write_ten(&mut bytes, &TenData::F32(out.probs.0))?;
                write_atomic(p, &bytes)?;
            }
        }
        (None, Some(data)) => {
            let dir = a.out_dir.as_deref().expect("clap requires --out-dir");
            std::fs::create_dir_all(dir).map_err(fctl_core::Error::from)?;
            for name in dataset_names(data)? {
                let img = read_ppm(&data.join("images").join(format!("{name}.ppm")))?;
                let out = pipe.run(&img.to_tensor())?;
                write_pgm(&dir.join(format!("{name}.pgm")), &out.labels)?;
            }
        }
        _ => return Err(Failure::Usage("infer needs exactly one of --image or --data".into())),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let (run, pipe) = match &a.seg {
        Some(seg) => {
            let p = Pipeline::load(seg, a.refine.as_deref(), &a.cfg)?;
            (p.run.clone(), Some(p))
        }
        None => (resolve_config(&a.cfg, None)?, None),
    };
    let mut cm = ConfusionMatrix::new(run.num_classes);
    let ignore = run.pipeline(1).ignore;
    for name in dataset_names(&a.data)? {
        let gt = read_pgm(&a.data.join("labels").join(format!("{name}.pgm")))?;
        let pred = match (&pipe, &a.pred_dir) {
            (Some(p), _) => {
                let img = read_ppm(&a.data.join("images").join(format!("{name}.ppm")))?;
                p.run(&img.to_tensor())?.labels
            }
            (None, Some(dir)) => read_pgm(&dir.join(format!("{name}.pgm")))?,
            (None, None) => unreachable!("clap requires --seg or --pred-dir"),
        };
        cm.merge(&confusion(&pred, &gt, run.num_classes, ignore)?)?;
    }
    print!("{}", metrics(&cm)?.to_csv());
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> CliResult {
    let results = grad_check_suite(a.seed, a.eps)?;
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<28} checked={:<4} max_rel_error={:.3e} tol={:.0e} {verdict}",
            r.name, r.report.checked, r.report.max_rel_error, r.tolerance
        );
        worst = worst.max(r.report.max_rel_error);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    println!("max relative error {worst:.3e} over {} checks", results.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed: {}", failed.join(", "))))
    }
}

/// Peak resident set from `/proc/self/status`, in KiB.
fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn bench(a: BenchArgs) -> CliResult {
    if a.iters == 0 {
        return Err(Failure::Usage("--iters must be positive".into()));
    }
    let run = resolve_config(&a.cfg, None)?;
    let cfg = run.seg_model();
    let model = SegModel::<f32>::new(cfg.clone(), a.seed)?;
    let p = cfg.patch;
    let input = |k: u64| {
        let data = (0..3 * p * p).map(|i| ((i as u64 * 2654435761 + k) % 256) as f32 / 255.0).collect();
        Var::constant(Tensor::new(&[1, 3, p, p], data).expect("sized"))
    };
    let patch = input(0);
    let contexts: Vec<_> = (1..=cfg.num_contexts() as u64).map(input).collect();
    model.forward(&patch, &contexts)?;
    let start = Instant::now();
    for _ in 0..a.iters {
        model.forward(&patch, &contexts)?;
    }
    let ms = start.elapsed().as_secs_f64() * 1e3 / a.iters as f64;
    println!("patch={p} contexts={} params={}", cfg.num_contexts(), model.params.num_scalars());
    println!("forward_ms_per_patch={ms:.3}");
    match peak_rss_kib() {
        Some(kib) => println!("peak_rss_kib={kib}"),
        None => println!("peak_rss_kib=unavailable"),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainSeg(a) => train_seg(a),
        Command::TrainRefine(a) => train_refine(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
