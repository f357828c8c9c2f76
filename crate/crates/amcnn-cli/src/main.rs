//! Command-line front end for the full pipeline: synthetic data,
//! ground-truth density maps, two-stage training, evaluation,
//! prediction, and the finite-difference gradient check.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use amcnn::data::{
    load_dataset, read_image, read_points_csv, synth_dataset, write_pgm, write_sample, DataError,
    Sample, SynthConfig,
};
use amcnn::density::{
    read_dmap, read_pmap, resolve_sigmas, splat_density, sum_pool_downsample, write_dmap,
    DensityError, DensityMap, HeadAnnotations, SigmaPolicy,
};
use amcnn::gradcheck::run_default_suite;
use amcnn::loss::{EvalReport, EvalRow, LossError};
use amcnn::model::{build_model, BranchLabel, Model, ModelError, Variant};
use amcnn::trainer::{evaluate, finetune, pretrain_branch, TrainConfig, TrainError, TrainLog};
use amcnn::Tensor;

#[derive(Parser)]
#[command(
    name = "amcnn",
    version,
    about = "Attention-map crowd counting: density maps, training, evaluation"
)]
struct Cli {
    /// Worker threads. Only 1 is currently used; the flag is the
    /// stable interface for future parallel data loading.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a ground-truth density map (DMAP) for one annotation file
    GenDensity(GenDensityCmd),
    /// Generate a synthetic annotated dataset
    Synth(SynthCmd),
    /// Stage 1: pretrain CNN branches separately (no attention)
    Pretrain(PretrainCmd),
    /// Stage 2: fine-tune the full model with the combined loss
    Train(TrainCmd),
    /// Evaluate a checkpoint (or precomputed maps) on a dataset
    Eval(EvalCmd),
    /// Predict density and probability maps for one image
    Predict(PredictCmd),
    /// Verify analytic gradients against central finite differences
    GradCheck(GradCheckCmd),
}

#[derive(Args)]
struct GenDensityCmd {
    /// Head annotation CSV, one `x,y` per line
    #[arg(long)]
    annotations: PathBuf,
    /// Image whose dims define the map (cropped down to a multiple of 4)
    #[arg(long)]
    image: Option<PathBuf>,
    /// Map height in pixels (alternative to --image)
    #[arg(long)]
    height: Option<usize>,
    /// Map width in pixels (alternative to --image)
    #[arg(long)]
    width: Option<usize>,
    /// σ policy: knn:<beta> | persp | fixed:<sigma>. knn falls back to
    /// fixed σ=4 when there are fewer than 3 heads [default: knn:0.3]
    #[arg(long, default_value = "knn:0.3")]
    sigma: String,
    /// Perspective map (PMAP), required for --sigma persp
    #[arg(long)]
    pmap: Option<PathBuf>,
    /// Output resolution: 1 (full) or 4 (quarter, training scale)
    #[arg(long, default_value_t = 4)]
    scale: u32,
    /// Output path [default: annotation path with .dmap]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthCmd {
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Square image side, multiple of 4
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    heads_min: usize,
    #[arg(long, default_value_t = 20)]
    heads_max: usize,
    #[arg(long, default_value_t = 3.0)]
    radius_min: f64,
    #[arg(long, default_value_t = 6.0)]
    radius_max: f64,
    /// Background noise amplitude in [0,1)
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags shared by both training stages. Precedence: built-in
/// defaults, then --config file, then --set pairs, then named flags.
#[derive(Args)]
struct TrainOpts {
    /// Dataset directory: <stem>.pgm/.ppm + <stem>.csv annotations,
    /// optional <stem>.pmap / <stem>.roi sidecars
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set c_f=50
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Adam learning rate [default: 1e-5]
    #[arg(long)]
    lr: Option<f64>,
    /// Relative-deviation loss weight α [default: 1e-7]
    #[arg(long)]
    alpha: Option<f64>,
    /// Patches per optimizer step [default: 1]
    #[arg(long)]
    batch: Option<usize>,
    /// σ policy: knn:<beta> | persp | fixed:<sigma>. knn falls back to
    /// fixed σ=4 when there are fewer than 3 heads [default: knn:0.3]
    #[arg(long)]
    sigma: Option<String>,
    /// Optimizer steps for this stage [default: 2000 pretrain, 5000 train]
    #[arg(long)]
    iterations: Option<usize>,
    /// Base seed for weights, patches, and shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainCmd {
    #[command(flatten)]
    opts: TrainOpts,
    /// Branch to pretrain: L, M, S, or all
    #[arg(long, default_value = "all")]
    branch: String,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    opts: TrainOpts,
    /// Directory holding pretrain-L/M/S.amcnn checkpoints to adopt
    #[arg(long, conflicts_with = "from_scratch")]
    from_pretrained: Option<PathBuf>,
    /// Skip branch adoption and train from random init
    #[arg(long)]
    from_scratch: bool,
    /// Held-out dataset for interleaved eval rows (defaults to --data)
    #[arg(long)]
    eval_data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    /// Dataset directory to evaluate on
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint to run
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of precomputed <image-id>.dmap predictions instead
    /// of a model
    #[arg(long, conflicts_with = "checkpoint")]
    pred_dir: Option<PathBuf>,
    /// Also write per-image density + probability maps here
    #[arg(long)]
    export_maps: Option<PathBuf>,
}

#[derive(Args)]
struct PredictCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (PGM/PPM); dims are cropped down to multiples of 4
    #[arg(long)]
    image: PathBuf,
    /// Output prefix: writes <prefix>.dmap, <prefix>-attn.dmap,
    /// <prefix>-attn.pgm (per-branch suffixes for am-cnn3)
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct GradCheckCmd {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<DensityError> for Failure {
    fn from(e: DensityError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<LossError> for Failure {
    fn from(e: LossError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Failure::Numeric(e.to_string()),
            TrainError::BadConfig { .. } | TrainError::UnknownKey(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Data(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenDensity(c) => gen_density(c),
        Cmd::Synth(c) => synth(c),
        Cmd::Pretrain(c) => pretrain(c),
        Cmd::Train(c) => train(c),
        Cmd::Eval(c) => eval(c),
        Cmd::Predict(c) => predict(c),
        Cmd::GradCheck(c) => grad_check(c),
    }
}

fn gen_density(c: GenDensityCmd) -> Result<(), Failure> {
    if c.scale != 1 && c.scale != 4 {
        return Err(Failure::Usage(format!("--scale must be 1 or 4, got {}", c.scale)));
    }
    let (h, w) = match (&c.image, c.height, c.width) {
        (Some(img), _, _) => {
            let (_, h, w) = read_image::<f64>(img)?;
            (h - h % 4, w - w % 4)
        }
        (None, Some(h), Some(w)) => (h, w),
        _ => {
            return Err(Failure::Usage(
                "--gen-density needs --image or both --height and --width".into(),
            ))
        }
    };
    if h == 0 || w == 0 || (c.scale == 4 && (h % 4 != 0 || w % 4 != 0)) {
        return Err(Failure::Usage(format!(
            "--height/--width must be positive multiples of 4 for scale 4, got {h}x{w}"
        )));
    }
    let policy: SigmaPolicy<f64> =
        c.sigma.parse().map_err(|e: DensityError| Failure::Usage(format!("--sigma: {e}")))?;
    if matches!(policy, SigmaPolicy::Perspective) && c.pmap.is_none() {
        return Err(Failure::Usage("--sigma persp requires --pmap".into()));
    }
    let pmap = match &c.pmap {
        Some(p) => Some(read_pmap::<f64>(p)?),
        None => None,
    };

    let points = read_points_csv::<f64>(&c.annotations)?;
    let ann = HeadAnnotations::new(points, h, w)
        .map_err(|e| Failure::Data(format!("{}: {e}", c.annotations.display())))?;
    let res = resolve_sigmas(&ann, policy, pmap.as_ref())?;
    if res.fell_back {
        eprintln!("warning: knn needs at least 3 heads, using fixed sigma 4");
    }
    let mut map = splat_density(&ann, &res.sigmas)?;
    if c.scale == 4 {
        map = sum_pool_downsample(&map, 4)?;
    }
    let out = c.out.unwrap_or_else(|| c.annotations.with_extension("dmap"));
    write_dmap(&map, &out)?;
    println!("wrote {} ({} heads, sum {})", out.display(), ann.len(), map.sum());
    Ok(())
}

fn synth(c: SynthCmd) -> Result<(), Failure> {
    let cfg = SynthConfig {
        size: c.size,
        count_min: c.heads_min,
        count_max: c.heads_max,
        radius_min: c.radius_min,
        radius_max: c.radius_max,
        noise: c.noise,
    };
    cfg.validate()?;
    fs::create_dir_all(&c.out).map_err(|e| io_failure(&c.out, e))?;
    let scenes = synth_dataset::<f64>(&cfg, c.count, c.seed)?;
    for s in &scenes {
        write_sample(s, &c.out)?;
    }
    println!("wrote {} scenes to {}", scenes.len(), c.out.display());
    Ok(())
}

fn build_config(opts: &TrainOpts) -> Result<TrainConfig<f64>, Failure> {
    let mut cfg = match &opts.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for kv in &opts.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")));
        };
        cfg.apply(k.trim(), v.trim())?;
    }
    if let Some(lr) = opts.lr {
        cfg.lr = lr;
    }
    if let Some(alpha) = opts.alpha {
        cfg.loss.alpha = alpha;
    }
    if let Some(batch) = opts.batch {
        cfg.batch = batch;
    }
    if let Some(s) = &opts.sigma {
        cfg.sigma =
            s.parse().map_err(|e: DensityError| Failure::Usage(format!("--sigma: {e}")))?;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_training_data(dir: &Path) -> Result<Vec<Sample<f64>>, Failure> {
    let (samples, dropped) = load_dataset::<f64>(dir)?;
    if dropped > 0 {
        eprintln!("warning: dropped {dropped} out-of-bounds annotations in {}", dir.display());
    }
    Ok(samples)
}

fn write_log(log: &TrainLog, path: &Path) -> Result<(), Failure> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf).map_err(|e| io_failure(path, e))?;
    fs::write(path, buf).map_err(|e| io_failure(path, e))
}

fn pretrain(c: PretrainCmd) -> Result<(), Failure> {
    let labels: Vec<BranchLabel> = match c.branch.as_str() {
        "L" => vec![BranchLabel::L],
        "M" => vec![BranchLabel::M],
        "S" => vec![BranchLabel::S],
        "all" => BranchLabel::ALL.to_vec(),
        other => {
            return Err(Failure::Usage(format!("--branch must be L, M, S, or all, got `{other}`")))
        }
    };
    let mut cfg = build_config(&c.opts)?;
    if let Some(iters) = c.opts.iterations {
        cfg.pretrain_iterations = iters;
    }
    let data = load_training_data(&c.opts.data)?;
    fs::create_dir_all(&c.opts.out).map_err(|e| io_failure(&c.opts.out, e))?;
    for label in labels {
        let (model, log) = pretrain_branch(label, &data, &cfg)?;
        let ckpt = c.opts.out.join(format!("pretrain-{}.amcnn", label.as_str()));
        model.save_checkpoint(&ckpt)?;
        write_log(&log, &c.opts.out.join(format!("pretrain-{}-log.csv", label.as_str())))?;
        let last = log.steps.last().map(|s| s.l_ed).unwrap_or(f64::NAN);
        println!(
            "pretrained branch {} ({} steps, final L_ED {last}) -> {}",
            label.as_str(),
            log.steps.len(),
            ckpt.display()
        );
    }
    Ok(())
}

fn train(c: TrainCmd) -> Result<(), Failure> {
    if c.from_pretrained.is_none() && !c.from_scratch {
        return Err(Failure::Usage(
            "pass --from-pretrained <dir> or --from-scratch explicitly".into(),
        ));
    }
    let mut cfg = build_config(&c.opts)?;
    if let Some(iters) = c.opts.iterations {
        cfg.finetune_iterations = iters;
    }
    let data = load_training_data(&c.opts.data)?;
    let eval_data = c.eval_data.as_deref().map(load_training_data).transpose()?;
    fs::create_dir_all(&c.opts.out).map_err(|e| io_failure(&c.opts.out, e))?;

    let mut model = build_model::<f64>(cfg.model_config())?;
    if let Some(dir) = &c.from_pretrained {
        let mut pres = Vec::new();
        for label in BranchLabel::ALL {
            let path = dir.join(format!("pretrain-{}.amcnn", label.as_str()));
            let pre = Model::load_checkpoint(&path)?;
            let n = model.adopt_from(&pre, &format!("branch.{}.", label.as_str()))?;
            if n == 0 {
                return Err(Failure::Data(format!(
                    "{}: no branch.{} tensors to adopt",
                    path.display(),
                    label.as_str()
                )));
            }
            pres.push(pre);
        }
        let refs: Vec<&Model<f64>> = pres.iter().collect();
        model.adopt_fused_head(&refs, cfg.head_init_scale)?;
        if cfg.attention_init_gain > 0.0 {
            model.seed_attention_from_heads(&refs, cfg.attention_init_gain)?;
        }
    }
    let log = finetune(&mut model, &data, &cfg, eval_data.as_deref(), Some(&c.opts.out))?;
    let ckpt = c.opts.out.join("model.amcnn");
    model.save_checkpoint(&ckpt)?;
    write_log(&log, &c.opts.out.join("train-log.csv"))?;
    let last = log.steps.last().map(|s| s.l).unwrap_or(f64::NAN);
    println!("trained {} steps (final L {last}) -> {}", log.steps.len(), ckpt.display());
    Ok(())
}

/// Mask-aware sum of a density map against a sample's ROI.
fn roi_sum(map: &DensityMap<f64>, sample: &Sample<f64>) -> Result<f64, Failure> {
    match &sample.roi {
        Some(roi) => {
            let mask = roi.mask_at(map.scale()).ok_or_else(|| {
                Failure::Data(format!(
                    "{}: no ROI mask at scale {}, use scale 1 or 4",
                    sample.id,
                    map.scale()
                ))
            })?;
            Ok(map
                .data()
                .iter()
                .zip(mask)
                .filter(|(_, &keep)| keep == 1)
                .map(|(v, _)| *v)
                .sum())
        }
        None => Ok(map.data().iter().sum()),
    }
}

fn roi_head_count(sample: &Sample<f64>) -> usize {
    match &sample.roi {
        Some(roi) => {
            sample.annotations.points().iter().filter(|&&(x, y)| roi.contains(x, y)).count()
        }
        None => sample.annotations.len(),
    }
}

fn eval(c: EvalCmd) -> Result<(), Failure> {
    let data = load_training_data(&c.data)?;
    let report = match (&c.checkpoint, &c.pred_dir) {
        (Some(ckpt), None) => {
            let model = Model::<f64>::load_checkpoint(ckpt)?;
            if let Some(dir) = &c.export_maps {
                fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
                for s in &data {
                    let out = model.forward(&s.image_tensor())?;
                    export_maps(&model, &out.density, &out.attention_maps, &dir.join(&s.id))?;
                }
            }
            evaluate(&model, &data)?
        }
        (None, Some(pred_dir)) => {
            let mut rows = Vec::with_capacity(data.len());
            for s in &data {
                let path = pred_dir.join(format!("{}.dmap", s.id));
                let map = read_dmap::<f64>(&path)?;
                rows.push(EvalRow {
                    id: s.id.clone(),
                    gt: roi_head_count(s) as f64,
                    pred: roi_sum(&map, s)?,
                });
            }
            EvalReport::from_rows(rows)?
        }
        _ => {
            return Err(Failure::Usage(
                "pass exactly one of --checkpoint or --pred-dir".into(),
            ))
        }
    };
    report.write_csv(std::io::stdout().lock()).map_err(|e| Failure::Data(e.to_string()))?;
    Ok(())
}

/// Writes `<prefix>.dmap` for the density and, per attention map,
/// `<prefix>-attn[-<branch>].dmap` (raw) plus `.pgm` (scaled by max).
fn export_maps(
    model: &Model<f64>,
    density: &Tensor<f64>,
    attention: &[Tensor<f64>],
    prefix: &Path,
) -> Result<(), Failure> {
    let as_map = |t: &Tensor<f64>| -> Result<DensityMap<f64>, Failure> {
        let s = t.shape();
        Ok(DensityMap::from_grid(t.to_vec(), s[1], s[2], 4)?)
    };
    write_dmap(&as_map(density)?, with_suffix(prefix, "", "dmap"))?;
    let suffixes: Vec<String> = match model.variant() {
        Variant::AmCnn3 => {
            BranchLabel::ALL.iter().map(|l| format!("-attn-{}", l.as_str())).collect()
        }
        _ => vec!["-attn".to_string()],
    };
    for (map, suffix) in attention.iter().zip(&suffixes) {
        let dm = as_map(map)?;
        write_dmap(&dm, with_suffix(prefix, suffix, "dmap"))?;
        let grid = map.to_vec();
        let peak = grid.iter().cloned().fold(0.0f64, f64::max);
        let scaled: Vec<f64> =
            grid.iter().map(|v| if peak > 0.0 { v / peak } else { 0.0 }).collect();
        write_pgm(with_suffix(prefix, suffix, "pgm"), &scaled, dm.height(), dm.width())?;
    }
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str, ext: &str) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    name.push(".");
    name.push(ext);
    prefix.with_file_name(name)
}

fn predict(c: PredictCmd) -> Result<(), Failure> {
    let model = Model::<f64>::load_checkpoint(&c.checkpoint)?;
    let (raw, h, w) = read_image::<f64>(&c.image)?;
    let (h4, w4) = (h - h % 4, w - w % 4);
    if h4 == 0 || w4 == 0 {
        return Err(Failure::Data(format!(
            "{}: {h}x{w} image is too small, need 4x4",
            c.image.display()
        )));
    }
    let mut pixels = Vec::with_capacity(h4 * w4);
    for y in 0..h4 {
        pixels.extend_from_slice(&raw[y * w..y * w + w4]);
    }
    let image = Tensor::from_vec(&[1, h4, w4], pixels).map_err(|e| Failure::Data(e.to_string()))?;
    let out = model.forward(&image)?;
    if let Some(dir) = c.out_prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
        }
    }
    export_maps(&model, &out.density, &out.attention_maps, &c.out_prefix)?;
    let count: f64 = out.density.to_vec().iter().sum();
    println!("{}: predicted count {count}", c.image.display());
    Ok(())
}

fn grad_check(c: GradCheckCmd) -> Result<(), Failure> {
    let mut failed = 0;
    for entry in run_default_suite(c.seed) {
        let verdict = if entry.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<26} max rel err {:>12.4e}  tol {:>8.0e}  {verdict}",
            entry.name, entry.rel_err, entry.tolerance
        );
        if !entry.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::Numeric(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}
