//! Command-line front end: dataset generation, training, evaluation,
//! decoding, certification checks, and tensor dumps.
//!
//! Every run resolves its configuration the same way: defaults, overridden by
//! an optional TOML file (`--config`), overridden by command-line flags. The
//! fully-resolved configuration is echoed to stderr before any work happens,
//! so logs always record exactly what ran.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 certification
//! failure (a `gradcheck` or `oraclecheck` run that exceeded its tolerance).

use std::fs::File;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ctc2d::decode::strategy_score;
use ctc2d::labels::LabelSequence;
use ctc2d::lattice::{forward_backward, write_alpha_beta_csv};
use ctc2d::model::GridProducer;
use ctc2d::oracle::{
    brute_force_sequence_prob, ctc1d_forward, finite_diff_grad, random_grid, random_instance,
    InstanceLimits,
};
use ctc2d::synthgen::{read_jsonl, Layout};
use ctc2d::{
    argmax_grid, decode_with_strategy, gen_dataset, grad_wrt_logits, grad_wrt_probs,
    sequence_log_prob, set_loss, softmax_grid, train, validate_grid, Alphabet, DatasetSpec,
    Error, GlyphSource, GroupingStrategy, LambdaParams, LogitsGrid, LossMode, PatchClassifier,
    ProbGrid, Result, TargetSet, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "ctc2d",
    version,
    about = "Sequence recognition over 2D grids: data generation, training, \
             evaluation, decoding, and certification"
)]
struct Cli {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/test JSONL plus a manifest).
    Gen(GenArgs),
    /// Train the patch classifier on a JSONL dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a JSONL dataset.
    Eval(EvalArgs),
    /// Decode a probability grid, or one dataset sample through a checkpoint.
    Decode(DecodeArgs),
    /// Certify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Certify the dynamic programs against brute-force enumeration.
    Oraclecheck(OraclecheckArgs),
    /// Dump the forward/backward tensors for one grid and label as CSV.
    DumpAlpha(DumpAlphaArgs),
}

// ---------------------------------------------------------------------------
// Configuration: defaults < TOML file < flags. Sections mirror subcommands.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    /// Worker threads (0 = one per core).
    threads: usize,
    lambda: LambdaSection,
    gen: GenSection,
    train: TrainSection,
    eval: EvalSection,
    decode: DecodeSection,
    gradcheck: GradcheckSection,
    oraclecheck: OraclecheckSection,
    dump_alpha: DumpAlphaSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LambdaSection {
    lambda1: f64,
    lambda2: f64,
}

impl Default for LambdaSection {
    fn default() -> Self {
        LambdaSection {
            lambda1: 0.9,
            lambda2: 0.1,
        }
    }
}

impl LambdaSection {
    fn params(&self) -> Result<LambdaParams> {
        LambdaParams::new(self.lambda1, self.lambda2)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenSection {
    out_dir: PathBuf,
    layout: String,
    max_sequences: usize,
    len_min: usize,
    len_max: usize,
    jitter_px: i64,
    rotation_deg: f64,
    noise_ratio_denom: usize,
    train_count: usize,
    test_count: usize,
    seed: u64,
    /// IDX image/label files for the glyph pool; omit both to use the
    /// built-in font.
    #[serde(skip_serializing_if = "Option::is_none")]
    glyph_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    glyph_labels: Option<PathBuf>,
}

impl Default for GenSection {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        GenSection {
            out_dir: PathBuf::from("data"),
            layout: spec.layout.to_string(),
            max_sequences: spec.max_sequences,
            len_min: spec.len_min,
            len_max: spec.len_max,
            jitter_px: spec.jitter_px,
            rotation_deg: spec.rotation_deg,
            noise_ratio_denom: spec.noise_ratio_denom,
            train_count: spec.train_count,
            test_count: spec.test_count,
            seed: spec.seed,
            glyph_images: None,
            glyph_labels: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSection {
    dataset: PathBuf,
    epochs: usize,
    batch_size: usize,
    hidden: usize,
    rho: f64,
    eps: f64,
    loss_mode: String,
    strategy: String,
    holdout_fraction: f64,
    seed: u64,
    checkpoint_dir: PathBuf,
    /// When set, per-epoch statistics are written here as JSON.
    #[serde(skip_serializing_if = "Option::is_none")]
    log_path: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let cfg = TrainConfig::default();
        TrainSection {
            dataset: PathBuf::from("data/train.jsonl"),
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            hidden: cfg.hidden,
            rho: cfg.rho,
            eps: cfg.eps,
            loss_mode: cfg.loss_mode.to_string(),
            strategy: cfg.strategy.to_string(),
            holdout_fraction: cfg.holdout_fraction,
            seed: cfg.seed,
            checkpoint_dir: PathBuf::from("ckpt"),
            log_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSection {
    dataset: PathBuf,
    checkpoint: PathBuf,
    strategy: String,
    /// Score every strategy on the dataset and use the best.
    select_strategy: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics_out: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            dataset: PathBuf::from("data/test.jsonl"),
            checkpoint: PathBuf::from("ckpt/final.ckpt"),
            strategy: GroupingStrategy::Rows.to_string(),
            select_strategy: false,
            metrics_out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DecodeSection {
    /// JSON probability grid file (`{"h","w","q","probs"}`).
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<PathBuf>,
    /// Alternative input: a dataset sample pushed through a checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<PathBuf>,
    index: usize,
    strategy: String,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            grid: None,
            dataset: None,
            checkpoint: None,
            index: 0,
            strategy: GroupingStrategy::Rows.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckSection {
    trials: usize,
    seed: u64,
    eps: f64,
    tolerance: f64,
    loss_mode: String,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            trials: 50,
            seed: 5,
            eps: 1e-6,
            tolerance: 1e-5,
            loss_mode: LossMode::default().to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OraclecheckSection {
    trials: usize,
    seed: u64,
    tolerance: f64,
}

impl Default for OraclecheckSection {
    fn default() -> Self {
        OraclecheckSection {
            trials: 200,
            seed: 7,
            tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DumpAlphaSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<PathBuf>,
    /// Digit string (`"407"`) or comma-separated class indices (`"5,1,8"`).
    label: String,
    /// CSV destination; stdout when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

impl Default for DumpAlphaSection {
    fn default() -> Self {
        DumpAlphaSection {
            grid: None,
            label: String::new(),
            out: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Flags: every field optional; `Some` overrides the config file.
// ---------------------------------------------------------------------------

fn set<T>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// `stacked-rows` or `horizontal-vertical`.
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    max_sequences: Option<usize>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
    #[arg(long)]
    jitter_px: Option<i64>,
    #[arg(long)]
    rotation_deg: Option<f64>,
    #[arg(long)]
    noise_ratio_denom: Option<usize>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, requires = "glyph_labels")]
    glyph_images: Option<PathBuf>,
    #[arg(long, requires = "glyph_images")]
    glyph_labels: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Hidden width of the patch classifier (0 = affine).
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// `neg-log-mean-prob` or `sum-neg-log-probs`.
    #[arg(long)]
    loss_mode: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    holdout_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    log_path: Option<PathBuf>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    /// Score every strategy on the dataset and use the best.
    #[arg(long)]
    select_strategy: bool,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// JSON probability grid file; conflicts with --dataset/--checkpoint.
    #[arg(long, conflicts_with_all = ["dataset", "checkpoint", "index"])]
    grid: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    dataset: Option<PathBuf>,
    #[arg(long, requires = "dataset")]
    checkpoint: Option<PathBuf>,
    /// Sample index within --dataset.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Finite-difference step size.
    #[arg(long)]
    eps: Option<f64>,
    /// Maximum allowed relative error.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    loss_mode: Option<String>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

#[derive(Args)]
struct OraclecheckArgs {
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum allowed relative error.
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

#[derive(Args)]
struct DumpAlphaArgs {
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Digit string (`"407"`) or comma-separated class indices (`"5,1,8"`).
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

// ---------------------------------------------------------------------------
// Entry point and dispatch.
// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| {
                Error::InvalidConfig(format!("{}: {e}", p.display()))
            })
        }
    }
}

fn echo_config(cfg: &FileConfig) -> Result<()> {
    let rendered = toml::to_string(cfg)
        .map_err(|e| Error::InvalidConfig(format!("cannot render config: {e}")))?;
    eprintln!("resolved configuration:");
    for line in rendered.lines() {
        eprintln!("  {line}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(cli.config.as_ref())?;
    set(&mut cfg.threads, cli.threads);
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Gen(args) => {
            apply_gen(&mut cfg, args);
            echo_config(&cfg)?;
            run_gen(&cfg)
        }
        Command::Train(args) => {
            apply_train(&mut cfg, args);
            echo_config(&cfg)?;
            run_train(&cfg)
        }
        Command::Eval(args) => {
            apply_eval(&mut cfg, args);
            echo_config(&cfg)?;
            run_eval(&cfg)
        }
        Command::Decode(args) => {
            apply_decode(&mut cfg, args);
            echo_config(&cfg)?;
            run_decode(&cfg)
        }
        Command::Gradcheck(args) => {
            apply_gradcheck(&mut cfg, args);
            echo_config(&cfg)?;
            run_gradcheck(&cfg)
        }
        Command::Oraclecheck(args) => {
            apply_oraclecheck(&mut cfg, args);
            echo_config(&cfg)?;
            run_oraclecheck(&cfg)
        }
        Command::DumpAlpha(args) => {
            apply_dump_alpha(&mut cfg, args);
            echo_config(&cfg)?;
            run_dump_alpha(&cfg)
        }
    }
}

fn apply_gen(cfg: &mut FileConfig, a: GenArgs) {
    let g = &mut cfg.gen;
    set(&mut g.out_dir, a.out_dir);
    set(&mut g.layout, a.layout);
    set(&mut g.max_sequences, a.max_sequences);
    set(&mut g.len_min, a.len_min);
    set(&mut g.len_max, a.len_max);
    set(&mut g.jitter_px, a.jitter_px);
    set(&mut g.rotation_deg, a.rotation_deg);
    set(&mut g.noise_ratio_denom, a.noise_ratio_denom);
    set(&mut g.train_count, a.train_count);
    set(&mut g.test_count, a.test_count);
    set(&mut g.seed, a.seed);
    set(&mut g.glyph_images, a.glyph_images.map(Some));
    set(&mut g.glyph_labels, a.glyph_labels.map(Some));
}

fn apply_train(cfg: &mut FileConfig, a: TrainArgs) {
    set(&mut cfg.lambda.lambda1, a.lambda1);
    set(&mut cfg.lambda.lambda2, a.lambda2);
    let t = &mut cfg.train;
    set(&mut t.dataset, a.dataset);
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.hidden, a.hidden);
    set(&mut t.rho, a.rho);
    set(&mut t.eps, a.eps);
    set(&mut t.loss_mode, a.loss_mode);
    set(&mut t.strategy, a.strategy);
    set(&mut t.holdout_fraction, a.holdout_fraction);
    set(&mut t.seed, a.seed);
    set(&mut t.checkpoint_dir, a.checkpoint_dir);
    set(&mut t.log_path, a.log_path.map(Some));
}

fn apply_eval(cfg: &mut FileConfig, a: EvalArgs) {
    let e = &mut cfg.eval;
    set(&mut e.dataset, a.dataset);
    set(&mut e.checkpoint, a.checkpoint);
    set(&mut e.strategy, a.strategy);
    if a.select_strategy {
        e.select_strategy = true;
    }
    set(&mut e.metrics_out, a.metrics_out.map(Some));
}

fn apply_decode(cfg: &mut FileConfig, a: DecodeArgs) {
    let d = &mut cfg.decode;
    set(&mut d.grid, a.grid.map(Some));
    set(&mut d.dataset, a.dataset.map(Some));
    set(&mut d.checkpoint, a.checkpoint.map(Some));
    set(&mut d.index, a.index);
    set(&mut d.strategy, a.strategy);
}

fn apply_gradcheck(cfg: &mut FileConfig, a: GradcheckArgs) {
    set(&mut cfg.lambda.lambda1, a.lambda1);
    set(&mut cfg.lambda.lambda2, a.lambda2);
    let g = &mut cfg.gradcheck;
    set(&mut g.trials, a.trials);
    set(&mut g.seed, a.seed);
    set(&mut g.eps, a.eps);
    set(&mut g.tolerance, a.tolerance);
    set(&mut g.loss_mode, a.loss_mode);
}

fn apply_oraclecheck(cfg: &mut FileConfig, a: OraclecheckArgs) {
    set(&mut cfg.lambda.lambda1, a.lambda1);
    set(&mut cfg.lambda.lambda2, a.lambda2);
    let o = &mut cfg.oraclecheck;
    set(&mut o.trials, a.trials);
    set(&mut o.seed, a.seed);
    set(&mut o.tolerance, a.tolerance);
}

fn apply_dump_alpha(cfg: &mut FileConfig, a: DumpAlphaArgs) {
    set(&mut cfg.lambda.lambda1, a.lambda1);
    set(&mut cfg.lambda.lambda2, a.lambda2);
    let d = &mut cfg.dump_alpha;
    set(&mut d.grid, a.grid.map(Some));
    set(&mut d.label, a.label);
    set(&mut d.out, a.out.map(Some));
}

// ---------------------------------------------------------------------------
// Subcommand implementations.
// ---------------------------------------------------------------------------

fn run_gen(cfg: &FileConfig) -> Result<ExitCode> {
    let g = &cfg.gen;
    let spec = DatasetSpec {
        layout: g.layout.parse::<Layout>()?,
        max_sequences: g.max_sequences,
        len_min: g.len_min,
        len_max: g.len_max,
        jitter_px: g.jitter_px,
        rotation_deg: g.rotation_deg,
        noise_ratio_denom: g.noise_ratio_denom,
        train_count: g.train_count,
        test_count: g.test_count,
        seed: g.seed,
    };
    let glyphs = match (&g.glyph_images, &g.glyph_labels) {
        (Some(images), Some(labels)) => GlyphSource::from_idx(images, labels)?,
        (None, None) => GlyphSource::builtin(),
        _ => {
            return Err(Error::InvalidConfig(
                "glyph_images and glyph_labels must be given together".into(),
            ))
        }
    };
    let report = gen_dataset(&spec, &glyphs, &g.out_dir)?;
    println!(
        "wrote {} ({} samples), {} ({} samples), {}",
        report.train_path.display(),
        spec.train_count,
        report.test_path.display(),
        spec.test_count,
        report.manifest_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_train(cfg: &FileConfig) -> Result<ExitCode> {
    let t = &cfg.train;
    let config = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        hidden: t.hidden,
        rho: t.rho,
        eps: t.eps,
        lambda1: cfg.lambda.lambda1,
        lambda2: cfg.lambda.lambda2,
        loss_mode: t.loss_mode.parse()?,
        strategy: t.strategy.parse()?,
        holdout_fraction: t.holdout_fraction,
        seed: t.seed,
        checkpoint_dir: Some(t.checkpoint_dir.clone()),
    };
    let samples = read_jsonl(&t.dataset)?;
    println!(
        "training on {} samples from {}",
        samples.len(),
        t.dataset.display()
    );
    let (_, stats) = train(&samples, &Alphabet::digits(), &config)?;
    for s in &stats {
        let mut line = format!("epoch {:>3}: mean loss {:.4}", s.epoch, s.mean_train_loss);
        if let Some(h) = &s.holdout {
            line.push_str(&format!(
                " | holdout NED {:.2}% SA {:.2}% IA {:.2}%",
                h.ned_pct, h.sa_pct, h.ia_pct
            ));
        }
        if s.skipped > 0 {
            line.push_str(&format!(" | skipped {}", s.skipped));
        }
        println!("{line}");
    }
    if let Some(log_path) = &t.log_path {
        let mut text = serde_json::to_string_pretty(&stats)?;
        text.push('\n');
        std::fs::write(log_path, text)?;
        println!("wrote {}", log_path.display());
    }
    println!("wrote {}", t.checkpoint_dir.join("final.ckpt").display());
    Ok(ExitCode::SUCCESS)
}

fn run_eval(cfg: &FileConfig) -> Result<ExitCode> {
    let e = &cfg.eval;
    let model = PatchClassifier::load(&e.checkpoint)?;
    let samples = read_jsonl(&e.dataset)?;
    let alphabet = Alphabet::digits();
    let strategy = if e.select_strategy {
        let pairs: Vec<(ctc2d::ArgmaxGrid, TargetSet)> = samples
            .iter()
            .map(|s| {
                Ok((
                    argmax_grid(&model.produce(s)?),
                    s.target_set(&alphabet)?,
                ))
            })
            .collect::<Result<_>>()?;
        for candidate in GroupingStrategy::all() {
            println!(
                "strategy {:>16}: mean best-match distance {:.4}",
                candidate.name(),
                strategy_score(candidate, &pairs)
            );
        }
        let (best, score) = ctc2d::select_strategy(&GroupingStrategy::all(), &pairs)?;
        println!("selected strategy {} (score {score:.4})", best.name());
        best
    } else {
        e.strategy.parse()?
    };
    let (metrics, _) = ctc2d::evaluate(&model, &samples, &alphabet, strategy)?;
    println!("{metrics}");
    if let Some(path) = &e.metrics_out {
        let mut text = serde_json::to_string_pretty(&metrics)?;
        text.push('\n');
        std::fs::write(path, text)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn run_decode(cfg: &FileConfig) -> Result<ExitCode> {
    let d = &cfg.decode;
    let grid = match (&d.grid, &d.dataset, &d.checkpoint) {
        (Some(path), None, None) => ProbGrid::from_json(File::open(path)?)?,
        (None, Some(dataset), Some(checkpoint)) => {
            let samples = read_jsonl(dataset)?;
            let sample = samples.get(d.index).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "sample index {} out of range ({} samples in {})",
                    d.index,
                    samples.len(),
                    dataset.display()
                ))
            })?;
            PatchClassifier::load(checkpoint)?.produce(sample)?
        }
        _ => {
            return Err(Error::InvalidConfig(
                "decode needs either a grid file or a dataset plus a checkpoint".into(),
            ))
        }
    };
    let diag = validate_grid(&grid);
    if !diag.is_clean() {
        return Err(Error::InvalidGrid(format!(
            "{} findings (max cell-sum deviation {:.3e}, min entry {:.3e})",
            diag.findings.len(),
            diag.max_sum_deviation,
            diag.min_entry
        )));
    }
    let strategy: GroupingStrategy = d.strategy.parse()?;
    let decoded = decode_with_strategy(&argmax_grid(&grid), strategy);
    let alphabet = Alphabet::digits();
    if grid.q() == alphabet.q() {
        println!("{}", serde_json::to_string(&decoded.strings(&alphabet)?)?);
    } else {
        let sequences: Vec<Vec<usize>> = decoded
            .to_sequences()
            .iter()
            .map(|s| s.labels().to_vec())
            .collect();
        println!("{}", serde_json::to_string(&sequences)?);
    }
    Ok(ExitCode::SUCCESS)
}

/// Relative error with an absolute floor so tiny true values do not explode.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn random_targets(rng: &mut ChaCha8Rng, h: usize, w: usize, q: usize) -> TargetSet {
    let count = rng.random_range(1..=2);
    let cap = ((h + w) / 2).clamp(1, 2);
    let sequences = (0..count)
        .map(|_| {
            let len = rng.random_range(1..=cap);
            let labels = (0..len).map(|_| rng.random_range(1..q)).collect();
            LabelSequence::new(labels, q).expect("classes drawn in range")
        })
        .collect();
    TargetSet::new(sequences).expect("at least one sequence")
}

fn run_gradcheck(cfg: &FileConfig) -> Result<ExitCode> {
    let g = &cfg.gradcheck;
    let lambda = cfg.lambda.params()?;
    let mode: LossMode = g.loss_mode.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut max_probs = 0.0_f64;
    let mut max_logits = 0.0_f64;
    for _ in 0..g.trials {
        let h = rng.random_range(1..=3);
        let w = rng.random_range(1..=3);
        let q = rng.random_range(2..=3);
        let x = random_grid(&mut rng, h, w, q);
        let targets = random_targets(&mut rng, h, w, q);

        let (_, analytic) = grad_wrt_probs(&x, &targets, &lambda, mode)?;
        let fd = finite_diff_grad(
            |data| {
                let grid = ProbGrid::from_vec(h, w, q, data.to_vec()).expect("perturbed grid");
                set_loss(&grid, &targets, &lambda, mode).expect("feasible targets").loss
            },
            x.data(),
            g.eps,
        )?;
        for (a, f) in analytic.iter().zip(&fd) {
            max_probs = max_probs.max(rel_err(*a, *f));
        }

        // Logits chosen as ln(x) give back x under softmax, so both paths
        // are exercised at the same operating point.
        let z_data: Vec<f64> = x.data().iter().map(|&v| v.ln()).collect();
        let z = LogitsGrid::from_vec(h, w, q, z_data.clone())?;
        let (_, analytic_z) = grad_wrt_logits(&z, &targets, &lambda, mode)?;
        let fd_z = finite_diff_grad(
            |data| {
                let grid = LogitsGrid::from_vec(h, w, q, data.to_vec()).expect("perturbed logits");
                set_loss(&softmax_grid(&grid), &targets, &lambda, mode)
                    .expect("feasible targets")
                    .loss
            },
            &z_data,
            g.eps,
        )?;
        for (a, f) in analytic_z.iter().zip(&fd_z) {
            max_logits = max_logits.max(rel_err(*a, *f));
        }
    }
    println!(
        "gradcheck: {} trials, max relative error {:.3e} (grid entries), {:.3e} (logits), tolerance {:.1e}",
        g.trials, max_probs, max_logits, g.tolerance
    );
    if max_probs > g.tolerance || max_logits > g.tolerance {
        println!("gradcheck FAILED");
        return Ok(ExitCode::from(2));
    }
    println!("gradcheck passed");
    Ok(ExitCode::SUCCESS)
}

fn run_oraclecheck(cfg: &FileConfig) -> Result<ExitCode> {
    let o = &cfg.oraclecheck;
    let lambda = cfg.lambda.params()?;
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut max_err = 0.0_f64;
    let mut zero_agreements = 0usize;
    for _ in 0..o.trials {
        let (x, labels) = random_instance(&mut rng, &InstanceLimits::default());
        let reference = brute_force_sequence_prob(&x, &labels, &lambda)?;
        let dp = sequence_log_prob(&x, &labels, &lambda)?.exp();
        if reference < 1e-300 || dp < 1e-300 {
            if reference < 1e-300 && dp < 1e-300 {
                zero_agreements += 1;
                continue;
            }
            return Err(Error::NonFinite(format!(
                "zero-mass disagreement: reference {reference:e} vs dynamic program {dp:e}"
            )));
        }
        max_err = max_err.max(rel_err(reference, dp));
    }
    // Single-row grids must reduce to plain 1D matching scaled by the
    // horizontal weight of the only path.
    let mut max_1d = 0.0_f64;
    for _ in 0..o.trials {
        let w = rng.random_range(1..=6);
        let q = rng.random_range(2..=4);
        let x = random_grid(&mut rng, 1, w, q);
        let len = rng.random_range(1..=w.div_ceil(2));
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(1..q)).collect();
        let cells: Vec<&[f64]> = (0..w).map(|j| x.cell(0, j)).collect();
        let reference = lambda.lambda1().powi(w as i32 - 1) * ctc1d_forward(&cells, &labels)?;
        let dp = sequence_log_prob(&x, &labels, &lambda)?.exp();
        if reference < 1e-300 && dp < 1e-300 {
            continue;
        }
        max_1d = max_1d.max(rel_err(reference, dp));
    }
    println!(
        "oraclecheck: {} trials, max relative error {:.3e} (2D enumeration, {} exact-zero agreements), {:.3e} (single-row reduction), tolerance {:.1e}",
        o.trials, max_err, zero_agreements, max_1d, o.tolerance
    );
    if max_err > o.tolerance || max_1d > o.tolerance {
        println!("oraclecheck FAILED");
        return Ok(ExitCode::from(2));
    }
    println!("oraclecheck passed");
    Ok(ExitCode::SUCCESS)
}

fn parse_label_arg(text: &str, q: usize) -> Result<Vec<usize>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let classes: Vec<usize> = if text.contains(',') {
        text.split(',')
            .map(|part| {
                part.trim().parse::<usize>().map_err(|_| {
                    Error::InvalidLabel(format!("bad class index {part:?} in label"))
                })
            })
            .collect::<Result<_>>()?
    } else {
        let alphabet = Alphabet::digits();
        if q != alphabet.q() {
            return Err(Error::InvalidLabel(format!(
                "digit labels need {} classes but the grid has {q}; \
                 use comma-separated class indices",
                alphabet.q()
            )));
        }
        alphabet.parse(text)?.labels().to_vec()
    };
    for &k in &classes {
        if k == 0 || k >= q {
            return Err(Error::InvalidLabel(format!(
                "class {k} out of range 1..{q}"
            )));
        }
    }
    Ok(classes)
}

fn run_dump_alpha(cfg: &FileConfig) -> Result<ExitCode> {
    let d = &cfg.dump_alpha;
    let path = d
        .grid
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("dump-alpha needs a grid file".into()))?;
    let x = ProbGrid::from_json(File::open(path)?)?;
    let labels = parse_label_arg(&d.label, x.q())?;
    let lambda = cfg.lambda.params()?;
    let result = forward_backward(&x, &labels, &lambda)?;
    let (alpha, beta) = (
        result.alpha.as_ref().expect("forward tensor retained"),
        result.beta.as_ref().expect("backward tensor retained"),
    );
    match &d.out {
        Some(out_path) => {
            let mut out = std::io::BufWriter::new(File::create(out_path)?);
            write_alpha_beta_csv(&mut out, alpha, beta)?;
            out.flush()?;
            println!("wrote {}", out_path.display());
        }
        None => {
            let stdout = std::io::stdout();
            write_alpha_beta_csv(stdout.lock(), alpha, beta)?;
        }
    }
    eprintln!("log probability: {}", result.log_prob);
    Ok(ExitCode::SUCCESS)
}
