//! `vast` — command-line driver for the separation pipeline.
//!
//! Subcommands cover the whole workflow: `gen-data` renders the synthetic
//! corpus, `invert` fits latent captions, `train` runs the SGD loop,
//! `separate` isolates one example with a text or video query and dumps
//! listenable/viewable artifacts, `eval` scores the test split, `gradcheck`
//! verifies the objectives against finite differences, and `ablate` trains
//! the directional-comparison grid. Every run writes a
//! `run-manifest.json` with the fully resolved configuration and seeds so it
//! can be reproduced exactly; failures print a single `error: ...` line and
//! exit nonzero. The `VAST_THREADS` environment variable caps all worker
//! threads.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use vast_core::datagen::{DataConfig, Dataset, ManifestRecord, Split};
use vast_core::dsp::{self, Grid, StftParams};
use vast_core::foundation::{self, AttnMode, EmbeddingGrid, Modality};
use vast_core::losses::{
    audio_language_loss, mask_loss, trimodal_loss, CaptionVocabulary, LossError, LossWeights,
};
use vast_core::metrics::{self, ReportRow};
use vast_core::sepmodel::{separate, Query, SepConfig};
use vast_core::tensor::{
    grad_check, op_gradcheck_suite, Array, TensorError, GRADCHECK_STEP, GRADCHECK_TOL,
};
use vast_core::trainer::{self, load_checkpoint, model_from_checkpoint, MilMode, TrainConfig};
use vast_core::{evalrun, util};

type AnyError = Box<dyn std::error::Error + Send + Sync>;
type Result<T> = std::result::Result<T, AnyError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e
                .to_string()
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim()
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("error: {first}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = worker_cap() {
        // First thing in the process, so the shared pool cannot exist yet.
        if let Err(e) = util::limit_worker_threads(n) {
            eprintln!("error: VAST_THREADS: {e}");
            return ExitCode::FAILURE;
        }
    }
    match cli.cmd.run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line: String = e
                .to_string()
                .split(['\n', '\r'])
                .filter(|s| !s.trim().is_empty())
                .collect::<Vec<_>>()
                .join("; ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}

/// `VAST_THREADS`, if set and valid.
fn worker_cap() -> Option<usize> {
    let raw = std::env::var("VAST_THREADS").ok()?;
    raw.trim().parse::<usize>().ok().filter(|&n| n > 0)
}

#[derive(Parser)]
#[command(
    name = "vast",
    version,
    about = "Self-supervised audio separation on a synthetic trimodal corpus"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic audio/video corpus into a dataset directory.
    GenData(GenDataArgs),
    /// Fit latent captions for every video in a dataset.
    Invert(InvertArgs),
    /// Train the query-conditioned separator.
    Train(TrainArgs),
    /// Separate one example and write WAV/PGM artifacts.
    Separate(SeparateArgs),
    /// Score separation quality on the test split and write a metrics CSV.
    Eval(EvalArgs),
    /// Check all three objectives against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the ablation grid and tabulate NSDR per variant.
    Ablate(AblateArgs),
}

impl Cmd {
    fn run(&self) -> Result<()> {
        match self {
            Cmd::GenData(a) => a.run(),
            Cmd::Invert(a) => a.run(),
            Cmd::Train(a) => a.run(),
            Cmd::Separate(a) => a.run(),
            Cmd::Eval(a) => a.run(),
            Cmd::Gradcheck(a) => a.run(),
            Cmd::Ablate(a) => a.run(),
        }
    }
}

/// How a video becomes a query: one mask per region (averaged), or one mask
/// from a max-pooled video embedding.
#[derive(Clone, Copy, Debug, ValueEnum)]
enum MilArg {
    Region,
    Video,
}

impl From<MilArg> for MilMode {
    fn from(m: MilArg) -> Self {
        match m {
            MilArg::Region => MilMode::Region,
            MilArg::Video => MilMode::Video,
        }
    }
}

/// Query modality: AL = language (concept text), AV = the example's video.
#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum ModeArg {
    #[value(alias = "AL")]
    Al,
    #[value(alias = "AV")]
    Av,
}

/// Writes `<out>/run-manifest.json` with the resolved configuration.
fn write_manifest(out: &Path, payload: serde_json::Value) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let path = out.join("run-manifest.json");
    let body = serde_json::to_string_pretty(&payload)?;
    fs::write(&path, body + "\n").map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&body).map_err(|e| format!("{}: {e}", path.display()))?)
}

/// Parses a `concept:<k>` text query.
fn parse_concept_query(q: &str) -> Result<usize> {
    let rest = q
        .strip_prefix("concept:")
        .ok_or_else(|| format!("query must look like \"concept:<k>\", got {q:?}"))?;
    Ok(rest
        .trim()
        .parse::<usize>()
        .map_err(|_| format!("bad concept index in query {q:?}"))?)
}

fn find_record<'d>(dataset: &'d Dataset, id: &str) -> Result<&'d ManifestRecord> {
    for split in [Split::Train, Split::Val, Split::Test] {
        if let Some(rec) = dataset.records(split).into_iter().find(|r| r.id == id) {
            return Ok(rec);
        }
    }
    Err(format!("no example named {id:?} in the manifest").into())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenDataArgs {
    /// JSON file with the full data configuration (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl GenDataArgs {
    fn run(&self) -> Result<()> {
        let mut cfg: DataConfig = match &self.config {
            Some(p) => read_json_config(p)?,
            None => DataConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        write_manifest(
            &self.out,
            json!({"command": "gen-data", "config": &cfg, "out": self.out}),
        )?;
        let dataset = Dataset::generate(cfg, &self.out)?;
        let n = |s: Split| dataset.records(s).len();
        println!(
            "generated {} train / {} val / {} test examples under {}",
            n(Split::Train),
            n(Split::Val),
            n(Split::Test),
            dataset.root().display()
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// invert
// ---------------------------------------------------------------------------

#[derive(Args)]
struct InvertArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for captions.json.
    #[arg(long)]
    out: PathBuf,
    /// Learned tokens per caption.
    #[arg(long, default_value_t = 3)]
    tokens: usize,
    /// Optimization iterations per video.
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    /// Gradient-step size.
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
struct CaptionRow {
    id: String,
    split: String,
    concepts: Vec<usize>,
    fit: f64,
    iterations: usize,
    caption: Vec<f64>,
}

impl InvertArgs {
    fn run(&self) -> Result<()> {
        let dataset = Dataset::load(&self.data)?;
        write_manifest(
            &self.out,
            json!({
                "command": "invert", "data": self.data, "tokens": self.tokens,
                "iters": self.iters, "step": self.step, "seed": self.seed,
            }),
        )?;
        let mut rows = Vec::new();
        let mut idx = 0u64;
        for split in [Split::Train, Split::Val, Split::Test] {
            for rec in dataset.records(split) {
                let grid = dataset.grid(rec)?;
                let cap = foundation::extract_latent_caption(
                    dataset.space(),
                    &grid,
                    self.tokens,
                    self.iters,
                    self.step,
                    self.seed ^ idx,
                )?;
                rows.push(CaptionRow {
                    id: rec.id.clone(),
                    split: split.to_string(),
                    concepts: rec.concepts.clone(),
                    fit: cap.fit,
                    iterations: cap.iterations,
                    caption: cap.caption,
                });
                idx += 1;
            }
        }
        if rows.is_empty() {
            return Err("dataset has no examples".into());
        }
        let path = self.out.join("captions.json");
        fs::write(&path, serde_json::to_string_pretty(&rows)? + "\n")
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let mean = rows.iter().map(|r| r.fit).sum::<f64>() / rows.len() as f64;
        let worst = rows.iter().map(|r| r.fit).fold(f64::INFINITY, f64::min);
        println!(
            "inverted {} captions: mean fit {:.6}, min fit {:.6} -> {}",
            rows.len(),
            mean,
            worst,
            path.display()
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with the full training configuration (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Video-query style: per-region masks or one pooled mask.
    #[arg(long, value_enum)]
    mil: Option<MilArg>,
    /// Weight of the trimodal attention-consistency objective.
    #[arg(long)]
    lambda_tri: Option<f64>,
    /// Weight of the audio-language contrastive objective.
    #[arg(long)]
    lambda_al: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total optimization steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Linear warmup steps before the cosine decay.
    #[arg(long)]
    warmup: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Resume even if the checkpoint was written under a different config.
    #[arg(long, default_value_t = false)]
    force_resume: bool,
}

impl TrainArgs {
    fn resolved_config(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(p) => read_json_config(p)?,
            None => TrainConfig::default(),
        };
        cfg.dataset = Some(self.data.clone());
        if let Some(m) = self.mil {
            cfg.mil = m.into();
        }
        if let Some(v) = self.lambda_tri {
            cfg.weights.lambda_tri = v;
        }
        if let Some(v) = self.lambda_al {
            cfg.weights.lambda_al = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.steps {
            cfg.total_steps = n;
        }
        if let Some(n) = self.warmup {
            cfg.warmup_steps = n;
        }
        Ok(cfg)
    }

    fn run(&self) -> Result<()> {
        let cfg = self.resolved_config()?;
        let dataset = Dataset::load(&self.data)?;
        write_manifest(
            &self.out,
            json!({
                "command": "train", "config": &cfg, "config_hash": cfg.hash(),
                "resume": self.resume, "force_resume": self.force_resume,
            }),
        )?;
        let outcome =
            trainer::train(&dataset, &cfg, &self.out, self.resume.as_deref(), self.force_resume)?;
        let last = &outcome.checkpoint.summary;
        println!(
            "trained to step {}: total loss {:.6e} (mask {:.6e}, tri {:.6e}, al {:.6e}) -> {}",
            last.step,
            last.total,
            last.l_mask,
            last.l_tri,
            last.l_al,
            outcome.checkpoint_path.display()
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// separate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SeparateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory holding the example.
    #[arg(long)]
    data: PathBuf,
    /// Manifest id of the example whose mixture is separated.
    #[arg(long)]
    example: String,
    /// AL separates with a text query; AV with the example's own video.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Text query, `concept:<k>` (required in AL mode).
    #[arg(long)]
    query: Option<String>,
    /// Video-query style in AV mode.
    #[arg(long, value_enum, default_value_t = MilArg::Region)]
    mil: MilArg,
    /// Training configuration the checkpoint was produced with, if not default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

impl SeparateArgs {
    fn run(&self) -> Result<()> {
        let dataset = Dataset::load(&self.data)?;
        let sep_cfg = sep_config_from(&self.config)?;
        let ckpt = load_checkpoint(&self.ckpt)?;
        let model = model_from_checkpoint(&ckpt, sep_cfg)?;
        let rec = find_record(&dataset, &self.example)?;
        let mixture = dataset.waveform(rec)?;
        let params = StftParams::compact();
        let space = dataset.space();
        write_manifest(
            &self.out,
            json!({
                "command": "separate", "ckpt": self.ckpt, "data": self.data,
                "example": self.example, "mode": format!("{:?}", self.mode),
                "query": self.query, "mil": format!("{:?}", self.mil),
                "sep_config": &sep_cfg,
            }),
        )?;

        // AL mode must stay audio+text only: the video grid is never read.
        let (wave, pred, frames) = match self.mode {
            ModeArg::Al => {
                let q = self
                    .query
                    .as_deref()
                    .ok_or("AL mode needs --query \"concept:<k>\"")?;
                let k = parse_concept_query(q)?;
                if k >= space.n_concepts() {
                    return Err(
                        format!("concept {k} out of range (have {})", space.n_concepts()).into()
                    );
                }
                let caption = space.encode_text(space.token(k), 1)?;
                let (wave, pred) =
                    separate(&model, space, params, &mixture, Query::Caption(&caption), false)?;
                (wave, pred, None)
            }
            ModeArg::Av => {
                let grid = dataset.grid(rec)?;
                let query = match MilMode::from(self.mil) {
                    MilMode::Region => Query::VideoMil(&grid),
                    MilMode::Video => Query::VideoPooled(&grid),
                };
                let (wave, pred) = separate(&model, space, params, &mixture, query, false)?;
                let regions = space.encode_regions(&grid)?;
                (wave, pred, Some(regions))
            }
        };

        let wav_path = self.out.join("separated.wav");
        dsp::write_wav(&wav_path, &wave)?;
        let mask_path = self.out.join("mask.pgm");
        dsp::write_pgm(&mask_path, &pred.mask.values)?;
        let mut written = vec![wav_path.display().to_string(), mask_path.display().to_string()];
        if let Some(regions) = frames {
            for path in write_attention_maps(&self.out, &regions, &pred.embedding)? {
                written.push(path.display().to_string());
            }
        }
        println!("wrote {}", written.join(", "));
        Ok(())
    }
}

fn sep_config_from(config: &Option<PathBuf>) -> Result<SepConfig> {
    Ok(match config {
        Some(p) => read_json_config::<TrainConfig>(p)?.sep,
        None => SepConfig::default(),
    })
}

/// One spatial attention heatmap per frame: how strongly each region of the
/// query video agrees with the predicted audio embedding.
fn write_attention_maps(
    out: &Path,
    regions: &EmbeddingGrid,
    audio_embedding: &[f64],
) -> Result<Vec<PathBuf>> {
    let mode = LossWeights::default().attn_mode();
    let mut paths = Vec::new();
    for t in 0..regions.t {
        let attn =
            foundation::attn_distribution(regions.frame(t), regions.d, audio_embedding, mode)?;
        // The PGM writer flips rows for spectrogram display; pre-flip so the
        // spatial map lands upright.
        let mut rows: Vec<f64> = Vec::with_capacity(attn.len());
        for r in (0..regions.h).rev() {
            rows.extend_from_slice(&attn[r * regions.w..(r + 1) * regions.w]);
        }
        let grid = Grid::new(regions.h, regions.w, rows)?;
        let path = out.join(format!("attention-{t:02}.pgm"));
        dsp::write_pgm(&path, &grid)?;
        paths.push(path);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory whose test split is scored.
    #[arg(long)]
    data: PathBuf,
    /// AL scores language-queried rows; AV visually-queried rows.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Restrict AL rows to one concept, `concept:<k>`.
    #[arg(long)]
    query: Option<String>,
    /// Video-query style in AV mode.
    #[arg(long, value_enum, default_value_t = MilArg::Region)]
    mil: MilArg,
    /// Distortion-filter taps for the BSS projections.
    #[arg(long, default_value_t = metrics::TOY_FILTER_TAPS)]
    taps: usize,
    /// Training configuration the checkpoint was produced with, if not default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

impl EvalArgs {
    fn run(&self) -> Result<()> {
        let dataset = Dataset::load(&self.data)?;
        let sep_cfg = sep_config_from(&self.config)?;
        let ckpt = load_checkpoint(&self.ckpt)?;
        let model = model_from_checkpoint(&ckpt, sep_cfg)?;
        let params = StftParams::compact();
        write_manifest(
            &self.out,
            json!({
                "command": "eval", "ckpt": self.ckpt, "data": self.data,
                "mode": format!("{:?}", self.mode), "query": self.query,
                "mil": format!("{:?}", self.mil), "taps": self.taps,
                "sep_config": &sep_cfg,
            }),
        )?;
        let rows = match self.mode {
            ModeArg::Al => {
                let concept = match &self.query {
                    Some(q) => Some(parse_concept_query(q)?),
                    None => None,
                };
                evalrun::eval_language(&model, &dataset, &params, self.taps, concept)?
            }
            ModeArg::Av => evalrun::eval_audiovisual(
                &model,
                &dataset,
                &params,
                self.mil.into(),
                self.taps,
            )?,
        };
        let path = self.out.join("metrics.csv");
        metrics::write_report(&path, &rows)?;
        println!(
            "scored {} rows: mean nsdr_db {:.4} -> {}",
            rows.len(),
            evalrun::mean_nsdr(&rows)?,
            path.display()
        );
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Optional directory for the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl GradcheckArgs {
    fn run(&self) -> Result<()> {
        if let Some(out) = &self.out {
            write_manifest(out, json!({"command": "gradcheck", "seed": self.seed}))?;
        }
        let mut failed = false;
        let ops = op_gradcheck_suite(self.seed)?;
        let worst_op = ops
            .iter()
            .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
            .ok_or("empty op suite")?;
        println!(
            "tensor-ops: max relative error {:.3e} ({}, {} checks)",
            worst_op.1.max_rel_err,
            worst_op.0,
            ops.len()
        );
        failed |= worst_op.1.max_rel_err > GRADCHECK_TOL;
        for (name, errs) in objective_gradient_errors(self.seed)? {
            let worst = errs.iter().copied().fold(0.0_f64, f64::max);
            println!("{name}: max relative error {worst:.3e} over {} instances", errs.len());
            failed |= worst > GRADCHECK_TOL;
        }
        if failed {
            return Err(format!("a gradient check exceeded {GRADCHECK_TOL:.0e}").into());
        }
        println!("all objectives within {GRADCHECK_TOL:.0e}");
        Ok(())
    }
}

fn loss_to_tensor_err(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => panic!("objective construction failed: {other}"),
    }
}

/// Max finite-difference relative error for each objective on three seeded
/// micro-instances.
fn objective_gradient_errors(seed: u64) -> Result<Vec<(&'static str, Vec<f64>)>> {
    let mut out: Vec<(&'static str, Vec<f64>)> = Vec::new();
    let instances = |base: u64| [base, base ^ 0xa5a5, base ^ 0x3c3c];

    let mut mask_errs = Vec::new();
    for s in instances(seed) {
        let mut rng = util::rng_from_seed(s);
        let point = vec![
            ("m1hat".to_string(), rand_array(&mut rng, vec![1, 3, 4])),
            ("m2hat".to_string(), rand_array(&mut rng, vec![1, 3, 4])),
        ];
        let t1 = rand_array(&mut rng, vec![1, 3, 4]);
        let t2 = rand_array(&mut rng, vec![1, 3, 4]);
        let report = grad_check(&point, GRADCHECK_STEP, 12, |g, ids| {
            let m1 = g.constant(t1.clone())?;
            let m2 = g.constant(t2.clone())?;
            mask_loss(g, ids["m1hat"], ids["m2hat"], m1, m2).map_err(loss_to_tensor_err)
        })?;
        mask_errs.push(report.max_rel_err);
    }
    out.push(("mask", mask_errs));

    let d = 6;
    let mut al_errs = Vec::new();
    for s in instances(seed ^ 0x11) {
        let mut rng = util::rng_from_seed(s);
        let mut vocab = CaptionVocabulary::new(d);
        for i in 0..4 {
            vocab.push(&format!("cap-{i}"), &util::gaussian_vec(&mut rng, d, 1.0))?;
        }
        let point = vec![("audio".to_string(), rand_array(&mut rng, vec![d]))];
        let report = grad_check(&point, GRADCHECK_STEP, 12, |g, ids| {
            audio_language_loss(g, ids["audio"], "cap-1", &vocab, 0.07)
                .map_err(loss_to_tensor_err)
        })?;
        al_errs.push(report.max_rel_err);
    }
    out.push(("audio-language", al_errs));

    let mut tri_errs = Vec::new();
    for s in instances(seed ^ 0x22) {
        let mut rng = util::rng_from_seed(s);
        let (t, h, w) = (2, 2, 2);
        let grid = EmbeddingGrid {
            t,
            h,
            w,
            d,
            values: util::gaussian_vec(&mut rng, t * h * w * d, 1.0),
            modality: Modality::VisualRegion,
        };
        let caption = util::gaussian_vec(&mut rng, d, 1.0);
        let point = vec![("audio".to_string(), rand_array(&mut rng, vec![d]))];
        let report = grad_check(&point, GRADCHECK_STEP, 12, |g, ids| {
            trimodal_loss(g, &grid, &caption, ids["audio"], AttnMode::Softmax { tau: 0.07 })
                .map_err(loss_to_tensor_err)
        })?;
        tri_errs.push(report.max_rel_err);
    }
    out.push(("trimodal", tri_errs));
    Ok(out)
}

fn rand_array(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>) -> Array {
    let n = shape.iter().product();
    Array::new(shape, util::uniform_vec(rng, n, 0.05, 0.95)).expect("shape matches data")
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output root; each variant trains into its own subdirectory.
    #[arg(long)]
    out: PathBuf,
    /// Base training configuration (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total optimization steps per variant.
    #[arg(long)]
    steps: Option<u64>,
    /// Linear warmup steps before the cosine decay.
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Distortion-filter taps for the BSS projections.
    #[arg(long, default_value_t = metrics::TOY_FILTER_TAPS)]
    taps: usize,
}

/// One trained variant of the ablation grid.
struct Variant {
    name: &'static str,
    lambda_al: f64,
    lambda_tri: f64,
    mil: MilMode,
}

struct VariantScore {
    name: &'static str,
    al_nsdr: f64,
    av_nsdr: f64,
    duet_av_nsdr: f64,
}

impl AblateArgs {
    fn run(&self) -> Result<()> {
        let mut base: TrainConfig = match &self.config {
            Some(p) => read_json_config(p)?,
            None => TrainConfig::default(),
        };
        base.dataset = Some(self.data.clone());
        if let Some(n) = self.steps {
            base.total_steps = n;
        }
        if let Some(n) = self.warmup {
            base.warmup_steps = n;
        }
        if let Some(s) = self.seed {
            base.seed = s;
        }
        let full = LossWeights::default();
        let variants = [
            Variant {
                name: "full",
                lambda_al: full.lambda_al,
                lambda_tri: full.lambda_tri,
                mil: MilMode::Region,
            },
            Variant { name: "none", lambda_al: 0.0, lambda_tri: 0.0, mil: MilMode::Region },
            Variant {
                name: "al-only",
                lambda_al: full.lambda_al,
                lambda_tri: 0.0,
                mil: MilMode::Region,
            },
            Variant {
                name: "tri-only",
                lambda_al: 0.0,
                lambda_tri: full.lambda_tri,
                mil: MilMode::Region,
            },
            Variant {
                name: "pooled",
                lambda_al: full.lambda_al,
                lambda_tri: full.lambda_tri,
                mil: MilMode::Video,
            },
        ];
        let configs: Vec<(&'static str, TrainConfig)> = variants
            .iter()
            .map(|v| {
                let mut cfg = base.clone();
                cfg.weights.lambda_al = v.lambda_al;
                cfg.weights.lambda_tri = v.lambda_tri;
                cfg.mil = v.mil;
                (v.name, cfg)
            })
            .collect();
        write_manifest(
            &self.out,
            json!({
                "command": "ablate", "data": self.data, "taps": self.taps,
                "variants": configs
                    .iter()
                    .map(|(name, cfg)| json!({"name": name, "config": cfg}))
                    .collect::<Vec<_>>(),
            }),
        )?;

        let dataset = Dataset::load(&self.data)?;
        let workers = worker_cap()
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .min(configs.len());
        let next = AtomicUsize::new(0);
        let scores: Mutex<Vec<VariantScore>> = Mutex::new(Vec::new());
        let taps = self.taps;
        let out_root = self.out.clone();
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for _ in 0..workers {
                let next = &next;
                let scores = &scores;
                let configs = &configs;
                let dataset = &dataset;
                let out_root = &out_root;
                handles.push(scope.spawn(move || -> Result<()> {
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some((name, cfg)) = configs.get(i) else {
                            return Ok(());
                        };
                        let run_dir = out_root.join(name);
                        write_manifest(
                            &run_dir,
                            json!({"command": "ablate/train", "name": name, "config": cfg,
                                   "config_hash": cfg.hash()}),
                        )?;
                        let outcome = trainer::train(dataset, cfg, &run_dir, None, false)?;
                        let score =
                            score_variant(name, &outcome.checkpoint_path, cfg, dataset, taps)?;
                        scores.lock().expect("score sink poisoned").push(score);
                    }
                }));
            }
            for h in handles {
                h.join().expect("ablation worker panicked")?;
            }
            Ok(())
        })?;

        let mut scores = scores.into_inner().expect("score sink poisoned");
        let order: BTreeMap<&str, usize> =
            variants.iter().enumerate().map(|(i, v)| (v.name, i)).collect();
        scores.sort_by_key(|s| order[s.name]);

        let csv_path = self.out.join("ablation.csv");
        let mut csv = String::from("run,al_nsdr_db,av_nsdr_db,duet_av_nsdr_db\n");
        println!("run        al_nsdr_db  av_nsdr_db  duet_av_nsdr_db");
        for s in &scores {
            csv.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                s.name, s.al_nsdr, s.av_nsdr, s.duet_av_nsdr
            ));
            println!(
                "{:<10} {:>10.4} {:>11.4} {:>15.4}",
                s.name, s.al_nsdr, s.av_nsdr, s.duet_av_nsdr
            );
        }
        fs::write(&csv_path, csv).map_err(|e| format!("{}: {e}", csv_path.display()))?;
        println!("wrote {}", csv_path.display());
        Ok(())
    }
}

fn score_variant(
    name: &'static str,
    ckpt_path: &Path,
    cfg: &TrainConfig,
    dataset: &Dataset,
    taps: usize,
) -> Result<VariantScore> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = model_from_checkpoint(&ckpt, cfg.sep)?;
    let params = StftParams::compact();
    let al_rows = evalrun::eval_language(&model, dataset, &params, taps, None)?;
    let av_rows = evalrun::eval_audiovisual(&model, dataset, &params, cfg.mil, taps)?;
    let sentinel = evalrun::composite_target(dataset.space());
    let duet_rows: Vec<ReportRow> =
        av_rows.iter().filter(|r| r.target_concept == sentinel).cloned().collect();
    Ok(VariantScore {
        name,
        al_nsdr: evalrun::mean_nsdr(&al_rows)?,
        av_nsdr: evalrun::mean_nsdr(&av_rows)?,
        duet_av_nsdr: evalrun::mean_nsdr(&duet_rows)?,
    })
}
