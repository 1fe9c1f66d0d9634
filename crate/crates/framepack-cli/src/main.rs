//! `framepack` command-line tool.
//!
//! Machine-readable results (JSON) go to stdout; diagnostics go to stderr.
//! Exit codes are fixed for scripting: 0 success, 2 infeasible budget or
//! sequence overflow, 64 usage, 65 malformed data, 66 file IO, 69 judge
//! endpoint unreachable for every item. `gradcheck` alone exits 1 when the
//! gradient error exceeds its threshold, so failure thresholds and transport
//! problems stay distinguishable.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use framepack::assembler::{
    assemble, manifest_json, sample_instruction, sequence_manifest, AssembleError, InstructionSet,
};
use framepack::budget::{plan_budget, preset_plan, sample_frame_indices, BudgetError, ModelPreset};
use framepack::eval::{
    compute_report, judge_items, load_qa_dataset, parse_judge_response, score_mcq, DatasetError,
    HttpJudge, ItemFailure, JudgeClient, ScriptedJudge, Verdict,
};
use framepack::gradcheck::SquaredError;
use framepack::lora::{gradient_check_lora, lora_forward, merge_lora, ToyAttention};
use framepack::subtitles::{
    align_cues_to_frames, enforce_subtitle_budget, parse_srt, parse_vtt, FrameSubtitles,
};
use framepack::tokenizer::Vocab;
use framepack::vision::{
    frame_to_llm_tokens, gradient_check_projector, read_frame_binary, read_frame_rgb,
    synthetic_projection_pairs, Projector, VisionError, VisualTokens, D_LLM_DEFAULT,
    D_VIS_DEFAULT,
};

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;
const EXIT_IO: u8 = 66;
const EXIT_JUDGE_UNREACHABLE: u8 = 69;

/// Failure route: a message for stderr plus the exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

type CmdResult = Result<(), Failure>;

fn io_failure(context: &str, error: std::io::Error) -> Failure {
    Failure::new(EXIT_IO, format!("{context}: {error}"))
}

#[derive(Parser)]
#[command(
    name = "framepack",
    version,
    about = "Pack video frames and subtitles into an LLM input sequence"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Llama2,
    Mistral,
}

impl From<PresetArg> for ModelPreset {
    fn from(value: PresetArg) -> Self {
        match value {
            PresetArg::Llama2 => ModelPreset::Llama2,
            PresetArg::Mistral => ModelPreset::Mistral,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SubtitleFormat {
    Srt,
    Vtt,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a frame/token budget for a context window
    PlanBudget(PlanBudgetArgs),
    /// Pick evenly spaced frame indices from a longer video
    SampleFrames(SampleFramesArgs),
    /// Parse a subtitle file into a JSON cue list
    ParseSubs(ParseSubsArgs),
    /// Assemble frames and subtitles into a sequence manifest
    Pack(PackArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Print adapter parameter census and merge residual at the preset rank
    LoraDemo(LoraDemoArgs),
    /// Parse one judge response into a verdict and score
    JudgeParse(JudgeParseArgs),
    /// Run the judge evaluation over a QA dataset
    Eval(EvalArgs),
}

#[derive(Args)]
struct PlanBudgetArgs {
    /// Start from a model preset; explicit fields below override it
    #[arg(long)]
    preset: Option<PresetArg>,
    /// Context window size in tokens
    #[arg(long)]
    context: Option<usize>,
    /// Visual tokens consumed per frame
    #[arg(long)]
    tpf: Option<usize>,
    /// Token budget reserved for subtitle text
    #[arg(long)]
    sub: Option<usize>,
    /// Token positions reserved for the model's answer
    #[arg(long)]
    out: Option<usize>,
}

#[derive(Args)]
struct SampleFramesArgs {
    /// Total frames in the source video
    #[arg(long)]
    total: usize,
    /// Maximum frames to keep
    #[arg(long)]
    max: usize,
    /// Attach timestamps assuming this source frame rate
    #[arg(long)]
    fps: Option<f64>,
}

#[derive(Args)]
struct ParseSubsArgs {
    #[arg(long, value_enum)]
    format: SubtitleFormat,
    file: PathBuf,
}

#[derive(Args)]
struct PackArgs {
    /// Directory of frame files (*.rgb raw bytes or *.frame binary), packed
    /// in filename order
    #[arg(long)]
    frames_dir: PathBuf,
    /// Subtitle file (.srt or .vtt)
    #[arg(long)]
    subs: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: PresetArg,
    /// Instruction text; omitted means one is sampled with --seed
    #[arg(long)]
    instruction: Option<String>,
    /// Seed for instruction sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frame rate the files were extracted at (sets timestamps)
    #[arg(long, default_value_t = 1.0)]
    fps: f64,
    #[arg(long, default_value_t = 7)]
    encoder_seed: u64,
    #[arg(long, default_value_t = 9)]
    projector_seed: u64,
    /// Visual embedding width before condensation
    #[arg(long, default_value_t = D_VIS_DEFAULT)]
    d_vis: usize,
    /// Language-model embedding width after projection
    #[arg(long, default_value_t = D_LLM_DEFAULT)]
    d_llm: usize,
    /// Also write the manifest JSON here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write projected embeddings as a raw binary sidecar
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random seeds to sweep
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Maximum acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
}

#[derive(Args)]
struct LoraDemoArgs {
    /// Width of the adapted attention layer
    #[arg(long, default_value_t = 8)]
    d_model: usize,
    /// Random inputs to probe merge equivalence with
    #[arg(long, default_value_t = 16)]
    inputs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct JudgeParseArgs {
    /// Judge response text; omitted means read stdin
    text: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `stub:<script.json>` or `http` (uses JUDGE_* environment variables)
    #[arg(long)]
    judge: Option<String>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Also write the report JSON here
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    // Rust ignores SIGPIPE by default, turning `framepack ... | head` into a
    // panic when stdout closes early. Restore the default disposition so the
    // process dies quietly like any other pipeline filter.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(error) => {
            let code = match error.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            // Help and version belong on stdout; real usage errors on stderr.
            let _ = error.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::PlanBudget(args) => cmd_plan_budget(args),
        Command::SampleFrames(args) => cmd_sample_frames(args),
        Command::ParseSubs(args) => cmd_parse_subs(args),
        Command::Pack(args) => cmd_pack(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::LoraDemo(args) => cmd_lora_demo(args),
        Command::JudgeParse(args) => cmd_judge_parse(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("framepack: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn cmd_plan_budget(args: PlanBudgetArgs) -> CmdResult {
    let overridden =
        args.context.is_some() || args.tpf.is_some() || args.sub.is_some() || args.out.is_some();
    let plan = match (args.preset, overridden) {
        (Some(preset), false) => preset_plan(preset.into()),
        (preset, _) => {
            // Any explicit field drops the preset's pinned frame count and
            // recomputes from the formula.
            let base = preset.map(|p| preset_plan(p.into()));
            let pick = |explicit: Option<usize>, from_preset: Option<usize>, name: &str| {
                explicit.or(from_preset).ok_or_else(|| {
                    Failure::new(
                        EXIT_USAGE,
                        format!("--{name} is required unless --preset supplies it"),
                    )
                })
            };
            let context = pick(args.context, base.as_ref().map(|b| b.context_window), "context")?;
            let tpf = pick(args.tpf, base.as_ref().map(|b| b.tokens_per_frame), "tpf")?;
            let sub = pick(args.sub, base.as_ref().map(|b| b.subtitle_budget), "sub")?;
            let out = pick(args.out, base.as_ref().map(|b| b.output_reserve), "out")?;
            plan_budget(context, tpf, sub, out).map_err(|error| match error {
                BudgetError::Infeasible { .. } => Failure::new(EXIT_INFEASIBLE, error.to_string()),
                _ => Failure::new(EXIT_USAGE, error.to_string()),
            })?
        }
    };
    print_json(&plan);
    Ok(())
}

fn cmd_sample_frames(args: SampleFramesArgs) -> CmdResult {
    let plan = sample_frame_indices(args.total, args.max);
    let plan = match args.fps {
        Some(fps) if fps > 0.0 => plan.with_timestamps_at_fps(fps),
        Some(fps) => return Err(Failure::new(EXIT_USAGE, format!("--fps must be positive, got {fps}"))),
        None => plan,
    };
    print_json(&plan);
    Ok(())
}

fn cmd_parse_subs(args: ParseSubsArgs) -> CmdResult {
    let text = std::fs::read_to_string(&args.file)
        .map_err(|e| io_failure(&args.file.display().to_string(), e))?;
    let cues = match args.format {
        SubtitleFormat::Srt => parse_srt(&text),
        SubtitleFormat::Vtt => parse_vtt(&text),
    }
    .map_err(|error| Failure::new(EXIT_DATA, error.to_string()))?;
    print_json(&cues);
    Ok(())
}

/// Frame files the packer accepts, in filename order.
fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_failure(&dir.display().to_string(), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_failure(&dir.display().to_string(), e))?;
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if path.is_file() && matches!(ext, "rgb" | "frame" | "bin") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Failure::new(
            EXIT_DATA,
            format!("no frame files (*.rgb, *.frame, *.bin) in {}", dir.display()),
        ));
    }
    Ok(files)
}

fn vision_failure(path: &Path, error: VisionError) -> Failure {
    let message = format!("{}: {error}", path.display());
    match error {
        VisionError::Io(_) => Failure::new(EXIT_IO, message),
        _ => Failure::new(EXIT_DATA, message),
    }
}

fn cmd_pack(args: PackArgs) -> CmdResult {
    if args.fps <= 0.0 {
        return Err(Failure::new(EXIT_USAGE, format!("--fps must be positive, got {}", args.fps)));
    }
    let files = list_frame_files(&args.frames_dir)?;
    let mut frames = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let is_rgb = path.extension().and_then(|e| e.to_str()) == Some("rgb");
        let mut frame = if is_rgb { read_frame_rgb(path) } else { read_frame_binary(path) }
            .map_err(|e| vision_failure(path, e))?;
        // Files carry no clock; assume sequential extraction at --fps.
        frame.timestamp_ms = ((i as f64) * 1000.0 / args.fps).round() as u64;
        frames.push(frame);
    }

    let budget = preset_plan(args.preset.into());
    let vocab = Vocab::new();

    let timestamps: Vec<u64> = frames.iter().map(|f| f.timestamp_ms).collect();
    let subtitles = match &args.subs {
        None => FrameSubtitles { per_frame: vec![String::new(); frames.len()] },
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| io_failure(&path.display().to_string(), e))?;
            let cues = match path.extension().and_then(|e| e.to_str()) {
                Some("srt") => parse_srt(&text),
                Some("vtt") => parse_vtt(&text),
                _ => {
                    return Err(Failure::new(
                        EXIT_USAGE,
                        format!("{}: subtitle format must be .srt or .vtt", path.display()),
                    ))
                }
            }
            .map_err(|error| Failure::new(EXIT_DATA, format!("{}: {error}", path.display())))?;
            let aligned = align_cues_to_frames(&cues, &timestamps);
            enforce_subtitle_budget(&aligned, &vocab, budget.subtitle_budget)
        }
    };

    let instruction_set;
    let instruction = match &args.instruction {
        Some(text) => text.as_str(),
        None => {
            instruction_set = InstructionSet::default_set(args.seed);
            sample_instruction(&instruction_set, 0)
        }
    };

    let projector = Projector::seeded(4 * args.d_vis, args.d_llm, args.projector_seed);
    let tokens: Vec<VisualTokens> = frames
        .iter()
        .map(|frame| frame_to_llm_tokens(frame, args.encoder_seed, args.d_vis, &projector))
        .collect::<Result<_, _>>()
        .map_err(|error| Failure::new(EXIT_DATA, error.to_string()))?;

    let sequence = assemble(&tokens, &subtitles, instruction, &budget).map_err(|error| {
        let code = match error {
            AssembleError::TooManyFrames { .. }
            | AssembleError::BudgetExceeded { .. }
            | AssembleError::TrailingOverflow { .. } => EXIT_INFEASIBLE,
            _ => EXIT_DATA,
        };
        Failure::new(code, error.to_string())
    })?;

    let manifest = sequence_manifest(&sequence);
    let json = manifest_json(&manifest);
    print!("{json}");
    if let Some(path) = &args.out {
        std::fs::write(path, &json).map_err(|e| io_failure(&path.display().to_string(), e))?;
    }
    if let Some(path) = &args.embeddings {
        write_embedding_sidecar(path, &tokens)
            .map_err(|e| io_failure(&path.display().to_string(), e))?;
    }
    Ok(())
}

/// Sidecar layout: three little-endian u32s (frames, rows, cols), then each
/// frame's embedding matrix as row-major little-endian f64.
fn write_embedding_sidecar(path: &Path, tokens: &[VisualTokens]) -> std::io::Result<()> {
    let rows = tokens.first().map_or(0, |t| t.tokens.nrows());
    let cols = tokens.first().map_or(0, |t| t.tokens.ncols());
    let mut bytes =
        Vec::with_capacity(12 + tokens.len() * rows * cols * std::mem::size_of::<f64>());
    bytes.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for t in tokens {
        for row in t.tokens.rows() {
            for &value in row {
                bytes.extend_from_slice(&value.to_le_bytes());
            }
        }
    }
    std::fs::write(path, bytes)
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() - 0.5)
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    let mut projector_max: f64 = 0.0;
    let mut lora_max: f64 = 0.0;
    for seed in 0..args.seeds {
        // Projector: random input against a squared-error pull toward the
        // output of a hidden map, so every gradient entry is nonzero.
        let pairs = synthetic_projection_pairs(1, 8, 12, 5, seed, 1.0);
        let (x, target) = pairs[0].clone();
        let projector = Projector::seeded(12, 5, seed.wrapping_add(1000));
        let error =
            gradient_check_projector(&projector, &x, &SquaredError { target }, args.eps);
        projector_max = projector_max.max(error);

        // Adapters: nonzero B so both low-rank factors carry gradient.
        let mut attention = ToyAttention::seeded(4, 2, 16.0, seed);
        attention.adapter_q.b = random_matrix(4, 2, seed.wrapping_add(2000)) * 0.1;
        attention.adapter_v.b = random_matrix(4, 2, seed.wrapping_add(3000)) * 0.1;
        let x = random_matrix(3, 4, seed.wrapping_add(4000));
        let target = random_matrix(3, 4, seed.wrapping_add(5000));
        let report = gradient_check_lora(&attention, &x, &SquaredError { target }, args.eps)
            .expect("toy dimensions are consistent");
        lora_max = lora_max.max(report.max_adapter_grad_error);
    }
    let pass = projector_max < args.threshold && lora_max < args.threshold;
    print_json(&serde_json::json!({
        "seeds": args.seeds,
        "eps": args.eps,
        "threshold": args.threshold,
        "projector_max_error": projector_max,
        "lora_max_error": lora_max,
        "pass": pass,
    }));
    if pass {
        Ok(())
    } else {
        Err(Failure::new(1, "gradient error above threshold".to_string()))
    }
}

fn cmd_lora_demo(args: LoraDemoArgs) -> CmdResult {
    // One attention layer adapted on its query and value projections; the
    // census counts both adapters, and nothing else is trainable.
    let mut attention = ToyAttention::seeded(args.d_model, 64, 16.0, args.seed);
    // Zero B makes merge equivalence trivial; give it real values to probe.
    attention.adapter_q.b = random_matrix(args.d_model, 64, args.seed.wrapping_add(1)) * 0.05;
    let adapter = &attention.adapter_q;
    let merged = merge_lora(adapter, &attention.w_q).expect("shapes agree by construction");

    let mut residual: f64 = 0.0;
    for i in 0..args.inputs {
        let x = random_matrix(3, args.d_model, args.seed.wrapping_add(10 + i as u64));
        let via_adapter = lora_forward(adapter, &attention.w_q, &x).expect("shapes agree");
        // x . merged^T by hand; the residual against the adapter route is
        // the quantity under test.
        let mut via_merged = Array2::<f64>::zeros((x.nrows(), args.d_model));
        for row in 0..x.nrows() {
            for o in 0..args.d_model {
                let mut total = 0.0;
                for k in 0..args.d_model {
                    total += x[[row, k]] * merged[[o, k]];
                }
                via_merged[[row, o]] = total;
            }
        }
        for (a, b) in via_adapter.iter().zip(via_merged.iter()) {
            residual = residual.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    print_json(&serde_json::json!({
        "r": adapter.r,
        "alpha": adapter.alpha,
        "scaling": adapter.scaling(),
        "d_model": args.d_model,
        "trainable_params": attention.trainable_params(),
        "inputs": args.inputs,
        "merge_residual": residual,
    }));
    Ok(())
}

fn cmd_judge_parse(args: JudgeParseArgs) -> CmdResult {
    let text = match args.text {
        Some(text) => text,
        None => {
            let mut buffer = String::new();
            std::io::Read::read_to_string(&mut std::io::stdin(), &mut buffer)
                .map_err(|e| io_failure("stdin", e))?;
            buffer
        }
    };
    let judgement =
        parse_judge_response(&text).map_err(|error| Failure::new(EXIT_DATA, error.to_string()))?;
    print_json(&serde_json::json!({
        "pred": match judgement.pred { Verdict::Yes => "yes", Verdict::No => "no" },
        "score": judgement.score,
    }));
    Ok(())
}

fn dataset_failure(error: DatasetError) -> Failure {
    match error {
        DatasetError::Io(e) => Failure::new(EXIT_IO, e.to_string()),
        other => Failure::new(EXIT_DATA, other.to_string()),
    }
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    if args.parallelism == 0 {
        return Err(Failure::new(EXIT_USAGE, "--parallelism must be at least 1"));
    }
    let items = load_qa_dataset(&args.dataset).map_err(dataset_failure)?;
    let mcq_count = items.iter().filter(|i| i.is_mcq()).count();
    if mcq_count != 0 && mcq_count != items.len() {
        return Err(Failure::new(
            EXIT_DATA,
            format!(
                "dataset mixes {mcq_count} multiple-choice and {} open-ended items; split it",
                items.len() - mcq_count
            ),
        ));
    }

    let (report, all_transport) = if mcq_count == items.len() && !items.is_empty() {
        let report = score_mcq(&items).expect("homogeneity checked above");
        (report, false)
    } else {
        let judge_arg = args.judge.as_deref().ok_or_else(|| {
            Failure::new(EXIT_USAGE, "--judge is required for open-ended datasets")
        })?;
        let judge: Box<dyn JudgeClient> = if let Some(script) = judge_arg.strip_prefix("stub:") {
            Box::new(ScriptedJudge::from_script_file(Path::new(script)).map_err(dataset_failure)?)
        } else if judge_arg == "http" {
            Box::new(HttpJudge::from_env().map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?)
        } else {
            return Err(Failure::new(
                EXIT_USAGE,
                format!("--judge must be `stub:<script.json>` or `http`, got `{judge_arg}`"),
            ));
        };
        let results = judge_items(&items, judge.as_ref(), args.parallelism);
        let all_transport = !results.is_empty()
            && results
                .iter()
                .all(|r| matches!(r.outcome, Err(ItemFailure::Transport(_))));
        (compute_report(&results), all_transport)
    };

    print_json(&report);
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
        std::fs::write(path, json).map_err(|e| io_failure(&path.display().to_string(), e))?;
    }
    if all_transport {
        return Err(Failure::new(
            EXIT_JUDGE_UNREACHABLE,
            "judge endpoint unreachable for every item",
        ));
    }
    Ok(())
}
