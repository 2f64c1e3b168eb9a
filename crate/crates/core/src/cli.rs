//! `domlens` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 I/O error.

use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::chair::{self, ObjectLexicon};
use crate::error::{Error, Result};
use crate::gate::{self, default_stages, StageSpec};
use crate::lens::{LensMode, Normalizer, Vocab};
use crate::model::{
    generate, new_model, GenerateOptions, ModelConfig, ModelSpec, Prompt, ToyModel,
};
use crate::report;
use crate::sad;
use crate::trace::{self, DecodeTrace, Grid, TokenId};
use crate::vdc::{self, SourceSet, VdcConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "domlens",
    version,
    about = "Layer-wise logit-lens analysis and dominance-validated decoding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create toy decoder models.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Generate or validate decode traces.
    #[command(subcommand)]
    Trace(TraceCmd),
    /// Attention-stage and dominance analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Offline correction of a recorded trace.
    Correct(CorrectArgs),
    /// Online greedy decoding with correction.
    DecodeVdc(DecodeVdcArgs),
    /// Caption metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Write CSV/JSON exports for a trace.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
enum ModelCmd {
    New(ModelNewArgs),
}

#[derive(Debug, Args)]
struct ModelNewArgs {
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    ffn: usize,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 128)]
    max_context: usize,
    #[arg(long, default_value_t = 4)]
    grid_h: usize,
    #[arg(long, default_value_t = 4)]
    grid_w: usize,
    #[arg(long)]
    tie_embeddings: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum TraceCmd {
    Generate(GenerateArgs),
    Validate(TraceInput),
}

#[derive(Debug, Args)]
struct TraceInput {
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Debug, Args)]
struct ModelInput {
    /// Model file written by `model new`.
    #[arg(long)]
    model: PathBuf,
    /// JSON array of token surfaces; defaults to the built-in synthetic vocabulary.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Comma-separated normalization markers (default: "▁", "Ġ", " ").
    #[arg(long, value_delimiter = ',')]
    markers: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct PromptArgs {
    /// Comma-separated prompt token ids laid out as [system | vision | instruction].
    #[arg(long, value_delimiter = ',')]
    prompt: Option<Vec<TokenId>>,
    #[arg(long, default_value_t = 2)]
    system_len: usize,
    /// Instruction length of the synthetic prompt (ignored with --prompt).
    #[arg(long, default_value_t = 4)]
    instruction_len: usize,
    /// Seed of the synthetic prompt.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    #[arg(long)]
    end_token: Option<TokenId>,
    #[arg(long, value_enum, default_value_t = LensArg::FinalNorm)]
    lens: LensArg,
    /// Do not record visual grids and instruction attention.
    #[arg(long)]
    no_attention_maps: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LensArg {
    FinalNorm,
    Raw,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelInput,
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    #[value(alias = "layer-only")]
    Layer,
    AttnFfn,
    AttnFfnLayer,
}

impl From<SourceArg> for SourceSet {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Layer => SourceSet::LayerOnly,
            SourceArg::AttnFfn => SourceSet::AttnFfn,
            SourceArg::AttnFfnLayer => SourceSet::AttnFfnLayer,
        }
    }
}

#[derive(Debug, Args)]
struct VdcArgs {
    #[arg(long, value_enum, default_value_t = SourceArg::AttnFfn)]
    validation: SourceArg,
    #[arg(long, value_enum, default_value_t = SourceArg::AttnFfnLayer)]
    correction: SourceArg,
    /// Ignore the first N layers (ablation presets: 0, 2, 10, 16).
    #[arg(long, default_value_t = 0)]
    skip_layers: usize,
}

impl VdcArgs {
    fn config(&self, feedback: bool) -> VdcConfig {
        VdcConfig {
            validation: self.validation.into(),
            correction: self.correction.into(),
            skip_layers: self.skip_layers,
            feedback,
            ..Default::default()
        }
    }
}

#[derive(Debug, Subcommand)]
enum AnalyzeCmd {
    Gate(GateArgs),
    Sad(SadArgs),
}

#[derive(Debug, Args)]
struct GateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Stage override, e.g. "Global:1-2,Approach:3-16,Tighten:17-26,Explore:27-32".
    #[arg(long)]
    stages: Option<String>,
    /// Include stage heatmaps and difference maps (requires visual grids).
    #[arg(long)]
    heatmaps: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SadArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 0)]
    skip_layers: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CorrectArgs {
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    vdc: VdcArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DecodeVdcArgs {
    #[command(flatten)]
    model: ModelInput,
    #[command(flatten)]
    prompt: PromptArgs,
    #[command(flatten)]
    vdc: VdcArgs,
    /// Keep conditioning on the model's own tokens; corrections are only reported.
    #[arg(long)]
    no_feedback: bool,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    Chair(ChairArgs),
}

#[derive(Debug, Args)]
struct ChairArgs {
    /// JSON-lines of {"caption": ..., "objects": [...]}.
    #[arg(long)]
    corpus: PathBuf,
    /// JSON object {canonical: [synonyms]}.
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    stages: Option<String>,
    #[command(flatten)]
    vdc: VdcArgs,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

/// Runs the CLI with process stdio.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn load_model(path: &Path) -> Result<ToyModel> {
    let spec: ModelSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
    spec.build()
}

fn load_vocab(input: &ModelInput, model: &ToyModel) -> Result<Vocab> {
    let normalizer = input
        .markers
        .clone()
        .map(Normalizer::new)
        .unwrap_or_default();
    match &input.vocab {
        Some(p) => Vocab::from_json_file(p, normalizer),
        None => {
            let v = Vocab::synthetic(model.config.vocab_size);
            Ok(Vocab::new(
                (0..v.len())
                    .map(|i| v.surface(i).unwrap_or_default().to_string())
                    .collect(),
                normalizer,
            ))
        }
    }
}

fn build_prompt(args: &PromptArgs, config: &ModelConfig) -> Result<Prompt> {
    match &args.prompt {
        Some(ids) => {
            let vision = config.grid.cells();
            if ids.len() < args.system_len + vision + 1 {
                return Err(Error::InvalidArgument(format!(
                    "prompt of {} tokens cannot hold {} system + {vision} vision tokens and an instruction",
                    ids.len(),
                    args.system_len
                )));
            }
            let (s, rest) = ids.split_at(args.system_len);
            let (v, i) = rest.split_at(vision);
            Ok(Prompt::from_parts(s, v, i))
        }
        None => Ok(Prompt::synthetic(
            config,
            args.system_len,
            args.instruction_len,
            args.seed,
        )),
    }
}

fn generate_options(args: &PromptArgs) -> GenerateOptions {
    GenerateOptions {
        max_new: args.max_new,
        topk: args.topk,
        end_token: args.end_token,
        lens: match args.lens {
            LensArg::FinalNorm => LensMode::FinalNorm,
            LensArg::Raw => LensMode::Raw,
        },
        capture_attention_maps: !args.no_attention_maps,
    }
}

fn load_trace(path: &Path) -> Result<DecodeTrace> {
    let f = fs::File::open(path)?;
    trace::read_trace(BufReader::new(f))
}

fn stages_for(trace: &DecodeTrace, text: Option<&str>) -> Result<StageSpec> {
    match text {
        Some(t) => StageSpec::parse(t, trace.num_layers),
        None => default_stages(trace.num_layers),
    }
}

fn check_skip(skip: usize, layers: usize) -> Result<()> {
    if skip >= layers {
        return Err(Error::InvalidArgument(format!(
            "--skip-layers {skip} must be below the {layers} layers"
        )));
    }
    Ok(())
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Model(ModelCmd::New(a)) => {
            let config = ModelConfig {
                num_layers: a.layers,
                hidden_dim: a.hidden,
                num_heads: a.heads,
                ffn_dim: a.ffn,
                vocab_size: a.vocab_size,
                max_context: a.max_context,
                grid: Grid {
                    h: a.grid_h,
                    w: a.grid_w,
                },
                tie_embeddings: a.tie_embeddings,
            };
            let model = new_model(config, a.seed)?;
            emit(out, a.out.as_deref(), &to_json(&ModelSpec::of(&model))?)
        }
        Command::Trace(TraceCmd::Generate(a)) => {
            let model = load_model(&a.model.model)?;
            let vocab = load_vocab(&a.model, &model)?;
            let prompt = build_prompt(&a.prompt, &model.config)?;
            let t = generate(&model, &prompt, &generate_options(&a.prompt), &vocab)?;
            emit(out, a.out.as_deref(), &trace::trace_to_string(&t)?)
        }
        Command::Trace(TraceCmd::Validate(a)) => {
            let f = fs::File::open(&a.trace)?;
            load_and_report(BufReader::new(f), out)
        }
        Command::Analyze(AnalyzeCmd::Gate(a)) => {
            let t = load_trace(&a.trace)?;
            let stages = stages_for(&t, a.stages.as_deref())?;
            let r = gate::gate_report(&t, &stages, a.heatmaps)?;
            emit(out, a.out.as_deref(), &to_json(&r)?)
        }
        Command::Analyze(AnalyzeCmd::Sad(a)) => {
            let t = load_trace(&a.trace)?;
            check_skip(a.skip_layers, t.num_layers)?;
            let r = sad::detect_sad_trace(&t, a.skip_layers)?;
            emit(out, a.out.as_deref(), &to_json(&r)?)
        }
        Command::Correct(a) => {
            let t = load_trace(&a.trace)?;
            check_skip(a.vdc.skip_layers, t.num_layers)?;
            let r = vdc::correct_trace(&t, &a.vdc.config(false))?;
            emit(
                out,
                a.out.as_deref(),
                &report::vdc_reports_json(&r.reports)?,
            )
        }
        Command::DecodeVdc(a) => {
            let model = load_model(&a.model.model)?;
            check_skip(a.vdc.skip_layers, model.config.num_layers)?;
            let vocab = load_vocab(&a.model, &model)?;
            let prompt = build_prompt(&a.prompt, &model.config)?;
            let cfg = a.vdc.config(!a.no_feedback);
            let d =
                vdc::decode_with_vdc(&model, &prompt, &vocab, &generate_options(&a.prompt), &cfg)?;
            if let Some(p) = &a.trace_out {
                fs::write(p, trace::trace_to_string(&d.trace)?)?;
            }
            emit(out, a.out.as_deref(), &to_json(&d.outcome)?)
        }
        Command::Eval(EvalCmd::Chair(a)) => {
            let lexicon = ObjectLexicon::from_json_file(&a.lexicon)?;
            let corpus = chair::read_corpus(BufReader::new(fs::File::open(&a.corpus)?))?;
            let r = chair::chair_corpus(&corpus, &lexicon)?;
            emit(out, a.out.as_deref(), &to_json(&r)?)
        }
        Command::Report(a) => {
            let t = load_trace(&a.trace)?;
            check_skip(a.vdc.skip_layers, t.num_layers)?;
            let stages = stages_for(&t, a.stages.as_deref())?;
            let s = report::write_report(&t, &stages, &a.vdc.config(false), &a.out_dir)?;
            emit(out, None, &to_json(&s)?)
        }
    }
}

fn load_and_report<R: std::io::BufRead>(src: R, out: &mut dyn Write) -> Result<()> {
    trace::read_trace(src)?;
    writeln!(out, "OK")?;
    Ok(())
}
