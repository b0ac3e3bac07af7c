//! The `tc` command line. Exit codes: 0 success, 1 usage error, 2 runtime
//! error. `TC_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attribution::{deembed, FeatureHandle};
use crate::checkpoint::{load_activations, load_coder, load_model, save_activations, save_coder, save_model};
use crate::circuits::{add_error_nodes, export_graph, greedy_paths, paths_to_graph, CircuitContext, GraphFormat, SearchOptions};
use crate::coder::{Coder, CoderKind};
use crate::corpus::{gen_greater_than, gen_synthetic_corpus, load_prompts, CorpusDescriptor, Vocab};
use crate::error::{Error, Result};
use crate::eval::{evaluate, topk_ablation_curve, AblationUnit};
use crate::lm::{train_lm, LmTrainConfig};
use crate::model::{forward_with_cache, MlpActivation, ModelConfig, ModelParams};
use crate::service::{serve, Session};
use crate::trainer::{harvest, sweep, train_coder, write_log_csv, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "tc", version, about = "Transcoder training and circuit analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a vocabulary and a synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a small transformer on a corpus.
    TrainModel(TrainModelArgs),
    /// Record MLP input/output pairs of one layer.
    Harvest(HarvestArgs),
    /// Train a transcoder or SAE on harvested pairs.
    TrainCoder(TrainCoderArgs),
    /// Train and evaluate one coder per lambda1 value.
    Sweep(SweepArgs),
    /// Sparsity and fidelity of coders spliced into the model.
    Eval(EvalArgs),
    /// Greedy circuit search from one feature.
    Trace(TraceArgs),
    /// Top tokens of a feature's encoder de-embedding.
    Deembed(DeembedArgs),
    /// Top-k zero ablation on the greater-than task.
    Ablate(AblateArgs),
    /// Serve the JSON API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct Inputs {
    /// Model checkpoint.
    #[arg(long, default_value = "model.tcw1")]
    model: PathBuf,
    /// Vocabulary file, one token per line [default: built-in toy vocabulary].
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Prompt file, one prompt per line [default: the 100 greater-than prompts].
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    #[arg(long, default_value = "corpus.txt")]
    out: PathBuf,
    #[arg(long, default_value = "vocab.txt")]
    vocab_out: PathBuf,
    /// Approximate corpus size in tokens.
    #[arg(long, default_value_t = 200_000)]
    tokens: usize,
    /// Template mix, `toy` or `span=..,point=..,filler=..`.
    #[arg(long, default_value = "toy")]
    mix: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Activation {
    Gelu,
    Relu,
}

#[derive(Args, Debug)]
struct TrainModelArgs {
    #[arg(long, default_value = "corpus.txt")]
    corpus: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value = "model.tcw1")]
    out: PathBuf,
    /// Per-step loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 128)]
    d_mlp: usize,
    #[arg(long, default_value_t = 16)]
    context_len: usize,
    #[arg(long, value_enum, default_value_t = Activation::Gelu)]
    activation: Activation,
    #[arg(long)]
    tied_embeddings: bool,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f32,
    /// Seed for initialization and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct HarvestArgs {
    #[arg(long, default_value = "model.tcw1")]
    model: PathBuf,
    #[arg(long, default_value = "corpus.txt")]
    corpus: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    layer: usize,
    /// Maximum number of token positions.
    #[arg(long, default_value_t = 1 << 20)]
    limit: usize,
    #[arg(long, default_value_t = 128)]
    context_len: usize,
    #[arg(long, default_value = "acts.tcw1")]
    out: PathBuf,
}

/// Coder hyperparameters. Defaults: Adam (0.9, 0.999), lr 2e-5, batch 4096,
/// 2^20 training tokens, 32x expansion.
#[derive(Args, Debug, Clone)]
struct CoderHyper {
    #[arg(long, default_value_t = 2e-5)]
    lr: f32,
    #[arg(long, default_value_t = 4096)]
    batch_size: usize,
    #[arg(long, default_value_t = 1 << 20)]
    total_tokens: usize,
    #[arg(long, default_value_t = 32)]
    d_features_mult: usize,
    #[arg(long, default_value_t = 0.9)]
    beta1: f32,
    #[arg(long, default_value_t = 0.999)]
    beta2: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Visit batches in harvest order.
    #[arg(long)]
    no_shuffle: bool,
}

impl CoderHyper {
    fn config(&self, lambda1: f32) -> TrainConfig {
        TrainConfig {
            lambda1,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            total_tokens: self.total_tokens,
            d_features_multiplier: self.d_features_mult,
            beta1: self.beta1,
            beta2: self.beta2,
            seed: self.seed,
            shuffle: !self.no_shuffle,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum Kind {
    Transcoder,
    Sae,
}

impl From<Kind> for CoderKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Transcoder => CoderKind::Transcoder,
            Kind::Sae => CoderKind::Sae,
        }
    }
}

#[derive(Args, Debug)]
struct TrainCoderArgs {
    #[arg(long, default_value = "acts.tcw1")]
    acts: PathBuf,
    #[arg(long, value_enum, default_value_t = Kind::Transcoder)]
    kind: Kind,
    #[arg(long, default_value_t = 1e-3)]
    lambda1: f32,
    #[command(flatten)]
    hyper: CoderHyper,
    /// Output checkpoint [default: coder_l{layer}.tcw1].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, default_value = "acts.tcw1")]
    acts: PathBuf,
    /// Comma-separated sparsity coefficients.
    #[arg(long, value_delimiter = ',', default_value = "1e-4,1e-3,1e-2")]
    lambda1: Vec<f32>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "transcoder")]
    kinds: Vec<Kind>,
    #[command(flatten)]
    hyper: CoderHyper,
    /// Summary CSV [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also save every trained coder into this directory.
    #[arg(long)]
    save_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Coder checkpoints [default: every coder_l{n}.tcw1 present].
    #[arg(long, value_delimiter = ',')]
    coder: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Transcoder checkpoints [default: every coder_l{n}.tcw1 present].
    #[arg(long, value_delimiter = ',')]
    coder: Vec<PathBuf>,
    #[arg(long)]
    prompt_id: usize,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    feature: usize,
    #[arg(long)]
    token: usize,
    /// Beam width; 0 disables pruning.
    #[arg(long = "N", default_value_t = 5)]
    n: usize,
    /// Search depth.
    #[arg(long = "L", default_value_t = 3)]
    l: usize,
    /// Rank candidates by absolute attribution.
    #[arg(long)]
    rank_abs: bool,
    /// Attach transcoder error nodes.
    #[arg(long)]
    error_nodes: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Dot,
}

#[derive(Args, Debug)]
struct DeembedArgs {
    #[arg(long, default_value = "model.tcw1")]
    model: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    coder: PathBuf,
    #[arg(long)]
    feature: usize,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, default_value = "model.tcw1")]
    model: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    layer: usize,
    /// `transcoder_features` or `mlp_neurons`.
    #[arg(long, default_value = "transcoder_features")]
    unit: String,
    /// Transcoder for `transcoder_features` [default: coder_l{layer}.tcw1].
    #[arg(long)]
    coder: Option<PathBuf>,
    /// Comma-separated k values [default: every k from 0 to the unit count].
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long, value_delimiter = ',')]
    coder: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Hide token text in every response.
    #[arg(long)]
    blind: bool,
}

/// Parse `args` (program name first) and run; returns the exit code.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Some(n) = thread_count(std::env::var("TC_THREADS").ok().as_deref())? {
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn thread_count(raw: Option<&str>) -> Result<Option<usize>> {
    raw.map(|r| {
        r.parse()
            .ok()
            .filter(|&n: &usize| n > 0)
            .ok_or_else(|| Error::Usage(format!("TC_THREADS must be a positive integer, got {r:?}")))
    })
    .transpose()
}

fn load_vocab(path: &Option<PathBuf>) -> Result<Vocab> {
    match path {
        Some(p) => Vocab::load(p),
        None => Ok(Vocab::toy()),
    }
}

fn load_inputs(inputs: &Inputs) -> Result<(ModelParams, Vocab, Vec<Vec<usize>>)> {
    let params = load_model(&inputs.model)?;
    let vocab = load_vocab(&inputs.vocab)?;
    if vocab.len() != params.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    let prompts = match &inputs.prompts {
        Some(p) => load_prompts(&vocab, p)?,
        None => gen_greater_than(&vocab)?.prompts,
    };
    Ok((params, vocab, prompts))
}

fn default_coder_path(layer: usize) -> PathBuf {
    PathBuf::from(format!("coder_l{layer}.tcw1"))
}

fn load_coders(paths: &[PathBuf], n_layers: usize) -> Result<Vec<Coder>> {
    if !paths.is_empty() {
        return paths.iter().map(load_coder).collect();
    }
    let found: Vec<Coder> = (0..n_layers)
        .map(default_coder_path)
        .filter(|p| p.exists())
        .map(load_coder)
        .collect::<Result<_>>()?;
    if found.is_empty() {
        return Err(Error::Usage("no coders given and no coder_l{n}.tcw1 files found".into()));
    }
    Ok(found)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::TrainModel(a) => train_model(a),
        Command::Harvest(a) => run_harvest(a),
        Command::TrainCoder(a) => run_train_coder(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Eval(a) => run_eval(a),
        Command::Trace(a) => run_trace(a),
        Command::Deembed(a) => run_deembed(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Serve(a) => run_serve(a),
    }
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let descriptor: CorpusDescriptor = a.mix.parse()?;
    let vocab = Vocab::toy();
    let corpus = gen_synthetic_corpus(&vocab, &descriptor, a.seed, a.tokens)?;
    vocab.save(&a.vocab_out)?;
    corpus.save(&vocab, &a.out)?;
    log::info!("wrote {} prompts ({} tokens) to {}", corpus.prompts.len(), corpus.n_tokens(), a.out.display());
    Ok(())
}

fn train_model(a: TrainModelArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let prompts = load_prompts(&vocab, &a.corpus)?;
    let d_head = a.d_model / a.n_heads.max(1);
    let config = ModelConfig {
        n_layers: a.n_layers,
        n_heads: a.n_heads,
        d_model: a.d_model,
        d_head,
        d_mlp: a.d_mlp,
        vocab_size: vocab.len(),
        context_len: a.context_len,
        activation: match a.activation {
            Activation::Gelu => MlpActivation::Gelu,
            Activation::Relu => MlpActivation::Relu,
        },
        tied_embeddings: a.tied_embeddings,
        ..ModelConfig::toy(vocab.len())
    };
    let mut params = ModelParams::init(&config, a.seed)?;
    let cfg = LmTrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        ..LmTrainConfig::default()
    };
    let losses = train_lm(&mut params, &prompts, &cfg)?;
    if let Some(path) = &a.log {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss"])?;
        for (i, l) in losses.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush()?;
    }
    save_model(&params, &a.out)?;
    if let Some(last) = losses.last() {
        log::info!("final loss {last:.4}; saved {}", a.out.display());
    }
    Ok(())
}

fn run_harvest(a: HarvestArgs) -> Result<()> {
    let params = load_model(&a.model)?;
    let vocab = load_vocab(&a.vocab)?;
    let prompts = load_prompts(&vocab, &a.corpus)?;
    let stream = harvest(&params, &prompts, a.layer, a.limit, a.context_len)?;
    save_activations(&stream, &a.out)?;
    log::info!("harvested {} pairs from layer {}", stream.len(), a.layer);
    Ok(())
}

fn run_train_coder(a: TrainCoderArgs) -> Result<()> {
    let stream = load_activations(&a.acts)?;
    let cfg = a.hyper.config(a.lambda1);
    let (coder, log) = train_coder(&cfg, &stream, a.kind.into())?;
    let out = a.out.unwrap_or_else(|| default_coder_path(stream.layer));
    save_coder(&coder, &out)?;
    if let Some(path) = &a.log {
        write_log_csv(&log, File::create(path)?)?;
    }
    if let Some(last) = log.last() {
        log::info!("step {}: faithfulness {:.4e}, l0 {:.2}; saved {}", last.step, last.faithfulness, last.l0, out.display());
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let (params, _, prompts) = load_inputs(&a.inputs)?;
    let stream = load_activations(&a.acts)?;
    let kinds: Vec<CoderKind> = a.kinds.iter().map(|&k| k.into()).collect();
    let base = a.hyper.config(0.0);
    let report = sweep(&base, &a.lambda1, &stream, &kinds, &params, &prompts)?;
    if let Some(dir) = &a.save_dir {
        std::fs::create_dir_all(dir)?;
        for run in &report.runs {
            if let Ok((coder, _)) = &run.outcome {
                save_coder(coder, dir.join(format!("{}_l{}_lambda{}.tcw1", run.kind.as_str(), stream.layer, run.lambda1)))?;
            }
        }
    }
    let mut out = output(&a.out)?;
    report.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let (params, _, prompts) = load_inputs(&a.inputs)?;
    let coders = load_coders(&a.coder, params.config.n_layers)?;
    let refs: Vec<&Coder> = coders.iter().collect();
    let report = evaluate(&params, &refs, &prompts)?;
    let mut out = output(&a.out)?;
    report.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn run_trace(a: TraceArgs) -> Result<()> {
    let (params, _, prompts) = load_inputs(&a.inputs)?;
    let coders = load_coders(&a.coder, params.config.n_layers)?;
    let prompt = prompts
        .get(a.prompt_id)
        .ok_or_else(|| Error::Input(format!("no prompt {} ({} loaded)", a.prompt_id, prompts.len())))?;
    let text = trace_to_string(&params, &coders, prompt, &a)?;
    let mut out = output(&a.out)?;
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn trace_to_string(params: &ModelParams, coders: &[Coder], prompt: &[usize], a: &TraceArgs) -> Result<String> {
    let (_, cache) = forward_with_cache(params, prompt)?;
    let refs: Vec<&Coder> = coders.iter().collect();
    let ctx = CircuitContext::new(params, &cache, &refs)?;
    let root = FeatureHandle {
        layer: a.layer,
        feature: a.feature,
        token: a.token,
    };
    let opts = SearchOptions {
        beam: (a.n > 0).then_some(a.n),
        rank_abs: a.rank_abs,
    };
    let mut graph = paths_to_graph(&greedy_paths(&ctx, root, a.l, opts)?)?;
    if a.error_nodes {
        graph = add_error_nodes(&graph, &ctx)?;
    }
    let format = match a.format {
        Format::Json => GraphFormat::Json,
        Format::Dot => GraphFormat::Dot,
    };
    Ok(export_graph(&graph, format))
}

fn run_deembed(a: DeembedArgs) -> Result<()> {
    let params = load_model(&a.model)?;
    let vocab = match &a.vocab {
        Some(p) => Some(Vocab::load(p)?),
        None => {
            let toy = Vocab::toy();
            (toy.len() == params.config.vocab_size).then_some(toy)
        }
    };
    let coder = load_coder(&a.coder)?;
    let (f_enc, _) = coder.feature_vectors(a.feature)?;
    let rows = deembed(params.w_e.view(), f_enc.view(), a.k)?;
    let mut out = output(&a.out)?;
    crate::attribution::write_ranked_csv(&rows, vocab.as_ref(), &mut out)?;
    out.flush()?;
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let params = load_model(&a.model)?;
    let vocab = load_vocab(&a.vocab)?;
    let task = gen_greater_than(&vocab)?;
    let unit: AblationUnit = a.unit.parse()?;
    let coder = match unit {
        AblationUnit::TranscoderFeatures => Some(load_coder(a.coder.clone().unwrap_or_else(|| default_coder_path(a.layer)))?),
        AblationUnit::MlpNeurons => None,
    };
    let ks = if a.ks.is_empty() {
        let width = match &coder {
            Some(c) => c.d_features(),
            None => params.config.d_mlp,
        };
        (0..=width).collect()
    } else {
        let mut ks = a.ks.clone();
        ks.sort_unstable();
        ks
    };
    let curve = topk_ablation_curve(&params, &task, unit, a.layer, coder.as_ref(), &ks)?;
    let mut out = output(&a.out)?;
    curve.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<()> {
    let (params, vocab, prompts) = load_inputs(&a.inputs)?;
    let coders = load_coders(&a.coder, params.config.n_layers)?;
    let session = Session::new(params, coders, Some(vocab), prompts, a.blind)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(session, a.bind))
}
