//! Command-line front end: quantization reports, text generation, the
//! dynamic-batching demo, partition planning, and speculative decoding.
//!
//! Exit codes: 0 success, 1 runtime/data error, 2 usage error. All
//! randomness flows from explicit `--seed` flags; with `--no-timing` the
//! reports are byte-identical across runs and thread counts.

use clap::{Args, Parser, Subcommand};
use inferkit::batcher::{static_first_token_steps, QueryPool};
use inferkit::checkpoint::{
    load_native, load_safetensors, random_checkpoint, write_native, Checkpoint, TensorData,
    TensorEntry,
};
use inferkit::engine::{Engine, Model};
use inferkit::modelspec::{parse_spec, FileFormat, ModelSpec, NetworkType, Vocab};
use inferkit::partition::{estimate, plan, plan_table, CostModel, PartitionStrategy};
use inferkit::quant::{block_error_stats, QuantScheme, SchemeKind};
use inferkit::sampler::{choose, SamplerPolicy, SamplerState, Strategy};
use inferkit::speculative::{
    estimate_speedup, speculative_generate, Acceptance, EngineDist, NGramDraft, SpecConfig,
    TokenDistribution,
};
use inferkit::tensor::{WeightMatrix, WeightStorage};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "inferkit",
    version,
    about = "Configuration-driven CPU transformer inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a checkpoint into the native container and report error stats
    Quantize(QuantizeArgs),
    /// Generate tokens from a prompt
    Generate(GenerateArgs),
    /// Replay an arrivals file through the dynamic batcher
    BatchDemo(BatchDemoArgs),
    /// Print partition assignments and cost estimates
    PartitionPlan(PartitionArgs),
    /// Speculative decoding with a draft model
    SpecDecode(SpecDecodeArgs),
}

#[derive(Args)]
struct QuantizeArgs {
    /// Print the 12-weight error table at 4-bit / 3-bit / 3.5-bit and exit
    #[arg(long)]
    demo_table2: bool,
    /// Model spec describing the tensors to quantize
    #[arg(long)]
    model_spec: Option<PathBuf>,
    /// Input container; a fresh random checkpoint is used when absent
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "q4")]
    scheme: String,
    #[arg(long, default_value_t = 32)]
    block_size: usize,
    /// Seed for the random checkpoint when no --input is given
    #[arg(long, default_value_t = 0)]
    random_seed: u64,
    /// Output path for the quantized container
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SamplingFlags {
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f32>,
    #[arg(long)]
    temp: Option<f32>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    tfs_z: Option<f32>,
    #[arg(long)]
    mirostat_tau: Option<f32>,
    #[arg(long)]
    mirostat_eta: Option<f32>,
    #[arg(long)]
    t_random: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model_spec: PathBuf,
    /// Weights file, in the format the model spec declares; random when absent
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    random_seed: u64,
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    max_new: Option<usize>,
    #[command(flatten)]
    sampling: SamplingFlags,
    /// Omit the timing line so reports are byte-identical
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct BatchDemoArgs {
    #[arg(long)]
    model_spec: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    random_seed: u64,
    /// Arrivals file: one `<arrival_step>\t<prompt>` per line
    #[arg(long)]
    arrivals: PathBuf,
    #[arg(long, default_value_t = 8)]
    capacity: usize,
    #[arg(long, default_value_t = 4)]
    max_new: usize,
    /// Also print the static-batching first-token schedule for comparison
    #[arg(long)]
    compare_static: bool,
    #[command(flatten)]
    sampling: SamplingFlags,
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long, default_value = "hybrid")]
    strategy: String,
    /// Model spec to take layer and head counts from
    #[arg(long)]
    model_spec: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    devices: usize,
    /// Stages x groups grid for hybrid, e.g. 2x2
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 16.0)]
    t_layer: f64,
    #[arg(long, default_value_t = 1.0)]
    t_merge: f64,
    #[arg(long, default_value_t = 0.0)]
    t_hop: f64,
    /// Concurrent streams for the throughput estimate
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct SpecDecodeArgs {
    #[arg(long)]
    model_spec: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    random_seed: u64,
    #[arg(long)]
    prompt: String,
    /// `ngram` or `model:<spec path>` for a second transformer draft
    #[arg(long, default_value = "ngram")]
    draft: String,
    #[arg(long, default_value_t = 3)]
    lookahead: usize,
    /// `strict`, `topk:<k>`, or `topp:<p>`
    #[arg(long, default_value = "strict")]
    accept: String,
    #[arg(long, default_value_t = 16)]
    n_tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    t_draft: f64,
    #[arg(long, default_value_t = 1.0)]
    t_target: f64,
    #[arg(long)]
    no_timing: bool,
}

enum AppError {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for AppError {
    fn from(e: E) -> Self {
        AppError::Runtime(e.to_string())
    }
}

fn main() {
    configure_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Quantize(args) => cmd_quantize(args),
        Command::Generate(args) => cmd_generate(args),
        Command::BatchDemo(args) => cmd_batch_demo(args),
        Command::PartitionPlan(args) => cmd_partition_plan(args),
        Command::SpecDecode(args) => cmd_spec_decode(args),
    };
    match result {
        Ok(()) => {}
        Err(AppError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(AppError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}

/// INFERKIT_THREADS caps internal parallelism; unset uses all cores.
fn configure_threads() {
    if let Ok(v) = std::env::var("INFERKIT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

fn load_spec(path: &Path) -> Result<ModelSpec, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Usage(format!("cannot read model spec {}: {e}", path.display())))?;
    let spec = parse_spec(&text).map_err(|e| AppError::Usage(e.to_string()))?;
    let violations = inferkit::modelspec::validate_spec(&spec);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(AppError::Usage(format!(
            "invalid spec: {}",
            list.join("; ")
        )));
    }
    Ok(spec)
}

fn load_vocab(spec: &ModelSpec, spec_path: &Path) -> Result<Vocab, AppError> {
    let base = spec_path.parent().unwrap_or(Path::new("."));
    let resolve = |f: &str| {
        let p = PathBuf::from(f);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let vocab_text = std::fs::read_to_string(resolve(&spec.tokenizer_file)).map_err(|e| {
        AppError::Runtime(format!(
            "cannot read tokenizer file {}: {e}",
            spec.tokenizer_file
        ))
    })?;
    let merges_text = match &spec.merges_file {
        Some(f) => Some(
            std::fs::read_to_string(resolve(f))
                .map_err(|e| AppError::Runtime(format!("cannot read merges file {f}: {e}")))?,
        ),
        None => None,
    };
    let vocab = Vocab::from_text(&vocab_text, merges_text.as_deref())?;
    if vocab.size() != spec.vocab_size {
        return Err(AppError::Runtime(format!(
            "vocab file has {} tokens, spec declares {}",
            vocab.size(),
            spec.vocab_size
        )));
    }
    Ok(vocab)
}

fn load_checkpoint(
    spec: &ModelSpec,
    weights: &Option<PathBuf>,
    random_seed: u64,
) -> Result<Checkpoint, AppError> {
    match weights {
        None => Ok(random_checkpoint(spec, random_seed)),
        Some(path) => {
            if !path.exists() {
                return Err(AppError::Usage(format!(
                    "weights file {} does not exist",
                    path.display()
                )));
            }
            let ckpt = match spec.model_file_format {
                FileFormat::Native => load_native(path, spec)?,
                FileFormat::Safetensors => load_safetensors(path, spec)?,
            };
            Ok(ckpt)
        }
    }
}

/// Merge sampling defaults: spec generation_config first, flags override.
fn build_policy(spec: &ModelSpec, flags: &SamplingFlags) -> Result<SamplerPolicy, AppError> {
    let mut policy = SamplerPolicy::default();
    let g = &spec.generation;
    if let Some(name) = &g.strategy {
        policy.strategy = Strategy::parse(name).map_err(|e| AppError::Usage(e.to_string()))?;
    }
    if let Some(v) = g.top_k {
        policy.k = v;
    }
    if let Some(v) = g.top_p {
        policy.p = v;
    }
    if let Some(v) = g.temperature {
        policy.temperature = v;
    }
    if let Some(v) = g.alpha {
        policy.alpha = v;
    }
    if let Some(v) = g.tfs_z {
        policy.tfs_z = v;
    }
    if let Some(v) = g.mirostat_tau {
        policy.target_surprise = v;
    }
    if let Some(v) = g.mirostat_eta {
        policy.learning_rate = v;
    }
    if let Some(v) = g.t_random {
        policy.t_random = v;
    }
    if let Some(v) = g.seed {
        policy.rng_seed = v;
    }
    if let Some(name) = &flags.strategy {
        policy.strategy = Strategy::parse(name).map_err(|e| AppError::Usage(e.to_string()))?;
    }
    if let Some(v) = flags.top_k {
        policy.k = v;
    }
    if let Some(v) = flags.top_p {
        policy.p = v;
    }
    if let Some(v) = flags.temp {
        policy.temperature = v;
    }
    if let Some(v) = flags.alpha {
        policy.alpha = v;
    }
    if let Some(v) = flags.tfs_z {
        policy.tfs_z = v;
    }
    if let Some(v) = flags.mirostat_tau {
        policy.target_surprise = v;
    }
    if let Some(v) = flags.mirostat_eta {
        policy.learning_rate = v;
    }
    if let Some(v) = flags.t_random {
        policy.t_random = v;
    }
    if let Some(v) = flags.seed {
        policy.rng_seed = v;
    }
    policy
        .validate()
        .map_err(|e| AppError::Usage(e.to_string()))?;
    Ok(policy)
}

fn parse_scheme(name: &str, block_size: usize) -> Result<QuantScheme, AppError> {
    let kind = SchemeKind::parse(name)
        .ok_or_else(|| AppError::Usage(format!("unknown scheme `{name}`")))?;
    if kind == SchemeKind::Fp16 {
        return Err(AppError::Usage(
            "fp16 is raw storage; pick a block codec (q2..q8, q3h)".into(),
        ));
    }
    QuantScheme::new(kind, block_size).map_err(|e| AppError::Usage(e.to_string()))
}

fn cmd_quantize(args: QuantizeArgs) -> Result<(), AppError> {
    if args.demo_table2 {
        let block = [
            -1.0f32, -0.9, -0.6, -0.4, -0.2, 0.0, 0.1, 0.5, 0.7, 1.0, 1.3, 1.5,
        ];
        println!("command: quantize --demo-table2");
        println!("weights: {block:?}");
        for (label, kind) in [
            ("4-bit", SchemeKind::Q4),
            ("3-bit", SchemeKind::Q3),
            ("3.5-bit", SchemeKind::Q3H),
        ] {
            let scheme =
                QuantScheme::new(kind, 64).map_err(|e| AppError::Runtime(e.to_string()))?;
            let codes = inferkit::quant::quantize_slice(&block, scheme)?.unpack_digits()?;
            let stats = block_error_stats(&block, scheme)?;
            println!("{label}: codes {codes:?} avg error {:.3}", stats.avg_error);
        }
        return Ok(());
    }

    let spec_path = args.model_spec.ok_or_else(|| {
        AppError::Usage("--model-spec is required unless --demo-table2 is given".into())
    })?;
    let spec = load_spec(&spec_path)?;
    let scheme = parse_scheme(&args.scheme, args.block_size)?;
    let ckpt = load_checkpoint(&spec, &args.input, args.random_seed)?;

    println!("command: quantize");
    println!(
        "scheme: {} block-size {} bits/weight {:.3}",
        scheme.kind.name(),
        scheme.block_size,
        scheme.bits_per_weight()
    );
    let mut out = Checkpoint::new(&spec);
    for (name, entry) in &ckpt.tensors {
        if entry.dims.len() != 2 {
            out.tensors.insert(name.clone(), entry.clone());
            continue;
        }
        let values = entry.to_f32()?;
        let (rows, cols) = (entry.dims[0], entry.dims[1]);
        let wm = WeightMatrix::quantize(rows, cols, &values, scheme)?;
        // Round-trip error over the whole tensor, block by block.
        let mut err_sum = 0.0f64;
        let mut err_n = 0usize;
        for r in 0..rows {
            for chunk in values[r * cols..(r + 1) * cols].chunks(scheme.block_size) {
                let stats = block_error_stats(chunk, scheme)?;
                err_sum += stats.avg_error * chunk.len() as f64;
                err_n += chunk.len();
            }
        }
        println!(
            "tensor {name}: dims {:?} avg error {:.5}",
            entry.dims,
            err_sum / err_n as f64
        );
        let WeightStorage::Quantized(blocks) = wm.storage else {
            unreachable!("quantize always yields quantized storage")
        };
        out.tensors.insert(
            name.clone(),
            TensorEntry {
                dims: entry.dims.clone(),
                data: TensorData::Quant { scheme, blocks },
            },
        );
    }
    if let Some(path) = &args.out {
        write_native(path, &out)?;
        println!("wrote: {}", path.display());
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), AppError> {
    let started = Instant::now();
    let spec = load_spec(&args.model_spec)?;
    if spec.network_type == NetworkType::EncoderOnly {
        return Err(AppError::Usage(
            "encoder-only models do not generate".into(),
        ));
    }
    let vocab = load_vocab(&spec, &args.model_spec)?;
    let ckpt = load_checkpoint(&spec, &args.weights, args.random_seed)?;
    let model =
        Model::from_checkpoint(&spec, &ckpt).map_err(|e| AppError::Runtime(e.to_string()))?;
    let mut engine = Engine::new(model, 1);

    let policy = build_policy(&spec, &args.sampling)?;
    let max_new = args
        .max_new
        .or(spec.generation.max_new_tokens)
        .unwrap_or(32);

    let prompt_ids = vocab.encode(spec.tokenization_algorithm, &args.prompt);
    let decoder_prompt: Vec<u32> = match spec.network_type {
        NetworkType::EncoderDecoder => {
            let bos = vocab.bos.ok_or_else(|| {
                AppError::Runtime("encoder_decoder generation needs a <bos> token".into())
            })?;
            vec![bos]
        }
        _ => {
            if prompt_ids.is_empty() {
                return Err(AppError::Usage("prompt encodes to zero tokens".into()));
            }
            prompt_ids.clone()
        }
    };

    println!("command: generate");
    println!("spec: {}", args.model_spec.display());
    println!(
        "strategy: {} seed: {}",
        policy.strategy.name(),
        policy.rng_seed
    );
    println!(
        "prompt-ids: {}",
        prompt_ids
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );

    let slot = engine
        .alloc_slot()
        .map_err(|e| AppError::Runtime(e.to_string()))?;
    if spec.network_type == NetworkType::EncoderDecoder {
        if prompt_ids.is_empty() {
            return Err(AppError::Usage("prompt encodes to zero tokens".into()));
        }
        let memory = engine
            .encode(&prompt_ids)
            .map_err(|e| AppError::Runtime(e.to_string()))?;
        engine
            .bind_encoder_memory(slot, &memory)
            .map_err(|e| AppError::Runtime(e.to_string()))?;
    }
    let mut state = SamplerState::new(&policy, spec.vocab_size, 1);
    for &t in &decoder_prompt {
        state.observe(t);
    }
    let mut logits = engine
        .prefill(slot, &decoder_prompt)
        .map_err(|e| AppError::Runtime(e.to_string()))?;
    let mut generated: Vec<u32> = Vec::new();
    for step in 1..=max_new {
        let token = choose(&policy, &mut state, &logits);
        generated.push(token);
        state.observe(token);
        println!("step {step}: {token}");
        if Some(token) == vocab.eos {
            break;
        }
        if decoder_prompt.len() + generated.len() >= spec.max_context {
            break;
        }
        logits = engine
            .forward_step(&[(slot, token)])
            .map_err(|e| AppError::Runtime(e.to_string()))?
            .pop()
            .unwrap();
    }
    println!(
        "output-ids: {}",
        generated
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    println!("output-text: {}", vocab.decode(&generated)?);
    if !args.no_timing {
        println!("timing: {:.1} ms", started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(())
}

fn cmd_batch_demo(args: BatchDemoArgs) -> Result<(), AppError> {
    let started = Instant::now();
    let spec = load_spec(&args.model_spec)?;
    if spec.network_type != NetworkType::DecoderOnly {
        return Err(AppError::Usage(
            "batch-demo drives decoder_only models".into(),
        ));
    }
    let vocab = load_vocab(&spec, &args.model_spec)?;
    let ckpt = load_checkpoint(&spec, &args.weights, args.random_seed)?;
    let model =
        Model::from_checkpoint(&spec, &ckpt).map_err(|e| AppError::Runtime(e.to_string()))?;
    let mut engine = Engine::new(model, args.capacity);
    let policy = build_policy(&spec, &args.sampling)?;

    let text = std::fs::read_to_string(&args.arrivals).map_err(|e| {
        AppError::Usage(format!(
            "cannot read arrivals file {}: {e}",
            args.arrivals.display()
        ))
    })?;
    let mut arrivals: Vec<(usize, Vec<u32>)> = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (step, prompt) = line.split_once('\t').ok_or_else(|| {
            AppError::Usage(format!(
                "arrivals line {}: expected `<arrival_step>\\t<prompt>`",
                ix + 1
            ))
        })?;
        let step: usize = step
            .trim()
            .parse()
            .map_err(|_| AppError::Usage(format!("arrivals line {}: bad step", ix + 1)))?;
        let ids = vocab.encode(spec.tokenization_algorithm, prompt);
        if ids.is_empty() {
            return Err(AppError::Usage(format!(
                "arrivals line {}: prompt encodes to zero tokens",
                ix + 1
            )));
        }
        arrivals.push((step, ids));
    }
    println!("command: batch-demo");
    println!("queries: {} capacity: {}", arrivals.len(), args.capacity);

    let mut pool = QueryPool::with_capacity(args.capacity, spec.max_context, vocab.eos);
    let mut names: Vec<Option<String>> = vec![None; arrivals.len() + 1];
    let mut first_dynamic: Vec<usize> = vec![0; arrivals.len()];
    let mut step = 0usize;
    loop {
        step += 1;
        for (i, (arrival, prompt)) in arrivals.iter().enumerate() {
            if *arrival == step {
                let id = pool
                    .add_query(
                        prompt.clone(),
                        policy.clone(),
                        args.max_new,
                        spec.vocab_size,
                    )
                    .map_err(|e| AppError::Runtime(e.to_string()))?;
                names[id.0 as usize] = Some(format!("S{}", i + 1));
                first_dynamic[i] = 0;
            }
        }
        let emissions = pool
            .infer(&mut engine)
            .map_err(|e| AppError::Runtime(e.to_string()))?;
        if !emissions.is_empty() {
            let rendered: Vec<String> = emissions
                .iter()
                .map(|(id, tok)| {
                    let name = names[id.0 as usize].as_deref().unwrap_or("?");
                    format!("{name}:{tok}")
                })
                .collect();
            println!("T{step}: {}", rendered.join(" "));
        }
        for (id, _) in &emissions {
            let ix = names[id.0 as usize]
                .as_deref()
                .and_then(|n| n[1..].parse::<usize>().ok())
                .unwrap_or(0)
                - 1;
            if first_dynamic[ix] == 0 {
                first_dynamic[ix] = step;
            }
        }
        let everyone_arrived = arrivals.iter().all(|(a, _)| *a <= step);
        if pool.is_empty() && everyone_arrived {
            break;
        }
    }
    println!(
        "dynamic-first-token: {}",
        first_dynamic
            .iter()
            .enumerate()
            .map(|(i, s)| format!("S{}=T{}", i + 1, s))
            .collect::<Vec<_>>()
            .join(" ")
    );
    if args.compare_static {
        let sched: Vec<(usize, usize)> = arrivals.iter().map(|(a, _)| (*a, args.max_new)).collect();
        let firsts = static_first_token_steps(&sched);
        println!(
            "static-first-token: {}",
            firsts
                .iter()
                .enumerate()
                .map(|(i, s)| format!("S{}=T{}", i + 1, s))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    if !args.no_timing {
        println!("timing: {:.1} ms", started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(())
}

fn cmd_partition_plan(args: PartitionArgs) -> Result<(), AppError> {
    let strategy = PartitionStrategy::parse(&args.strategy)
        .ok_or_else(|| AppError::Usage(format!("unknown strategy `{}`", args.strategy)))?;
    let from_spec = match &args.model_spec {
        Some(path) => {
            let spec = load_spec(path)?;
            Some((spec.layers, spec.decoder_heads))
        }
        None => None,
    };
    let layers = args
        .layers
        .or(from_spec.map(|(l, _)| l))
        .ok_or_else(|| AppError::Usage("--layers or --model-spec is required".into()))?;
    let heads = args
        .heads
        .or(from_spec.map(|(_, h)| h))
        .ok_or_else(|| AppError::Usage("--heads or --model-spec is required".into()))?;
    let grid = match &args.grid {
        None => None,
        Some(text) => {
            let (s, g) = text.split_once('x').ok_or_else(|| {
                AppError::Usage(format!("grid `{text}` is not <stages>x<groups>"))
            })?;
            let stages: usize = s
                .parse()
                .map_err(|_| AppError::Usage(format!("bad grid stages `{s}`")))?;
            let groups: usize = g
                .parse()
                .map_err(|_| AppError::Usage(format!("bad grid groups `{g}`")))?;
            Some((stages, groups))
        }
    };
    let p = plan(strategy, layers, heads, args.devices, grid)
        .map_err(|e| AppError::Usage(e.to_string()))?;
    println!("command: partition-plan");
    println!(
        "strategy: {} layers: {} heads: {} devices: {} stages: {} groups: {}",
        strategy.name(),
        layers,
        heads,
        args.devices,
        p.pipeline_stages,
        p.tensor_groups
    );
    print!("{}", plan_table(&p));
    let cost = CostModel {
        t_layer_compute: args.t_layer,
        t_merge: args.t_merge,
        t_hop: args.t_hop,
    };
    let (throughput, decode) = estimate(&p, &cost, args.batch_size, layers);
    println!(
        "estimate: throughput {:.4} tokens/unit ({} streams), decode speed {:.4} tokens/unit",
        throughput, args.batch_size, decode
    );
    Ok(())
}

fn cmd_spec_decode(args: SpecDecodeArgs) -> Result<(), AppError> {
    let started = Instant::now();
    let spec = load_spec(&args.model_spec)?;
    if spec.network_type != NetworkType::DecoderOnly {
        return Err(AppError::Usage(
            "spec-decode drives decoder_only models".into(),
        ));
    }
    let vocab = load_vocab(&spec, &args.model_spec)?;
    let ckpt = load_checkpoint(&spec, &args.weights, args.random_seed)?;
    let model =
        Model::from_checkpoint(&spec, &ckpt).map_err(|e| AppError::Runtime(e.to_string()))?;
    let mut target =
        EngineDist::new(Engine::new(model, 1)).map_err(|e| AppError::Runtime(e.to_string()))?;

    let acceptance = if args.accept == "strict" {
        Acceptance::Strict
    } else if let Some(k) = args.accept.strip_prefix("topk:") {
        Acceptance::TopK(
            k.parse()
                .map_err(|_| AppError::Usage(format!("bad top-k `{k}`")))?,
        )
    } else if let Some(p) = args.accept.strip_prefix("topp:") {
        Acceptance::TopP(
            p.parse()
                .map_err(|_| AppError::Usage(format!("bad top-p `{p}`")))?,
        )
    } else {
        return Err(AppError::Usage(format!(
            "unknown acceptance `{}` (strict | topk:<k> | topp:<p>)",
            args.accept
        )));
    };
    if args.lookahead == 0 {
        return Err(AppError::Usage("lookahead must be >= 1".into()));
    }

    let prompt_ids = vocab.encode(spec.tokenization_algorithm, &args.prompt);
    if prompt_ids.is_empty() {
        return Err(AppError::Usage("prompt encodes to zero tokens".into()));
    }
    let cfg = SpecConfig {
        lookahead: args.lookahead,
        acceptance,
        rng_seed: args.seed,
    };
    let mut draft: Box<dyn TokenDistribution> = if args.draft == "ngram" {
        Box::new(NGramDraft::new(2, spec.vocab_size))
    } else if let Some(path) = args.draft.strip_prefix("model:") {
        let dspec = load_spec(&PathBuf::from(path))?;
        if dspec.vocab_size != spec.vocab_size {
            return Err(AppError::Usage(format!(
                "draft vocab {} must match target vocab {}",
                dspec.vocab_size, spec.vocab_size
            )));
        }
        let dckpt = random_checkpoint(&dspec, args.random_seed);
        let dmodel =
            Model::from_checkpoint(&dspec, &dckpt).map_err(|e| AppError::Runtime(e.to_string()))?;
        Box::new(
            EngineDist::new(Engine::new(dmodel, 1))
                .map_err(|e| AppError::Runtime(e.to_string()))?,
        )
    } else {
        return Err(AppError::Usage(format!(
            "unknown draft `{}` (ngram | model:<spec>)",
            args.draft
        )));
    };

    let n_total = prompt_ids.len() + args.n_tokens;
    let (tokens, stats) =
        speculative_generate(&mut target, draft.as_mut(), &prompt_ids, n_total, &cfg)
            .map_err(|e| AppError::Runtime(e.to_string()))?;

    println!("command: spec-decode");
    println!(
        "draft: {} lookahead: {} accept: {} seed: {}",
        args.draft, args.lookahead, args.accept, args.seed
    );
    println!(
        "output-ids: {}",
        tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    println!("output-text: {}", vocab.decode(&tokens)?);
    println!(
        "acceptance: {}/{} r={:.2} bonus={} iterations={}",
        stats.accepted,
        stats.proposed,
        stats.rate(),
        stats.bonus,
        stats.iterations
    );
    let expected = estimate_speedup(
        stats.rate(),
        args.lookahead,
        args.t_draft,
        args.t_target,
        args.n_tokens,
    );
    let baseline = args.n_tokens as f64 * args.t_target;
    println!(
        "estimated-cost: {:.2} units (plain decoding {:.2}, ratio {:.2})",
        expected,
        baseline,
        baseline / expected
    );
    if !args.no_timing {
        println!("timing: {:.1} ms", started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(())
}
