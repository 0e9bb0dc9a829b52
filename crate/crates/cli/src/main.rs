use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use parconv_core::audio::{
    fit_frames, mel_power_spectrogram, save_spectrogram, wav, MelConfig, StftConfig,
};
use parconv_core::fog::{self, TaskSpec};
use parconv_core::net::{
    cost_report, load_model, save_model, DEFAULT_GROUP_SIZE, REFERENCE_STAGES,
};
use parconv_core::tensor::softmax;
use parconv_core::train::{self, DrumClass, Split, SynthConfig, TrainConfig, DEFAULT_GRAD_CLIP};
use parconv_core::{ConvKind, Error, Model, NetworkSpec, Result, Tensor};

#[derive(Parser, Debug)]
#[command(
    name = "parconv",
    version,
    about = "Drum-hit classification with a parallel-convolution CNN"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct Global {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// JSON object of flag values; flags given on the command line win.
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute the Mel power spectrogram of a WAV file.
    Featurize(FeaturizeArgs),
    /// Generate the synthetic 7-class drum dataset.
    SynthData(SynthArgs),
    /// Train a network on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Classify a single WAV file.
    Classify(ClassifyArgs),
    /// Analytic FLOP and parameter counts, standard vs parallel.
    Cost(CostArgs),
    /// Cloud vs fog placement latency.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct FeaturizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Crop or pad to this many frames.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    n_per_class: usize,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 1.5)]
    duration: f64,
    #[arg(long, default_value_t = 3)]
    min_strikes: usize,
    #[arg(long, default_value_t = 6)]
    max_strikes: usize,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for model.pcnn (best), last.pcnn and report.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f32,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 128)]
    frames: usize,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    g: usize,
    /// Divide every channel width by this factor (1 = full network).
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
    #[arg(long, value_enum, default_value_t = KindArg::Parallel)]
    conv: KindArg,
    #[arg(long)]
    patience: Option<usize>,
    /// Stop once validation accuracy reaches this value.
    #[arg(long)]
    target_accuracy: Option<f64>,
    /// Clip each minibatch gradient to this global L2 norm.
    #[arg(long, default_value_t = DEFAULT_GRAD_CLIP)]
    grad_clip: f32,
    /// Disable gradient clipping.
    #[arg(long)]
    no_grad_clip: bool,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindArg {
    Parallel,
    Standard,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct CostArgs {
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    g: usize,
    /// Mel bands x frames.
    #[arg(long, default_value = "128x128")]
    input: String,
}

#[derive(Args, Debug, Serialize, Deserialize)]
struct SimulateArgs {
    /// Device profile pack; the bundled four-device pack when omitted.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// One frame count, or a comma-separated list for a sweep.
    #[arg(long, default_value = "10")]
    frames: String,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Treat every transmission time as exactly its mean.
    #[arg(long)]
    no_jitter: bool,
    /// Time a checkpoint on this machine and add it as a fog device.
    #[arg(long)]
    calibrate: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    calibrate_repeats: usize,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// Overlays values from the config file onto `args` wherever the flag was
/// not given on the command line.
fn overlay<T: Serialize + for<'de> Deserialize<'de>>(
    args: &T,
    matches: &ArgMatches,
    file: &serde_json::Map<String, Value>,
) -> Result<T> {
    let mut value = serde_json::to_value(args)?;
    let obj = value
        .as_object_mut()
        .expect("argument structs serialize to objects");
    for (key, v) in file {
        let key = key.replace('-', "_");
        if !obj.contains_key(&key) {
            continue;
        }
        let from_cli = matches!(matches.value_source(&key), Some(ValueSource::CommandLine));
        if !from_cli {
            obj.insert(key, v.clone());
        }
    }
    serde_json::from_value(value).map_err(|e| usage(format!("config file: {e}")))
}

fn read_config(path: &Path) -> Result<serde_json::Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("reading config {}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text)? {
        Value::Object(m) => Ok(m),
        _ => Err(usage("config file must hold a JSON object")),
    }
}

fn apply_config(cli: Cli, matches: &ArgMatches) -> Result<Cli> {
    let Some(path) = cli.global.config.clone() else {
        return Ok(cli);
    };
    let file = read_config(&path)?;
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let mut global = overlay(&cli.global, matches, &file)?;
    global.config = Some(path);
    let command = match cli.command {
        Command::Featurize(a) => Command::Featurize(overlay(&a, sub, &file)?),
        Command::SynthData(a) => Command::SynthData(overlay(&a, sub, &file)?),
        Command::Train(a) => Command::Train(overlay(&a, sub, &file)?),
        Command::Eval(a) => Command::Eval(overlay(&a, sub, &file)?),
        Command::Classify(a) => Command::Classify(overlay(&a, sub, &file)?),
        Command::Cost(a) => Command::Cost(overlay(&a, sub, &file)?),
        Command::Simulate(a) => Command::Simulate(overlay(&a, sub, &file)?),
    };
    Ok(Cli { global, command })
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn featurize(g: &Global, a: &FeaturizeArgs) -> Result<()> {
    let audio = wav::read_wav(&a.input)?;
    let mut spec = mel_power_spectrogram(&audio, &StftConfig::default(), &MelConfig::default())?;
    if let Some(frames) = a.frames {
        if frames == 0 {
            return Err(usage("--frames must be positive"));
        }
        spec = fit_frames(&spec, frames);
    }
    let sidecar_path = save_spectrogram(&spec, &a.out)?;
    if g.json {
        print_json(&spec.sidecar())
    } else {
        println!(
            "wrote {} ({} x {}), sidecar {}",
            a.out.display(),
            spec.n_mels(),
            spec.n_frames(),
            sidecar_path.display()
        );
        Ok(())
    }
}

fn synth_data(g: &Global, a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        duration_secs: a.duration,
        strikes: (a.min_strikes, a.max_strikes),
        ..SynthConfig::new(a.n_per_class, g.seed)
    };
    if !(cfg.duration_secs.is_finite() && cfg.duration_secs > 0.0) {
        return Err(usage("--duration must be positive"));
    }
    let manifest = train::synthesize_toy_dataset(&cfg, &a.out)?;
    let manifest_path = a.out.join("manifest.jsonl");
    if g.json {
        print_json(&json!({ "manifest": manifest_path, "classes": manifest.summary() }))
    } else {
        println!(
            "wrote {} clips, manifest {}",
            manifest.entries.len(),
            manifest_path.display()
        );
        Ok(())
    }
}

fn network_for(a: &TrainArgs) -> Result<NetworkSpec> {
    if a.width_divisor == 0 {
        return Err(usage("--width-divisor must be positive"));
    }
    let stages: Vec<Vec<usize>> = REFERENCE_STAGES
        .iter()
        .map(|s| s.iter().map(|&c| (c / a.width_divisor).max(1)).collect())
        .collect();
    let refs: Vec<&[usize]> = stages.iter().map(Vec::as_slice).collect();
    let kind = match a.conv {
        KindArg::Parallel => ConvKind::Parallel,
        KindArg::Standard => ConvKind::Standard,
    };
    NetworkSpec::from_stages(
        &refs,
        kind,
        a.g,
        [1, MelConfig::default().n_mels, a.frames],
        DrumClass::COUNT,
    )
}

fn train_cmd(g: &Global, a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        momentum: a.momentum,
        seed: g.seed,
        target_frames: a.frames,
        patience: a.patience,
        target_val_accuracy: a.target_accuracy,
        grad_clip_norm: (!a.no_grad_clip).then_some(a.grad_clip),
    };
    cfg.validate()?;
    let spec = network_for(a)?;
    let manifest = train::load_dataset(&a.manifest)?;
    for (class, [tr, va]) in manifest.summary() {
        eprintln!("{class:<11} train {tr:>4}  val {va:>4}");
    }
    let train_set = train::featurize_entries(&manifest.split(Split::Train), a.frames)?;
    let val_set = train::featurize_entries(&manifest.split(Split::Val), a.frames)?;
    let model = Model::build(&spec, g.seed)?;
    eprintln!("{} parameters", model.num_parameters());
    let out = train::train_with_progress(model, &train_set, &val_set, &cfg, |m| {
        eprintln!(
            "epoch {:>3}  train loss {:.4}  acc {:.3}  val loss {:.4}  acc {:.3}",
            m.epoch, m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy
        )
    })?;
    std::fs::create_dir_all(&a.out)
        .map_err(|e| usage(format!("creating {}: {e}", a.out.display())))?;
    save_model(&out.best, a.out.join("model.pcnn"))?;
    save_model(&out.last, a.out.join("last.pcnn"))?;
    let report = out.report.to_json();
    std::fs::write(a.out.join("report.json"), &report)
        .map_err(|e| usage(format!("writing report: {e}")))?;
    if g.json {
        println!("{report}");
    } else {
        println!(
            "best epoch {} val accuracy {:.4}; checkpoint {}",
            out.report.best_epoch,
            out.report.best_val_accuracy,
            a.out.join("model.pcnn").display()
        );
    }
    Ok(())
}

fn eval_cmd(g: &Global, a: &EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let model = load_model(&a.model)?;
    let manifest = train::load_dataset(&a.manifest)?;
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::Split(format!("split {} has no entries", a.split)));
    }
    let set = train::featurize_entries(&entries, model.spec().input_shape[2])?;
    let ev = train::evaluate(&model, &set)?;
    if g.json {
        return print_json(&ev);
    }
    println!(
        "top-1 accuracy {:.4} ({} examples)",
        ev.top1_accuracy, ev.total
    );
    print!("{:<11}", "true\\pred");
    for c in DrumClass::ALL {
        print!("{:>11}", c.name());
    }
    println!();
    for (i, row) in ev.confusion.iter().enumerate() {
        print!(
            "{:<11}",
            DrumClass::from_index(i).map(|c| c.name()).unwrap_or("?")
        );
        for v in row {
            print!("{v:>11}");
        }
        println!();
    }
    Ok(())
}

fn classify(g: &Global, a: &ClassifyArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let [c, h, w] = model.spec().input_shape;
    if c != 1 || h != MelConfig::default().n_mels || model.num_classes() != DrumClass::COUNT {
        return Err(Error::Shape(format!(
            "checkpoint expects a {c}x{h}x{w} input with {} classes",
            model.num_classes()
        )));
    }
    let audio = wav::read_wav(&a.input)?;
    let features = train::featurize_audio(&audio, w)?;
    let logits = model.predict(&Tensor::new(vec![1, c, h, w], features)?)?;
    let probs = softmax(&logits)?.into_data();
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("classify"));
    }
    let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
    let label = DrumClass::from_index(best).expect("model has seven outputs");
    if g.json {
        return print_json(&json!({ "label": label.name(), "probs": probs }));
    }
    println!("{label} ({:.4})", probs[best]);
    for (cls, p) in DrumClass::ALL.iter().zip(&probs) {
        println!("  {:<11} {p:.4}", cls.name());
    }
    Ok(())
}

fn parse_input_dims(s: &str) -> Result<(usize, usize)> {
    let err = || usage(format!("--input must look like 128x128, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(err)?;
    let h: usize = h.trim().parse().map_err(|_| err())?;
    let w: usize = w.trim().parse().map_err(|_| err())?;
    if h == 0 || w == 0 {
        return Err(err());
    }
    Ok((h, w))
}

fn cost(g: &Global, a: &CostArgs) -> Result<()> {
    let (h, w) = parse_input_dims(&a.input)?;
    let spec = NetworkSpec::from_stages(
        &REFERENCE_STAGES,
        ConvKind::Parallel,
        a.g,
        [1, h, w],
        DrumClass::COUNT,
    )?;
    let report = cost_report(&spec)?;
    if g.json {
        print_json(&report)
    } else {
        print!("{}", report.to_table());
        Ok(())
    }
}

fn parse_frames(s: &str) -> Result<Vec<u32>> {
    let frames: Vec<u32> = s
        .split(',')
        .map(|f| {
            f.trim()
                .parse::<u32>()
                .map_err(|_| usage(format!("bad frame count {f:?}")))
        })
        .collect::<Result<_>>()?;
    if frames.is_empty() || frames.contains(&0) {
        return Err(usage("frame counts must be positive"));
    }
    Ok(frames)
}

fn simulate(g: &Global, a: &SimulateArgs) -> Result<()> {
    let mut profiles = match &a.profiles {
        Some(p) => fog::load_profiles(p)?,
        None => fog::default_profiles(),
    };
    if let Some(ckpt) = &a.calibrate {
        let model = load_model(ckpt)?;
        let [c, h, w] = model.spec().input_shape;
        let m = fog::measure_local(
            &model,
            &Tensor::zeros(vec![1, c, h, w]),
            a.calibrate_repeats,
        )?;
        eprintln!(
            "local forward pass: {:.2} ms mean, {:.2} ms std over {} runs",
            m.mean_ms, m.std_ms, m.repeats
        );
        profiles.push(m.to_profile("local", w as u32)?);
    }
    if a.no_jitter {
        profiles.iter_mut().for_each(|p| p.t_time_jitter_ms = 0.0);
    }
    let frames = parse_frames(&a.frames)?;
    if frames.len() > 1 {
        let sweep = fog::sweep_frames(&profiles, &frames, g.seed, a.trials)?;
        return if g.json {
            print_json(&sweep)
        } else {
            print!("{}", sweep.to_table());
            Ok(())
        };
    }
    let task = TaskSpec::new(frames[0])?;
    let ranked = fog::rank_placements(&profiles, &task, g.seed, a.trials)?;
    if g.json {
        return print_json(&ranked);
    }
    println!("{} frames, {} trials", task.n_frames, a.trials);
    println!(
        "{:<4} {:<16} {:<6} {:>12} {:>12} {:>12}",
        "rank", "device", "tier", "mean ms", "min ms", "max ms"
    );
    for (i, p) in ranked.iter().enumerate() {
        let tier = serde_json::to_value(p.tier)?
            .as_str()
            .unwrap_or("")
            .to_string();
        println!(
            "{:<4} {:<16} {:<6} {:>12.2} {:>12.2} {:>12.2}",
            i + 1,
            p.device_id,
            tier,
            p.mean_total_ms,
            p.min_total_ms,
            p.max_total_ms
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Featurize(a) => featurize(g, a),
        Command::SynthData(a) => synth_data(g, a),
        Command::Train(a) => train_cmd(g, a),
        Command::Eval(a) => eval_cmd(g, a),
        Command::Classify(a) => classify(g, a),
        Command::Cost(a) => cost(g, a),
        Command::Simulate(a) => simulate(g, a),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("PARCONV_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        usage(format!(
            "PARCONV_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("thread pool: {e}")))
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_input_error() {
        ExitCode::from(2)
    } else {
        ExitCode::from(3)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let result = Ok(cli)
        .and_then(|cli| init_threads().and_then(|_| apply_config(cli, &matches)))
        .and_then(|cli| run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
