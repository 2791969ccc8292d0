use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use snn_core::detection::write_coco_json;
use snn_core::encoding::EncoderConfig;
use snn_core::event_io::{
    build_classification_dataset, generate_synthetic_scene, read_events, slice_time, write_events, write_npy_boxes,
    DatasetConfig, SyntheticSceneSpec,
};
use snn_core::metrics::{count_ops, format_table, ResultRow};
use snn_core::pipeline::{
    encode_to, evaluate_classifier, evaluate_detector, inference_network, load_gen1_recordings, load_task_data,
    run_ablation, run_experiment, save_outcome, AblationAxis, ArchConfig, BarTaskConfig, DataSource, PipelineError,
    SquaresTaskConfig, Task, TaskData, TrainConfig,
};
use snn_core::spiking::{BnPlacement, ConvMode, Network, NeuronKind, SmallCnnConfig};
use snn_core::autograd::load_checkpoint;

/// Exit code used when training aborts on a non-finite loss.
const NAN_EXIT: u8 = 3;

#[derive(Parser)]
#[command(name = "snn", version, about = "Event encoding, spiking network training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode an event file into a binary voxel cube dump.
    Encode(EncodeArgs),
    /// Cut classification samples out of annotated recordings.
    DatasetGen(DatasetGenArgs),
    /// Render a synthetic scene to events and boxes.
    Synth(SynthArgs),
    /// Train a network and write its checkpoint and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a config.
    Eval(EvalArgs),
    /// Print parameter and ACC counts of architectures.
    Count(CountArgs),
    /// Train one run per value of an ablation axis.
    Ablate(AblateArgs),
    /// Write the layer graph of an architecture as JSON.
    ExportArch(ExportArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Bitwise reproducible runs (the default).
    #[arg(long)]
    deterministic: Option<bool>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON training config. Without it a default config is built from
    /// `--task` and `--arch`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    micro_bins: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    pretrained: Option<String>,
    /// Any other field, as `dotted.path=value`; the value is parsed as JSON
    /// and taken as a string when that fails. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Detection,
}

#[derive(Args)]
struct EncodeArgs {
    /// `.evt`, `.evb` or `.dat` event file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    start_us: u64,
    #[arg(long, default_value_t = 100_000)]
    duration_us: u64,
    #[arg(long, default_value_t = 5)]
    timesteps: usize,
    #[arg(long, default_value_t = 2)]
    micro_bins: usize,
    /// Output grid; the sensor size when absent.
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DatasetGenArgs {
    /// Directory of `<name>_td.dat` recordings with `<name>_bbox.npy` boxes.
    #[arg(long)]
    recordings: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    window_us: u64,
    #[arg(long)]
    no_rebalance: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description in JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Event file extension: `evt` or `evb`.
    #[arg(long, default_value = "evt")]
    format: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Train this many consecutive seeds and keep the best.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Keep batch norms separate at inference.
    #[arg(long)]
    unfused: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct CountArgs {
    /// Architecture names, e.g. `vgg11 mobilenet-64 ssd-densenet121-24`.
    #[arg(required = true)]
    arch: Vec<String>,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    micro_bins: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, value_enum, default_value = "dwsep")]
    conv_mode: ConvArg,
    /// Also write the reports as JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConvArg {
    Dwsep,
    Normal,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated values: `1x1,5x2` for time bins, `pre,post,none`,
    /// `plif,lif` or `dwsep,normal`.
    #[arg(long)]
    values: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    TimeBins,
    Bn,
    Neuron,
    Conv,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    arch: String,
    #[arg(long, default_value_t = 2)]
    micro_bins: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, value_enum, default_value = "dwsep")]
    conv_mode: ConvArg,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<PipelineError>(), Some(PipelineError::NanLoss { .. })) {
                ExitCode::from(NAN_EXIT)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Encode(a) => encode(a),
        Cmd::DatasetGen(a) => dataset_gen(a),
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Count(a) => count(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::ExportArch(a) => export_arch(a),
    }
}

fn encode(a: EncodeArgs) -> Result<()> {
    let stream = read_events(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let window = slice_time(&stream, a.start_us, a.start_us + a.duration_us);
    let enc = EncoderConfig {
        duration_us: a.duration_us,
        timesteps: a.timesteps,
        micro_bins: a.micro_bins,
        height: a.height.unwrap_or(stream.height as usize),
        width: a.width.unwrap_or(stream.width as usize),
    };
    let cube = encode_to(&window, &enc)?;
    fs::write(&a.out, cube.to_dump())?;
    println!(
        "{} events -> {}x{}x{}x{} cube, {} set cells",
        window.len(),
        cube.channels,
        cube.timesteps,
        cube.height,
        cube.width,
        cube.count_nonzero()
    );
    Ok(())
}

fn dataset_gen(a: DatasetGenArgs) -> Result<()> {
    let recs = load_gen1_recordings(&a.recordings, "", None)?;
    let cfg = DatasetConfig {
        window_us: a.window_us,
        rebalance: !a.no_rebalance,
        seed: a.common.seed.unwrap_or(0),
    };
    let samples = build_classification_dataset(&recs, &cfg)?;
    fs::create_dir_all(&a.common.out)?;
    let mut index = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let file = format!("sample_{i:06}.evb");
        write_events(a.common.out.join(&file), &s.stream)?;
        index.push(serde_json::json!({
            "file": file,
            "label": s.label,
            "duration_us": s.duration,
            "short_window": s.short_window,
            "flipped": s.flipped,
            "recording": s.recording,
            "box_index": s.box_index,
        }));
    }
    fs::write(a.common.out.join("labels.json"), serde_json::to_string_pretty(&index)?)?;
    println!("{} samples from {} recordings", samples.len(), recs.len());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec)?;
    let mut spec: SyntheticSceneSpec = serde_json::from_str(&text).context("parsing scene spec")?;
    if let Some(seed) = a.common.seed {
        spec.seed = seed;
    }
    let (stream, boxes) = generate_synthetic_scene(&spec)?;
    fs::create_dir_all(&a.common.out)?;
    let ext = match a.format.as_str() {
        "evt" | "evb" => a.format.as_str(),
        other => bail!("unknown event format '{other}'"),
    };
    write_events(a.common.out.join(format!("events.{ext}")), &stream)?;
    fs::write(a.common.out.join("boxes.npy"), write_npy_boxes(&boxes))?;
    println!("{} events, {} boxes", stream.len(), boxes.len());
    Ok(())
}

/// Default config for a task when none is given on the command line.
fn default_config(task: Task, arch: Option<&str>) -> Result<TrainConfig> {
    Ok(match task {
        Task::Classification => {
            let arch = match arch {
                Some(a) => ArchConfig::from_name(a)?,
                None => ArchConfig::SmallCnn(SmallCnnConfig::default()),
            };
            TrainConfig::new(task, arch, DataSource::Bars(BarTaskConfig::default()))
        }
        Task::Detection => {
            let arch = match arch {
                Some(a) => ArchConfig::from_name(a)?,
                None => ArchConfig::from_name("ssd-densenet121-24")?,
            };
            TrainConfig::new(task, arch, DataSource::Squares(SquaresTaskConfig::default()))
        }
    })
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("'{path}': '{p}' is not inside an object"))?;
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), value);
            return Ok(());
        }
        node = obj.entry((*p).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn resolve_config(c: &ConfigArgs, common: &Common) -> Result<TrainConfig> {
    let mut v: Value = match &c.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
            .context("parsing config")?,
        None => {
            let task = match c.task {
                Some(TaskArg::Detection) => Task::Detection,
                _ => Task::Classification,
            };
            serde_json::from_str(&default_config(task, c.arch.as_deref())?.to_json())?
        }
    };
    if c.config.is_some() {
        if let Some(a) = &c.arch {
            v["arch"] = serde_json::to_value(ArchConfig::from_name(a)?)?;
        }
    }
    let mut put = |k: &str, val: Option<Value>| {
        if let Some(val) = val {
            v[k] = val;
        }
    };
    put("timesteps", c.timesteps.map(Value::from));
    put("micro_bins", c.micro_bins.map(Value::from));
    put("height", c.height.map(Value::from));
    put("width", c.width.map(Value::from));
    put("epochs", c.epochs.map(Value::from));
    put("batch_size", c.batch_size.map(Value::from));
    put("lr0", c.lr0.map(Value::from));
    put("weight_decay", c.weight_decay.map(Value::from));
    put("pretrained", c.pretrained.clone().map(Value::from));
    put("seed", common.seed.map(Value::from));
    put("deterministic", common.deterministic.map(Value::from));
    for s in &c.sets {
        let (path, raw) = s.split_once('=').with_context(|| format!("expected PATH=VALUE, got '{s}'"))?;
        let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut v, path, val)?;
    }
    Ok(TrainConfig::from_json(&v.to_string())?)
}

fn train(a: TrainArgs) -> Result<()> {
    let base = resolve_config(&a.cfg, &a.common)?;
    let mut best = None;
    let mut sweep = Vec::new();
    for k in 0..a.seeds.max(1) {
        let mut cfg = base.clone();
        cfg.seed = base.seed + k;
        let outcome = run_experiment(&cfg)?;
        let metric = outcome.manifest.final_metric.unwrap_or(f64::NEG_INFINITY);
        println!(
            "seed {}: {} {:.4}, {:.1}s",
            cfg.seed,
            outcome.manifest.metric_name,
            metric,
            outcome.manifest.wall_clock_s
        );
        sweep.push(serde_json::json!({ "seed": cfg.seed, "metric": outcome.manifest.final_metric }));
        if best.as_ref().is_none_or(|(m, _)| metric > *m) {
            best = Some((metric, outcome));
        }
    }
    let (_, outcome) = best.expect("at least one seed");
    save_outcome(&outcome, &a.common.out)?;
    if a.seeds > 1 {
        fs::write(a.common.out.join("seed_sweep.json"), serde_json::to_string_pretty(&sweep)?)?;
    }
    let m = &outcome.manifest;
    let row = ResultRow {
        model: m.network.clone(),
        params: m.counts.params,
        accs_per_timestep: m.counts.accs_per_timestep,
        metric: m.final_metric,
        sparsity: m.sparsity.as_ref().map(|s| s.global_rate),
    };
    print!("{}", format_table(&[row], &m.metric_name));
    println!("wrote {}", a.common.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg, &a.common)?;
    let ckpt = load_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let net = Network::from_checkpoint(&ckpt)?;
    let net = inference_network(&net, !a.unfused)?;
    let counts = count_ops(net.spec(), cfg.height, cfg.width)?;
    fs::create_dir_all(&a.common.out)?;
    let (name, metric, report) = match load_task_data(&cfg)? {
        TaskData::Classification(_, test) => {
            let e = evaluate_classifier(&net, &test, cfg.batch_size)?;
            let report = serde_json::json!({
                "accuracy": e.accuracy,
                "predictions": e.predictions,
                "sparsity": e.sparsity,
                "counts": counts,
            });
            ("accuracy", e.accuracy, report)
        }
        TaskData::Detection(_, test) => {
            let e = evaluate_detector(&net, &test, &cfg)?;
            fs::write(a.common.out.join("detections.json"), write_coco_json(&e.detections))?;
            let report = serde_json::json!({
                "map": e.map,
                "sparsity": e.sparsity,
                "counts": counts,
            });
            ("mAP@0.5", e.map.map50, report)
        }
    };
    fs::write(a.common.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let row = ResultRow {
        model: net.spec().name.clone(),
        params: counts.params,
        accs_per_timestep: counts.accs_per_timestep,
        metric: Some(metric),
        sparsity: report["sparsity"]["global_rate"].as_f64(),
    };
    print!("{}", format_table(&[row], name));
    Ok(())
}

fn conv_mode(c: ConvArg) -> ConvMode {
    match c {
        ConvArg::Dwsep => ConvMode::Dwsep,
        ConvArg::Normal => ConvMode::Normal,
    }
}

fn arch_config(name: &str, micro_bins: usize, mode: ConvArg) -> Result<TrainConfig> {
    let arch = ArchConfig::from_name(name)?;
    let task = if matches!(arch, ArchConfig::Detector(_)) {
        Task::Detection
    } else {
        Task::Classification
    };
    let mut cfg = default_config(task, Some(name))?;
    cfg.micro_bins = micro_bins;
    cfg.ablation.conv_mode = conv_mode(mode);
    Ok(cfg)
}

fn count(a: CountArgs) -> Result<()> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for name in &a.arch {
        let cfg = arch_config(name, a.micro_bins, a.conv_mode)?;
        let spec = cfg.build_spec(a.classes)?;
        let train_form = count_ops(&spec, a.height, a.width)?;
        let inf = inference_network(&Network::new(spec, 0)?, true)?;
        let inf_form = count_ops(inf.spec(), a.height, a.width)?;
        rows.push(ResultRow {
            model: format!("{} (train)", cfg.arch.label()),
            params: train_form.params,
            accs_per_timestep: train_form.accs_per_timestep,
            metric: None,
            sparsity: None,
        });
        rows.push(ResultRow {
            model: format!("{} (inference)", cfg.arch.label()),
            params: inf_form.params,
            accs_per_timestep: inf_form.accs_per_timestep,
            metric: None,
            sparsity: None,
        });
        reports.push(serde_json::json!({ "arch": name, "train": train_form, "inference": inf_form }));
    }
    println!(
        "input {}x{}x{}; params count conv weights, biases and PLIF leaks; ACCs count conv accumulates plus one per neuron",
        2 * a.micro_bins,
        a.height,
        a.width
    );
    print!("{}", format_table(&rows, "-"));
    if let Some(path) = a.json {
        fs::write(path, serde_json::to_string_pretty(&reports)?)?;
    }
    Ok(())
}

fn parse_list<T>(values: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    values.split(',').map(|v| f(v.trim())).collect()
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg, &a.common)?;
    let axis = match a.axis {
        AxisArg::TimeBins => AblationAxis::TimeBins(parse_list(&a.values, |v| {
            let (t, n) = v.split_once('x').with_context(|| format!("expected TxN, got '{v}'"))?;
            Ok((t.parse()?, n.parse()?))
        })?),
        AxisArg::Bn => AblationAxis::BnPlacement(parse_list(&a.values, |v| {
            Ok(match v {
                "pre" => BnPlacement::Pre,
                "post" => BnPlacement::Post,
                "none" => BnPlacement::None,
                _ => bail!("unknown bn placement '{v}'"),
            })
        })?),
        AxisArg::Neuron => AblationAxis::Neuron(parse_list(&a.values, |v| {
            Ok(match v {
                "plif" => NeuronKind::Plif,
                "lif" => NeuronKind::Lif,
                _ => bail!("unknown neuron '{v}'"),
            })
        })?),
        AxisArg::Conv => AblationAxis::ConvMode(parse_list(&a.values, |v| {
            Ok(match v {
                "dwsep" => ConvMode::Dwsep,
                "normal" => ConvMode::Normal,
                _ => bail!("unknown conv mode '{v}'"),
            })
        })?),
    };
    let table = run_ablation(&cfg, &axis)?;
    fs::create_dir_all(&a.common.out)?;
    fs::write(a.common.out.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    print!("{}", table.to_text());
    Ok(())
}

fn export_arch(a: ExportArgs) -> Result<()> {
    let cfg = arch_config(&a.arch, a.micro_bins, a.conv_mode)?;
    let json = cfg.build_spec(a.classes)?.to_json();
    match a.out {
        Some(p) => write_text(&p, &json),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
