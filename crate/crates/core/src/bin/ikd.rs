use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use ikd::calibration::{fit_platt, fit_temperature, CalibrationMap, PlattConfig};
use ikd::data::{encode_idx_images, encode_idx_labels, synth_digits, synth_multilabel, Dataset, Labels, PrevalenceProfile, DIGIT_SIDE};
use ikd::ikd::{
    compare_methods, dataset_logits, derive_seed, evaluate, prepare_data, run_ladder, train_teacher, write_manifest, write_run,
    LadderReport, Method, Metrics, RunData, TrainLog,
};
use ikd::model::{checkpoint_save, param_count, Model, Structure};
use ikd::report::{emit_prediction_bars, emit_reliability, emit_run_reports, load_model, load_report, parse_config, Format, RunConfig};

#[derive(Parser)]
#[command(name = "ikd", version, about = "Calibration-aware iterative knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic desk dataset (IDX digits or multi-label CSV) and a
    /// config fragment naming it.
    SynthData(SynthArgs),
    /// Train the baseline model M0.
    TrainTeacher(Common),
    /// Run the configured method for k chained steps.
    Ladder(LadderArgs),
    /// Run IKD and a calibrated variant over the same structures and seeds.
    Compare(LadderArgs),
    /// Fit a post-hoc calibration map on validation logits.
    Calibrate(ModelArgs),
    /// Accuracy, ECE and reliability bins on the test split.
    Evaluate(ModelArgs),
    /// Per-example class probabilities with SVG bar charts.
    Predict(PredictArgs),
    /// Re-emit tables and reliability CSVs from a run directory.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["ikd", "ikd+temp", "ikd+platt"])]
    method: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["csv", "md"])]
    format: Option<String>,
    /// Extra `key=value` overrides.
    #[arg(value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct LadderArgs {
    #[command(flatten)]
    common: Common,
    /// Use this checkpoint as M0 instead of training one.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    /// Calibration map (JSON) applied to the model's logits.
    #[arg(long)]
    map: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Test-split indices, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    examples: Vec<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding report.json.
    #[arg(long)]
    run: PathBuf,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Digits,
    Multilabel,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "digits")]
    kind: SynthKind,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    test_n: usize,
    /// Label count for multi-label data.
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Positive rate of the first and last label (multi-label).
    #[arg(long, num_args = 2, value_names = ["FIRST", "LAST"], default_values_t = [0.4, 0.05])]
    prevalence: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    push("seed", common.seed.map(|v| v.to_string()));
    push("method", common.method.clone());
    push("k", common.k.map(|v| v.to_string()));
    push("alpha", common.alpha.map(|v| v.to_string()));
    push("out", common.out.as_ref().map(|p| p.display().to_string()));
    push("format", common.format.clone());
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    let cfg = parse_config(common.config.as_deref(), &overrides).map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.ladder.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    for line in cfg.provenance_lines() {
        log::debug!("config {line}");
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run_data(cfg: &RunConfig) -> Result<RunData> {
    let (train, test, warnings) = cfg.load_datasets()?;
    for w in &warnings {
        warn!("{w}");
    }
    info!("{} training and {} test examples, {} classes", train.len(), test.len(), train.num_classes());
    let mut data = prepare_data(&train, test, &cfg.ladder)?;
    data.warnings.splice(0..0, warnings);
    Ok(data)
}

#[derive(Serialize)]
struct TeacherRecord<'a> {
    structure: &'a Structure,
    param_count: usize,
    train_log: &'a TrainLog,
    test: Metrics,
}

fn teacher(cfg: &RunConfig, data: &RunData) -> Result<Model> {
    let structure = cfg.teacher_for(&data.train);
    info!("training M0 ({} parameters)", param_count(&structure)?);
    let (m0, log) = train_teacher(&structure, data, &cfg.ladder)?;
    let test = evaluate(&m0, &data.test, None, cfg.ladder.n_bins)?;
    info!("M0 test accuracy {:.4}, ECE {:.4}", test.accuracy, test.ece);
    let record = TeacherRecord { structure: &m0.structure, param_count: m0.param_count(), train_log: &log, test };
    write_json(&cfg.out.join("teacher.json"), &record)?;
    Ok(m0)
}

fn train_teacher_cmd(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let data = run_data(&cfg)?;
    let m0 = teacher(&cfg, &data)?;
    let path = cfg.out.join("models/M0.ikdp");
    fs::create_dir_all(path.parent().expect("has parent"))?;
    checkpoint_save(&m0, &path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn sigma_1(cfg: &RunConfig, m0: &Model) -> Option<Structure> {
    let widths = cfg.sigma_1.as_ref()?;
    let mut s = m0.structure.clone();
    let mut it = widths.iter();
    for b in &mut s.blocks {
        match b {
            ikd::model::BlockSpec::Dense { width } => *width = *it.next().unwrap_or(width),
            ikd::model::BlockSpec::Conv { filters, .. } => *filters = *it.next().unwrap_or(filters),
            _ => {}
        }
    }
    Some(s)
}

fn ladder_cmd(args: &LadderArgs, paired: bool) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let data = run_data(&cfg)?;
    let m0 = match &args.teacher {
        Some(p) => load_model(p)?,
        None => teacher(&cfg, &data)?,
    };
    if m0.structure.num_classes != data.train.num_classes() {
        return Err(CliError::Usage(format!(
            "teacher has {} classes but the data has {}",
            m0.structure.num_classes,
            data.train.num_classes()
        )));
    }
    let s1 = sigma_1(&cfg, &m0);
    let (report, models) = if paired {
        compare_methods(&m0, s1.as_ref(), &data, &cfg.ladder)?
    } else {
        run_ladder(&m0, s1.as_ref(), &data, &cfg.ladder)?
    };
    write_run(&cfg.out, &report, &m0, &models)?;
    emit_run_reports(&cfg.out, &report, cfg.format)?;
    write_manifest(&cfg.out, &cfg.ladder)?;
    summarize(&report);
    info!("wrote {}", cfg.out.display());
    Ok(())
}

fn summarize(report: &LadderReport) {
    for run in &report.runs {
        for s in &run.steps {
            info!("{} {}: {}, accuracy {:.4}, ECE {:.4}", run.method, s.student_id, ikd::report::format_compression(s.compression), s.accuracy, s.ece);
        }
    }
}

fn load_map(path: &Path) -> Result<CalibrationMap> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn calibrate_cmd(args: &ModelArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let data = run_data(&cfg)?;
    let model = load_model(&args.model)?;
    let logits = dataset_logits(&model, &data.val)?;
    let (map, before, after) = match cfg.ladder.method {
        Method::Ikd => return Err(CliError::Usage("method ikd has no calibration map; pick ikd+temp or ikd+platt".into())),
        Method::IkdTemperature => {
            let fit = fit_temperature(&logits, &data.val.labels)?;
            for w in &fit.warnings {
                warn!("{w}");
            }
            info!("T = {:.4}", fit.t);
            (fit.map, fit.nll_before, fit.nll_after)
        }
        Method::IkdPlatt => {
            let fit = fit_platt(&logits, &data.val.labels, &PlattConfig::default())?;
            (fit.map, fit.nll_before, fit.nll_after)
        }
    };
    info!("validation NLL {before:.5} -> {after:.5}");
    let path = cfg.out.join("maps").join(format!("{}_{}.json", model.id, cfg.ladder.method));
    write_json(&path, &map)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn evaluate_cmd(args: &ModelArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let (_, test, _) = cfg.load_datasets()?;
    let model = load_model(&args.model)?;
    let map = args.map.as_deref().map(load_map).transpose()?;
    let metrics = evaluate(&model, &test.with_num_classes(model.structure.num_classes), map.as_ref(), cfg.ladder.n_bins)?;
    info!("{}: accuracy {:.4}, ECE {:.4}", model.id, metrics.accuracy, metrics.ece);
    write_json(&cfg.out.join("metrics.json"), &metrics)?;
    fs::create_dir_all(&cfg.out)?;
    emit_reliability(&metrics.bins, fs::File::create(cfg.out.join("reliability.csv"))?)?;
    Ok(())
}

fn predict_cmd(args: &PredictArgs) -> Result<()> {
    let m = &args.model;
    let cfg = resolve(&m.common)?;
    let (_, test, _) = cfg.load_datasets()?;
    let model = load_model(&m.model)?;
    if let Some(&bad) = args.examples.iter().find(|&&i| i >= test.len()) {
        return Err(CliError::Usage(format!("example {bad} is out of range for {} test examples", test.len())));
    }
    let map = m.map.as_deref().map(load_map).transpose()?;
    let test = test.with_num_classes(model.structure.num_classes);
    let paths = emit_prediction_bars(&cfg.out.join("predictions"), &model, &test, &args.examples, map.as_ref(), cfg.class_names.as_deref())?;
    info!("wrote {} files under {}", paths.len(), cfg.out.join("predictions").display());
    Ok(())
}

fn report_cmd(args: &ReportArgs) -> Result<()> {
    let report = load_report(&args.run)?;
    let out = args.out.as_ref().unwrap_or(&args.run);
    let format = match args.format {
        FormatArg::Csv => Format::Csv,
        FormatArg::Md => Format::Md,
    };
    emit_run_reports(out, &report, format)?;
    summarize(&report);
    Ok(())
}

fn write_csv_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = ds.feature_len();
    let c = ds.num_classes();
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).chain((0..c).map(|j| format!("y{j}"))).collect();
    w.write_record(&header)?;
    let Labels::MultiHot { labels, .. } = &ds.labels else { unreachable!("multi-label generator") };
    for (i, row) in labels.iter().enumerate() {
        let rec = ds.row(i).iter().map(f32::to_string).chain(row.iter().map(|&b| u8::from(b).to_string()));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn synth_cmd(args: &SynthArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let train_seed = derive_seed(args.seed, 1);
    let test_seed = derive_seed(args.seed, 2);
    let abs = |name: &str| -> Result<String> { Ok(fs::canonicalize(&args.out)?.join(name).display().to_string()) };
    let fragment = match args.kind {
        SynthKind::Digits => {
            for (name, n, seed) in [("train", args.n, train_seed), ("test", args.test_n, test_seed)] {
                let ds = synth_digits(n, seed);
                let pixels: Vec<u8> = ds.features.iter().map(|&v| (v * 255.0).round() as u8).collect();
                let Labels::Classes { labels, .. } = &ds.labels else { unreachable!("digit labels are classes") };
                let labels: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
                fs::write(args.out.join(format!("{name}-images.idx")), encode_idx_images(DIGIT_SIDE, DIGIT_SIDE, &pixels))?;
                fs::write(args.out.join(format!("{name}-labels.idx")), encode_idx_labels(&labels))?;
            }
            format!(
                "train_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}\n",
                abs("train-images.idx")?,
                abs("train-labels.idx")?,
                abs("test-images.idx")?,
                abs("test-labels.idx")?
            )
        }
        SynthKind::Multilabel => {
            let profile = PrevalenceProfile::Skewed { first: args.prevalence[0], last: args.prevalence[1] };
            for (name, n, seed) in [("train", args.n, train_seed), ("test", args.test_n, test_seed)] {
                let ds = synth_multilabel(n, args.classes, &profile, seed)?;
                write_csv_dataset(&ds, &args.out.join(format!("{name}.csv")))?;
            }
            format!(
                "train_csv = {}\ntest_csv = {}\nlabel_columns = {}\nteacher = dense:64,dense:32\n",
                abs("train.csv")?,
                abs("test.csv")?,
                args.classes
            )
        }
    };
    fs::write(args.out.join("data.cfg"), fragment)?;
    info!("wrote {}", args.out.join("data.cfg").display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth_cmd(a),
        Command::TrainTeacher(c) => train_teacher_cmd(c),
        Command::Ladder(a) => ladder_cmd(a, false),
        Command::Compare(a) => ladder_cmd(a, true),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
