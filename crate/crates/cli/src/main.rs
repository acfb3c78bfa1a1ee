use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use moduleport::align::{align_batch, AlignmentReport};
use moduleport::parallel::threads_from_env;
use moduleport::toy::{
    build_pair, capture_samples, run_experiment, task_for, train_options_for, train_peft, ExperimentConfig, Mode, Role,
    ToyModel, TrainingLog,
};
use moduleport::{
    apply_alignment, plan_layers, read_container, realize_plan, transfer_detailed, write_container, DType, LayerStrategy,
    PeftKind, PeftModuleSet, SampleBatch, TensorContainer,
};

/// Moves Adapter and LoRA modules from a teacher checkpoint into a shallower or narrower student.
#[derive(Debug, Parser)]
#[command(name = "moduleport", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reduce a module container to fewer layers (SKIP or AVG).
    MapLayers(MapLayersArgs),
    /// Prune and reorder modules into a narrower hidden space using matched samples.
    Align(AlignArgs),
    /// Layer mapping plus, when widths differ, alignment in one step.
    Transfer(TransferArgs),
    /// Toy teacher/student models for end-to-end checks.
    #[command(subcommand)]
    Toy(ToyCommand),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Skip,
    Avg,
}

impl From<StrategyArg> for LayerStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Skip => LayerStrategy::Skip,
            StrategyArg::Avg => LayerStrategy::Avg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Debug, Args)]
struct LayerArgs {
    /// How teacher layers are reduced: keep one per group (skip) or average each group (avg).
    #[arg(long, value_enum, default_value = "skip")]
    strategy: StrategyArg,
    /// Number of student layers; must divide the teacher layer count. Defaults to the teacher's.
    #[arg(long)]
    student_layers: Option<usize>,
    /// Which layer of each group SKIP keeps. Defaults to the last one.
    #[arg(long)]
    skip_offset: Option<usize>,
}

#[derive(Debug, Args)]
struct MapLayersArgs {
    /// Teacher module container.
    #[arg(long)]
    modules: PathBuf,
    #[command(flatten)]
    layers: LayerArgs,
    /// Output module container.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Also write the report as canonical JSON to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Standard output format.
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Debug, Args)]
struct AlignArgs {
    /// Module container whose width equals the samples' teacher width.
    #[arg(long)]
    modules: PathBuf,
    /// Sample container with layer_{l}/student and layer_{l}/teacher tensors.
    #[arg(long)]
    samples: PathBuf,
    /// Output module container.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    report: ReportArgs,
}

#[derive(Debug, Args)]
struct TransferArgs {
    /// Teacher module container (a toy model container also works).
    #[arg(long)]
    modules: PathBuf,
    #[command(flatten)]
    layers: LayerArgs,
    /// Alignment samples; required when the student is narrower than the teacher.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Student hidden size. Defaults to the samples' student width, else the teacher width.
    #[arg(long)]
    student_dim: Option<usize>,
    /// Output module container.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    report: ReportArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Matching,
    Incompatible,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PeftArg {
    Adapter,
    Lora,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RoleArg {
    Teacher,
    Student,
}

#[derive(Debug, Args)]
struct ToyConfigArgs {
    /// Experiment configuration (JSON). Unset fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Override the configured module kind.
    #[arg(long, value_enum)]
    peft: Option<PeftArg>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum ToyCommand {
    /// Build a teacher and a student base model.
    Build {
        #[command(flatten)]
        config: ToyConfigArgs,
        /// Output teacher model container.
        #[arg(long)]
        teacher_out: PathBuf,
        /// Output student model container.
        #[arg(long)]
        student_out: PathBuf,
    },
    /// Train a model's PEFT modules and head on the configured task.
    Train {
        #[command(flatten)]
        config: ToyConfigArgs,
        /// Model container to train.
        #[arg(long)]
        model: PathBuf,
        /// Picks the epoch count and batch order.
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Replace the model's modules with these before training.
        #[arg(long)]
        init_modules: Option<PathBuf>,
        /// Output model container.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Capture matched hidden states from a teacher and a student model.
    Capture {
        #[command(flatten)]
        config: ToyConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Layer strategy that pairs student layers with teacher layers.
        #[arg(long, value_enum, default_value = "skip")]
        strategy: StrategyArg,
        /// Token rows to capture; defaults to the configured num_samples.
        #[arg(long)]
        num_samples: Option<usize>,
        /// Output sample container.
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher training, transfer and baseline comparison over several seeds.
    Experiment {
        #[command(flatten)]
        config: ToyConfigArgs,
        /// Number of seeds, starting at the configured seed.
        #[arg(long)]
        seeds: Option<usize>,
        /// Write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Standard output format.
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

/// A problem with how the command was invoked, as opposed to with the data.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<moduleport::Error>() {
        Some(e) if e.is_usage() => 1,
        _ => 2,
    }
}

/// Checks every input exists and every output can be created without touching an input.
fn check_paths(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    let mut seen = Vec::new();
    for p in inputs {
        if !p.is_file() {
            return Err(usage(format!("input file {} does not exist", p.display())));
        }
        seen.push(fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))?);
    }
    for p in outputs {
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(usage(format!("output directory {} does not exist", parent.display())));
        }
        if p.is_dir() {
            return Err(usage(format!("output path {} is a directory", p.display())));
        }
        if let Ok(c) = fs::canonicalize(p) {
            if seen.contains(&c) {
                return Err(usage(format!("output {} would overwrite an input", p.display())));
            }
            seen.push(c);
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<TensorContainer> {
    read_container(path).with_context(|| format!("reading {}", path.display()))
}

fn write(c: &TensorContainer, path: &Path) -> Result<()> {
    write_container(c, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_modules(path: &Path) -> Result<(PeftModuleSet, DType)> {
    let c = read(path)?;
    let set = PeftModuleSet::from_container(&c).with_context(|| format!("loading modules from {}", path.display()))?;
    Ok((set, c.common_dtype().unwrap_or(DType::F32)))
}

fn write_report(json: &str, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, json).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn plan_for(teacher_layers: usize, args: &LayerArgs) -> Result<moduleport::LayerMapPlan> {
    let student = args.student_layers.unwrap_or(teacher_layers);
    let offset = args
        .skip_offset
        .unwrap_or_else(|| moduleport::default_skip_offset(teacher_layers, student));
    Ok(plan_layers(teacher_layers, student, args.strategy.into(), offset)?)
}

fn describe(set: &PeftModuleSet) -> String {
    let inner = match set.kind() {
        PeftKind::Adapter => "bottleneck",
        PeftKind::Lora => "rank",
    };
    format!("{} layers of {} modules, width {}, {inner} {}", set.num_layers(), set.kind(), set.d_model(), set.inner_dim())
}

fn emit_alignment(report: &AlignmentReport, args: &ReportArgs) -> Result<()> {
    let json = report.to_json();
    write_report(&json, args.report.as_deref())?;
    match args.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Json => println!("{json}"),
    }
    Ok(())
}

fn cmd_map_layers(args: &MapLayersArgs) -> Result<()> {
    check_paths(&[&args.modules], &[&args.out])?;
    let (teacher, dtype) = read_modules(&args.modules)?;
    let plan = plan_for(teacher.num_layers(), &args.layers)?;
    let out = realize_plan(&teacher, &plan)?;
    write(&out.to_container(dtype)?, &args.out)?;
    println!("{} {:?} -> {}", plan.strategy(), plan.groups(), describe(&out));
    Ok(())
}

fn cmd_align(args: &AlignArgs, threads: usize) -> Result<()> {
    check_paths(&[&args.modules, &args.samples], &[&args.out])?;
    let (modules, dtype) = read_modules(&args.modules)?;
    let batch = SampleBatch::from_container(&read(&args.samples)?)
        .with_context(|| format!("loading samples from {}", args.samples.display()))?;
    if batch.num_layers() != modules.num_layers() {
        return Err(moduleport::Error::LayerCountMismatch { expected: modules.num_layers(), got: batch.num_layers() }.into());
    }
    if batch.d_student() > modules.d_model() {
        return Err(moduleport::Error::StudentWiderThanTeacher { student: batch.d_student(), teacher: modules.d_model() }.into());
    }
    if batch.d_teacher() != modules.d_model() {
        return Err(moduleport::Error::DimensionMismatch {
            op: "align: sample teacher width vs module width",
            left: (batch.num_samples(), batch.d_teacher()),
            right: (modules.num_layers(), modules.d_model()),
        }
        .into());
    }
    let alignments = align_batch(&batch, threads)?;
    let maps: Vec<_> = alignments.iter().map(|a| a.solution.clone()).collect();
    let out = apply_alignment(&modules, &maps, batch.d_student())?;
    write(&out.to_container(dtype)?, &args.out)?;
    emit_alignment(&AlignmentReport::from_alignments(&batch, &alignments), &args.report)
}

fn cmd_transfer(args: &TransferArgs, threads: usize) -> Result<()> {
    let mut inputs = vec![args.modules.as_path()];
    inputs.extend(args.samples.as_deref());
    check_paths(&inputs, &[&args.out])?;
    let (teacher, dtype) = read_modules(&args.modules)?;
    let samples = match &args.samples {
        Some(p) => Some(
            SampleBatch::from_container(&read(p)?).with_context(|| format!("loading samples from {}", p.display()))?,
        ),
        None => None,
    };
    let layer_default = samples.as_ref().map(|s| s.plan().student_layers());
    let layers = LayerArgs { student_layers: args.layers.student_layers.or(layer_default), ..args.layers };
    let plan = plan_for(teacher.num_layers(), &layers)?;
    let d_student = args
        .student_dim
        .or(samples.as_ref().map(SampleBatch::d_student))
        .unwrap_or(teacher.d_model());
    let outcome = transfer_detailed(&teacher, &plan, samples.as_ref(), d_student, threads)?;
    write(&outcome.modules.to_container(dtype)?, &args.out)?;
    match (&outcome.alignments, &samples) {
        (Some(a), Some(batch)) => emit_alignment(&AlignmentReport::from_alignments(batch, a), &args.report)?,
        _ => println!("{} {:?} -> {}", plan.strategy(), plan.groups(), describe(&outcome.modules)),
    }
    Ok(())
}

fn load_config(args: &ToyConfigArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(p) => {
            check_paths(&[p], &[])?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(m) = args.mode {
        config.mode = match m {
            ModeArg::Matching => Mode::Matching,
            ModeArg::Incompatible => Mode::Incompatible,
        };
    }
    if let Some(k) = args.peft {
        config.peft = match k {
            PeftArg::Adapter => PeftKind::Adapter,
            PeftArg::Lora => PeftKind::Lora,
        };
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    Ok(config.resolved()?)
}

fn read_model(path: &Path) -> Result<ToyModel> {
    ToyModel::from_container(&read(path)?).with_context(|| format!("loading toy model from {}", path.display()))
}

fn training_table(log: &TrainingLog) -> String {
    let mut out = format!(
        "before training: train loss {:.4}, val loss {:.4}, val acc {:.4}\n",
        log.initial_loss, log.initial_val_loss, log.initial_val_accuracy
    );
    for e in &log.epochs {
        out.push_str(&format!(
            "epoch {:>3}: train loss {:.4}, val loss {:.4}, val acc {:.4}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_accuracy
        ));
    }
    out
}

fn cmd_toy(cmd: &ToyCommand, threads: usize) -> Result<()> {
    match cmd {
        ToyCommand::Build { config, teacher_out, student_out } => {
            check_paths(&[], &[teacher_out, student_out])?;
            if teacher_out == student_out {
                return Err(usage("teacher and student outputs must differ"));
            }
            let config = load_config(config)?;
            let (teacher, student) = build_pair(&config, config.seed)?;
            write(&teacher.to_container()?, teacher_out)?;
            write(&student.to_container()?, student_out)?;
            println!(
                "{} pair: teacher {} layers x {}, student {} layers x {}, {} modules",
                config.mode,
                teacher.depth(),
                teacher.d_model(),
                student.depth(),
                student.d_model(),
                config.peft
            );
        }
        ToyCommand::Train { config, model, role, init_modules, out, report } => {
            let mut inputs = vec![model.as_path()];
            inputs.extend(init_modules.as_deref());
            check_paths(&inputs, &[out])?;
            let config = load_config(config)?;
            let mut m = read_model(model)?;
            if let Some(p) = init_modules {
                m.set_peft(read_modules(p)?.0)?;
            }
            let role = match role {
                RoleArg::Teacher => Role::Teacher,
                RoleArg::Student => Role::Student,
            };
            let task = task_for(&config, config.seed)?;
            let log = train_peft(&mut m, &task, &train_options_for(&config, config.seed, role))?;
            write(&m.to_container()?, out)?;
            let json = moduleport::report::canonical_json(&log)?;
            write_report(&json, report.report.as_deref())?;
            match report.format {
                Format::Table => print!("{}", training_table(&log)),
                Format::Json => println!("{json}"),
            }
        }
        ToyCommand::Capture { config, teacher, student, strategy, num_samples, out } => {
            check_paths(&[teacher, student], &[out])?;
            let config = load_config(config)?;
            let (t, s) = (read_model(teacher)?, read_model(student)?);
            let plan = plan_layers(t.depth(), s.depth(), (*strategy).into(), config.skip_offset())?;
            let task = task_for(&config, config.seed)?;
            let n = num_samples.unwrap_or(config.num_samples);
            let batch = capture_samples(&t, &s, &plan, task.train().tokens(), n, config.capture.peft())?;
            write(&batch.to_container()?, out)?;
            println!(
                "captured {} rows for {} layers (student width {}, teacher width {})",
                batch.num_samples(),
                batch.num_layers(),
                batch.d_student(),
                batch.d_teacher()
            );
        }
        ToyCommand::Experiment { config, seeds, out, format } => {
            let outputs: Vec<&Path> = out.iter().map(PathBuf::as_path).collect();
            check_paths(&[], &outputs)?;
            let mut config = load_config(config)?;
            if let Some(n) = seeds {
                config.num_seeds = *n;
                config = config.resolved()?;
            }
            let report = run_experiment(&config, threads)?;
            let json = report.to_json();
            write_report(&json, out.as_deref())?;
            match format {
                Format::Table => print!("{}", report.to_table()),
                Format::Json => println!("{json}"),
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = threads_from_env().map_err(usage)?;
    match &cli.command {
        Command::MapLayers(a) => cmd_map_layers(a),
        Command::Align(a) => cmd_align(a, threads),
        Command::Transfer(a) => cmd_transfer(a, threads),
        Command::Toy(t) => cmd_toy(t, threads),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.exit_code() == 0 { 0 } else { 1 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
