//! The `dmoe` command line: data preparation, training, evaluation, the
//! baseline grid and gating analyses.

pub mod data_dir;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dmoe_core::analysis::{factorization_score, gate_trace, joint_from_trace, stats_from_trace, topk_from_trace, Exporter};
use dmoe_core::checkpoint::{Checkpoint, Container, TensorData};
use dmoe_core::train::{evaluate, metrics_csv, run_experiment_grid, EpochMetrics, GridSpec, Observer, TrainConfig, Trainer};
use dmoe_core::{AssignmentTracker, Error, Model, ModelKind, Result};
use serde_json::json;

use data_dir::{prepare_mnist, prepare_speech, DataDir, JitterPolicy, Split};
use manifest::{read_text, write_text, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "dmoe", version, about = "Deep mixture-of-experts experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Jitter MNIST onto a 36x36 canvas and store it as datasets.
    PrepareData(PrepareArgs),
    /// Generate the synthetic speech-frame datasets.
    GenSpeech(SpeechArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Classification error of a checkpoint.
    Eval(EvalArgs),
    /// Train every model of a comparison table.
    Grid(GridArgs),
    /// Export gating statistics of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Print the manifest and tensors of a container file.
    InspectCheckpoint(InspectArgs),
    /// Rerun the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub mnist_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = JitterPolicy::PerEpoch)]
    pub mode: JitterPolicy,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SpeechArgs {
    #[arg(long, default_value_t = 8000)]
    pub train_n: usize,
    #[arg(long, default_value_t = 2000)]
    pub test_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags that override fields of the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub kind: Option<ModelKind>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    #[arg(long)]
    pub phase2_epochs: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Train without the balancing constraint.
    #[arg(long)]
    pub no_constraint: bool,
    #[arg(long)]
    pub seed_init: Option<u64>,
    #[arg(long)]
    pub seed_data: Option<u64>,
    #[arg(long)]
    pub seed_shuffle: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, c: &mut TrainConfig) {
        if let Some(v) = self.kind {
            c.kind = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.lr_decay {
            c.lr_decay = v;
        }
        if let Some(v) = self.decay_every {
            c.decay_every = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.phase1_epochs {
            c.phase1_epochs = v;
        }
        if let Some(v) = self.phase2_epochs {
            c.phase2_epochs = v;
        }
        if let Some(v) = self.margin {
            c.margin = v;
        }
        if self.no_constraint {
            c.constrain = false;
        }
        if let Some(v) = self.seed_init {
            c.seeds.init = v;
        }
        if let Some(v) = self.seed_data {
            c.seeds.data = v;
        }
        if let Some(v) = self.seed_shuffle {
            c.seeds.shuffle = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory written by `prepare-data` or `gen-speech`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also write `epoch_<n>.ckpt` every this many epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Also write `eval.json` and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// JSON grid spec: architecture rows plus shared training config.
    #[arg(long)]
    pub table_spec: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Examples per expert pair in the top-k grid.
    #[arg(long, default_value_t = 9)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory of the rerun.
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Diverged { .. } | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

/// Runs a parsed command. `argv` is recorded in run manifests.
pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::PrepareData(a) => cmd_prepare(a, argv),
        Command::GenSpeech(a) => cmd_speech(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Grid(a) => cmd_grid(a, argv),
        Command::Analyze(a) => cmd_analyze(a, argv),
        Command::InspectCheckpoint(a) => cmd_inspect(a),
        Command::Replay(a) => cmd_replay(a),
    }
}

fn print_checksums(meta: &data_dir::DataMeta) {
    for (name, sum) in &meta.files {
        println!("{sum}  {name}");
    }
}

fn cmd_prepare(a: PrepareArgs, argv: &[String]) -> Result<()> {
    let meta = prepare_mnist(&a.mnist_dir, a.seed, a.mode, &a.out)?;
    print_checksums(&meta);
    let files: Vec<String> = meta.files.keys().cloned().chain([data_dir::META.to_string()]).collect();
    RunManifest::new("prepare-data", argv).finish(&a.out, &files)
}

fn cmd_speech(a: SpeechArgs, argv: &[String]) -> Result<()> {
    let meta = prepare_speech(a.train_n, a.test_n, a.seed, &a.out)?;
    print_checksums(&meta);
    let files: Vec<String> = meta.files.keys().cloned().chain([data_dir::META.to_string()]).collect();
    RunManifest::new("gen-speech", argv).finish(&a.out, &files)
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<TrainConfig> {
    let mut c: TrainConfig =
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    overrides.apply(&mut c);
    c.validate()?;
    Ok(c)
}

struct Progress {
    quiet: bool,
    every: Option<usize>,
    out: PathBuf,
    written: Vec<String>,
    config: serde_json::Value,
    step: u64,
}

impl Observer for Progress {
    fn on_step(&mut self, info: &dmoe_core::train::StepInfo, _m: &Model, _t: &AssignmentTracker) {
        self.step = info.step;
    }

    fn on_epoch(&mut self, m: &EpochMetrics, model: &Model, tracker: &AssignmentTracker) -> Result<()> {
        if !self.quiet {
            eprintln!(
                "epoch {:>3} phase {} loss {:.4} train_err {:.2} test_err {}",
                m.epoch,
                m.phase,
                m.train_loss,
                m.train_err,
                m.test_err.map_or("-".into(), |v| format!("{v:.2}"))
            );
        }
        if self.every.is_some_and(|e| e > 0 && m.epoch % e == 0) {
            let name = format!("epoch_{}.ckpt", m.epoch);
            Checkpoint {
                model: model.clone(),
                tracker: Some(tracker.clone()),
                progress: dmoe_core::checkpoint::Progress {
                    phase: m.phase,
                    epoch: m.epoch,
                    step: self.step,
                },
                config: self.config.clone(),
            }
            .save(self.out.join(&name))?;
            self.written.push(name);
        }
        Ok(())
    }
}

fn cmd_train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let config = load_config(&a.config, &a.overrides)?;
    let data = DataDir::open(&a.data)?;
    let mut manifest = RunManifest::new("train", argv);
    manifest.config = Some(serde_json::to_value(&config).expect("config"));
    manifest.input(&a.config)?;
    for name in data.meta.files.keys() {
        manifest.input(&a.data.join(name))?;
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            manifest.input(p)?;
            Trainer::resume(config.clone(), Checkpoint::load(p)?)?
        }
        None => Trainer::new(config.clone())?,
    };
    let mut progress = Progress {
        quiet: a.quiet,
        every: a.checkpoint_every,
        out: a.out.clone(),
        written: Vec::new(),
        config: serde_json::to_value(&config).expect("config"),
        step: trainer.step,
    };
    let training = data.training(config.seeds.data);
    let history = trainer.run(training.as_ref(), Some(&data.test), &mut progress)?;
    let train_err = evaluate(&trainer.model, &data.train)?;
    let test_err = evaluate(&trainer.model, &data.test)?;
    write_text(
        &a.out.join("config.json"),
        &(serde_json::to_string_pretty(&config).expect("config") + "\n"),
    )?;
    write_text(
        &a.out.join("metrics.csv"),
        &metrics_csv(&history, &trainer.model.gate_widths()),
    )?;
    trainer.checkpoint().save(a.out.join("model.ckpt"))?;
    let result = json!({
        "train_err": train_err,
        "test_err": test_err,
        "params": trainer.model.param_count(),
        "epochs": trainer.epoch,
        "steps": trainer.step,
    });
    write_text(&a.out.join("result.json"), &(serde_json::to_string_pretty(&result).expect("json") + "\n"))?;
    println!("train_err={train_err}");
    println!("test_err={test_err}");
    let mut files: Vec<String> = ["config.json", "metrics.csv", "model.ckpt", "result.json"]
        .map(String::from)
        .to_vec();
    files.extend(progress.written);
    manifest.finish(&a.out, &files)
}

fn cmd_eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = DataDir::open(&a.data)?;
    let err = evaluate(&ckpt.model, data.split(a.split))?;
    println!("error={err}");
    if let Some(out) = &a.out {
        let mut manifest = RunManifest::new("eval", argv);
        manifest.input(&a.checkpoint)?;
        let body = json!({ "split": format!("{:?}", a.split).to_lowercase(), "error": err });
        write_text(&out.join("eval.json"), &(serde_json::to_string_pretty(&body).expect("json") + "\n"))?;
        manifest.finish(out, &["eval.json".to_string()])?;
    }
    Ok(())
}

fn cmd_grid(a: GridArgs, argv: &[String]) -> Result<()> {
    let mut spec: GridSpec = serde_json::from_str(&read_text(&a.table_spec)?)
        .map_err(|e| Error::Config(format!("{}: {e}", a.table_spec.display())))?;
    a.overrides.apply(&mut spec.train);
    let data = DataDir::open(&a.data)?;
    let mut manifest = RunManifest::new("grid", argv);
    manifest.config = Some(serde_json::to_value(&spec).expect("spec"));
    manifest.input(&a.table_spec)?;
    let training = data.training(spec.train.seeds.data);
    let results = run_experiment_grid(&spec, training.as_ref(), &data.train, &data.test, a.jobs)?;
    write_text(&a.out.join("grid_test.csv"), &results.test_csv())?;
    write_text(&a.out.join("grid_train.csv"), &results.train_csv())?;
    print!("{}", results.test_csv());
    for (r, row) in results.cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if let dmoe_core::train::CellResult::Failed(msg) = cell {
                eprintln!("cell row {r} column {c} failed: {msg}");
            }
        }
    }
    manifest.finish(&a.out, &["grid_test.csv".to_string(), "grid_train.csv".to_string()])
}

fn cmd_analyze(a: AnalyzeArgs, argv: &[String]) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = DataDir::open(&a.data)?;
    let ds = data.split(a.split);
    let mut manifest = RunManifest::new("analyze", argv);
    manifest.input(&a.checkpoint)?;
    let ex = Exporter::new(&a.out)?;
    let trace = gate_trace(&ckpt.model, ds)?;
    let mut files = vec!["gates.csv".to_string()];
    ex.write("gates.csv", trace.to_csv())?;
    let stats = stats_from_trace(&trace, data.meta.max_offset)?;
    ex.gating_stats(&stats)?;
    let mut fact = String::from("layer,translation_selectivity,class_selectivity\n");
    for (l, s) in factorization_score(&stats).iter().enumerate() {
        fact.push_str(&format!(
            "{},{},{}\n",
            l + 1,
            dmoe_core::numeric::format_sig(s.translation),
            dmoe_core::numeric::format_sig(s.class)
        ));
    }
    ex.write("factorization.csv", &fact)?;
    files.push("factorization.csv".into());
    if trace.gates.len() == 2 {
        ex.joint(&joint_from_trace(&trace)?)?;
        ex.topk(ds, &topk_from_trace(&trace, a.k)?)?;
    }
    let mut names: Vec<String> = std::fs::read_dir(&a.out)
        .map_err(|e| manifest::io_err(&a.out, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != manifest::MANIFEST && (n.ends_with(".csv") || n.ends_with(".pgm")))
        .collect();
    names.sort();
    print!("{fact}");
    manifest.finish(&a.out, &names)
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let c = Container::read(&a.path)?;
    println!("{}", serde_json::to_string_pretty(&c.manifest).expect("json"));
    for t in &c.tensors {
        let (r, k) = t.data.shape();
        let dtype = match t.data {
            TensorData::F64(_) => "f64",
            TensorData::U8 { .. } => "u8",
        };
        println!("{:<40} {dtype:>3} {r} x {k}", t.name);
    }
    Ok(())
}

fn cmd_replay(a: ReplayArgs) -> Result<()> {
    let m = RunManifest::load(&a.manifest)?;
    let out = if a.out.is_absolute() {
        a.out.clone()
    } else {
        std::env::current_dir().map_err(|e| manifest::io_err(Path::new("."), e))?.join(&a.out)
    };
    std::env::set_current_dir(&m.cwd).map_err(|e| manifest::io_err(&m.cwd, e))?;
    let mut argv = m.argv.clone();
    let mut i = 0;
    let mut saw_out = false;
    while i < argv.len() {
        if argv[i] == "--out" && i + 1 < argv.len() {
            argv[i + 1] = out.display().to_string();
            saw_out = true;
        } else if argv[i] == "--config" && i + 1 < argv.len() {
            if let Some(cfg) = &m.config {
                let path = out.join("replay_config.json");
                write_text(&path, &(serde_json::to_string_pretty(cfg).expect("json") + "\n"))?;
                argv[i + 1] = path.display().to_string();
            }
        }
        i += 1;
    }
    if !saw_out && m.command == "eval" {
        argv.extend(["--out".to_string(), out.display().to_string()]);
    }
    let cli = Cli::try_parse_from(std::iter::once("dmoe".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Error::Config(format!("manifest arguments do not parse: {e}")))?;
    if let Command::Replay(_) = cli.command {
        return Err(Error::Config("a replay manifest cannot replay itself".into()));
    }
    run(cli, &argv)
}
