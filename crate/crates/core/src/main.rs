use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use maple_lab::checkpoint::Checkpoint;
use maple_lab::config::{Corpus, CorpusSpec, RunConfig};
use maple_lab::data::{load_dataset, save_dataset, split, Dataset, Shift, SplitSpec, Vocabulary};
use maple_lab::embed::export_embeddings;
use maple_lab::eval::{base_to_novel_eval, cross_dataset_eval, domain_gen_eval, PromptedClassifier};
use maple_lab::experiment::{sweep, tune_and_eval, write_sweep_csv};
use maple_lab::flops::{flop_count, reference_config};
use maple_lab::model::{Model, ModelConfig};
use maple_lab::prompts::{PromptBank, PromptConfig, Variant};
use maple_lab::train::{pretrain, tiny_gradcheck, GRADCHECK_TOL_32, GRADCHECK_TOL_64};
use maple_lab::Error;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "maple-lab", version, about = "Multi-modal prompt learning on a small frozen dual encoder")]
#[command(after_help = after_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn after_help() -> String {
    format!(
        "{}\nEnvironment: MAPLE_LAB_THREADS caps worker threads (0 = one per core).\n\
         Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 invariant violation.",
        RunConfig::help_text()
    )
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for machine-readable outputs; must not exist or be empty.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastively pretrain a backbone on the pretraining corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Tune prompts on base-class shots and score base and novel classes.
    Tune {
        #[command(flatten)]
        common: Common,
        /// Backbone checkpoint; without one a fresh backbone is built from `model.*`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// MPDS dataset to use instead of generating `data.*`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on base-to-novel, domain shifts and the transfer corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tune and evaluate every point along `sweep.axis` for `sweep.seeds` seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare prompt gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Size::Tiny)]
        size: Size,
        /// Which precision must meet its threshold.
        #[arg(long, value_enum, default_value_t = Precision::Both)]
        precision: Precision,
    },
    /// Analytic multiply-accumulate count of one classification pass.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Preset::Config)]
        preset: Preset,
        /// Overrides `prompt.variant`.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
    },
    /// Write prompted image embeddings of the `data.*` corpus as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render the `data.*` corpus to an MPDS file.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Tiny,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Precision {
    F32,
    F64,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// `model.*` and `prompt.*` from the configuration.
    Config,
    /// ViT-B/16 scale with `J = 9`, `b = 2` coupled prompts.
    ClipB16,
}

/// Write-once output directory.
struct RunDir(Option<PathBuf>);

impl RunDir {
    fn create(path: Option<&Path>) -> Result<Self> {
        let Some(p) = path else { return Ok(Self(None)) };
        if p.exists() && fs::read_dir(p)?.next().is_some() {
            bail!("run directory {} already holds outputs", p.display());
        }
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
        Ok(Self(Some(p.to_path_buf())))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = &self.0 {
            let path = dir.join(name);
            let mut f = OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
                .with_context(|| format!("writing {}", path.display()))?;
            f.write_all(bytes)?;
        }
        Ok(())
    }

    fn jsonl(&self, name: &str, records: &[Value]) -> Result<()> {
        let mut s = String::new();
        for r in records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        self.write(name, s.as_bytes())
    }

    fn checkpoint(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        let mut bytes = Vec::new();
        ck.write(&mut bytes)?;
        self.write(name, &bytes)
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply(&text)?;
    }
    for pair in &c.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Validated configuration, the run directory and its config snapshot.
fn start(c: &Common) -> Result<(RunConfig, RunDir)> {
    let cfg = load_config(c)?;
    cfg.model.validate()?;
    let dir = RunDir::create(c.out.as_deref())?;
    dir.write("config.cfg", cfg.serialize().as_bytes())?;
    Ok((cfg, dir))
}

fn dataset(spec: &CorpusSpec, path: Option<&Path>, vocab: &Vocabulary) -> Result<Dataset> {
    Ok(match path {
        Some(p) => load_dataset(p).with_context(|| format!("loading {}", p.display()))?,
        None => spec.generate(vocab)?,
    })
}

fn backbone(cfg: &RunConfig, path: Option<&Path>) -> Result<Model<f32>> {
    Ok(match path {
        Some(p) => Checkpoint::load(p)
            .and_then(|ck| ck.model())
            .with_context(|| format!("loading {}", p.display()))?,
        None => Model::init(cfg.model.clone(), cfg.seed)?,
    })
}

fn with_fields(base: Value, extra: Value) -> Value {
    let mut m = match base {
        Value::Object(m) => m,
        other => return other,
    };
    if let Value::Object(e) = extra {
        m.extend(e);
    }
    Value::Object(m)
}

fn run_pretrain(c: &Common) -> Result<()> {
    let (cfg, dir) = start(c)?;
    let vocab = Vocabulary::standard();
    let ds = cfg.pretrain_data.generate(&vocab)?;
    let mut log = Vec::new();
    let out = pretrain(&cfg.model, &ds, &cfg.pretrain_config(), Some(&mut log))?;
    dir.write("log.jsonl", &log)?;
    dir.checkpoint("checkpoint.mplt", &Checkpoint::pack(&out.model, None, out.steps as u64)?)?;
    dir.jsonl(
        "metrics.jsonl",
        &[json!({"command": "pretrain", "seed": cfg.seed, "steps": out.steps, "epoch_losses": out.epoch_losses})],
    )?;
    println!(
        "pretrained {} steps on {} pairs; epoch losses {:?}",
        out.steps,
        ds.len(),
        out.epoch_losses.iter().map(|l| format!("{l:.3}")).collect::<Vec<_>>()
    );
    Ok(())
}

fn run_tune(c: &Common, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let (cfg, dir) = start(c)?;
    let vocab = Vocabulary::standard();
    let model = backbone(&cfg, checkpoint)?;
    cfg.prompt.validate(&model.config)?;
    let ds = dataset(&cfg.data, data, &vocab)?;
    let mut log = Vec::new();
    let out = tune_and_eval(&model, &ds, cfg.protocol, &cfg.prompt, &cfg.tune_config(), &vocab, Some(&mut log))?;
    if let Some(w) = &out.init_warning {
        eprintln!("warning: {w}");
    }
    dir.write("log.jsonl", &log)?;
    dir.checkpoint(
        "checkpoint.mplt",
        &Checkpoint::pack(&model, Some((&cfg.prompt, &out.bank)), out.steps as u64)?,
    )?;
    let record = with_fields(
        serde_json::to_value(&out.metrics)?,
        json!({"command": "tune", "variant": cfg.prompt.variant.name(), "seed": cfg.seed, "epoch_losses": out.epoch_losses}),
    );
    dir.jsonl("metrics.jsonl", &[record])?;
    println!(
        "{}: base {:.2}  novel {:.2}  HM {:.2}  ({} steps)",
        cfg.prompt.variant.name(),
        out.metrics.base_acc,
        out.metrics.novel_acc,
        out.metrics.hm,
        out.steps
    );
    Ok(())
}

/// Backbone plus the prompts a checkpoint carries, or the unprompted variant.
fn tuned(path: &Path) -> Result<(Model<f32>, PromptConfig, PromptBank<maple_lab::Tensor<f32>>)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = ck.model()?;
    let (pc, bank) = match ck.prompts()? {
        Some(p) => p,
        None => (PromptConfig::for_model(Variant::None, model.config.layers), PromptBank::empty()),
    };
    Ok((model, pc, bank))
}

fn run_eval(c: &Common, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let (cfg, dir) = start(c)?;
    let vocab = Vocabulary::standard();
    let (model, pc, bank) = tuned(checkpoint)?;
    let ds = dataset(&cfg.data, data, &vocab)?;
    let clf = PromptedClassifier {
        model: &model,
        bank: &bank,
        cfg: &pc,
        vocab: &vocab,
    };
    let spec = SplitSpec::random(&ds.class_ids(), cfg.protocol.base_classes, cfg.protocol.shots, cfg.seed)?;
    let sp = split(&ds, &spec)?;
    let b2n = base_to_novel_eval(&clf, &ds, &spec, &sp, &vocab)?;
    let shifts = [
        Shift::Identity,
        Shift::GaussianNoise { sigma: 0.1, seed: cfg.seed },
        Shift::GaussianNoise { sigma: 0.3, seed: cfg.seed },
        Shift::HueRotate { degrees: 90.0 },
        Shift::Blur { radius: 1 },
        Shift::Sketch,
    ];
    let base_test = ds.subset(&sp.base_test);
    let domains = domain_gen_eval(&clf, &base_test, &shifts, &vocab)?;
    let transfer = CorpusSpec {
        corpus: Corpus::Transfer,
        ..cfg.data.clone()
    }
    .generate(&vocab)?;
    let cross = cross_dataset_eval(&clf, &base_test, &[("transfer".to_string(), transfer)], &vocab)?;
    let common = json!({"variant": pc.variant.name(), "seed": cfg.seed});
    dir.jsonl(
        "metrics.jsonl",
        &[
            with_fields(serde_json::to_value(&b2n)?, with_fields(json!({"protocol": "base_to_novel"}), common.clone())),
            with_fields(json!({"protocol": "domain_gen", "shifts": domains}), common.clone()),
            with_fields(json!({"protocol": "cross_dataset", "report": cross}), common),
        ],
    )?;
    println!(
        "{}: base {:.2}  novel {:.2}  HM {:.2}",
        pc.variant.name(),
        b2n.base_acc,
        b2n.novel_acc,
        b2n.hm
    );
    for (label, arm) in &domains {
        println!("  shift {label:<10} {:.2}", arm.accuracy);
    }
    println!("  transfer corpus {:.2}", cross.average);
    Ok(())
}

fn run_sweep(c: &Common, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let (cfg, dir) = start(c)?;
    let vocab = Vocabulary::standard();
    let model = backbone(&cfg, checkpoint)?;
    let ds = dataset(&cfg.data, data, &vocab)?;
    let rows = sweep(
        &model,
        &ds,
        cfg.protocol,
        cfg.sweep_axis,
        &cfg.prompt,
        &cfg.tune_config(),
        &cfg.sweep_seed_list(),
        &vocab,
    )?;
    let records = rows.iter().map(serde_json::to_value).collect::<Result<Vec<_>, _>>()?;
    dir.jsonl("metrics.jsonl", &records)?;
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &rows)?;
    dir.write("sweep.csv", &csv)?;
    println!("{:<22} {:>7} {:>7} {:>7}", cfg.sweep_axis.name(), "base", "novel", "HM");
    for r in &rows {
        println!("{:<22} {:>7.2} {:>7.2} {:>7.2}", r.value, r.mean.base_acc, r.mean.novel_acc, r.mean.hm);
    }
    Ok(())
}

fn run_gradcheck(c: &Common, precision: Precision) -> Result<bool> {
    let (cfg, dir) = start(c)?;
    let s = tiny_gradcheck(cfg.seed)?;
    let ok64 = s.report64.max_rel_err <= GRADCHECK_TOL_64;
    let ok32 = s.report32.max_rel_err <= GRADCHECK_TOL_32;
    let ok = match precision {
        Precision::F32 => ok32,
        Precision::F64 => ok64,
        Precision::Both => ok32 && ok64,
    };
    dir.jsonl(
        "metrics.jsonl",
        &[json!({
            "command": "gradcheck",
            "seed": cfg.seed,
            "coordinates": s.coordinates,
            "max_rel_err_f64": s.report64.max_rel_err,
            "max_rel_err_f32": s.report32.max_rel_err,
            "tolerance_f64": GRADCHECK_TOL_64,
            "tolerance_f32": GRADCHECK_TOL_32,
            "step_sweep": s.step_sweep,
            "passed": ok,
        })],
    )?;
    println!("{} coordinates", s.coordinates);
    println!("max rel. err 64-bit {:.3e} (limit {GRADCHECK_TOL_64:e})", s.report64.max_rel_err);
    println!("max rel. err 32-bit {:.3e} (limit {GRADCHECK_TOL_32:e})", s.report32.max_rel_err);
    for (h, e) in &s.step_sweep {
        println!("  h = {h:e}: 64-bit {e:.3e}");
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn run_flops(c: &Common, preset: Preset, variant: Option<&str>, classes: usize) -> Result<()> {
    let (mut cfg, dir) = start(c)?;
    if let Some(v) = variant {
        cfg.set("prompt.variant", v)?;
    }
    let (model, prompt) = match preset {
        Preset::Config => (cfg.model.clone(), cfg.prompt.clone()),
        Preset::ClipB16 => {
            let mut p = PromptConfig::preset(cfg.prompt.variant);
            if cfg.prompt.variant.is_coupled() || cfg.prompt.variant == Variant::IndependentVl {
                p.depth = 9;
                p.length = 2;
            }
            (ModelConfig::clip_b16(), p)
        }
    };
    let reference = flop_count(&model, &reference_config(&prompt), classes);
    let report = flop_count(&model, &prompt, classes).against(&reference);
    dir.jsonl("metrics.jsonl", &[serde_json::to_value(&report)?])?;
    println!(
        "{} over {classes} classes: {} MACs, {:.3} GFLOPs",
        report.variant,
        report.macs,
        report.flops as f64 / 1e9
    );
    for (k, v) in &report.breakdown {
        println!("  {k:<14} {v}");
    }
    println!(
        "overhead vs text_shallow: {:+.4}%",
        report.overhead_pct.unwrap_or(0.0)
    );
    Ok(())
}

fn run_export(c: &Common, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let (cfg, dir) = start(c)?;
    let vocab = Vocabulary::standard();
    let (model, pc, bank) = tuned(checkpoint)?;
    let ds = dataset(&cfg.data, data, &vocab)?;
    let clf = PromptedClassifier {
        model: &model,
        bank: &bank,
        cfg: &pc,
        vocab: &vocab,
    };
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut csv = Vec::new();
    let out = export_embeddings(&clf, &ds, &indices, cfg.embed_pca, &mut csv)?;
    dir.write("embeddings.csv", &csv)?;
    dir.jsonl(
        "metrics.jsonl",
        &[json!({"command": "export-embeddings", "variant": pc.variant.name(), "rows": ds.len(), "separability": out.separability})],
    )?;
    println!(
        "{} embeddings of width {}; between/within ratio {}",
        ds.len(),
        model.config.d_vl,
        out.separability.map_or("undefined".to_string(), |s| format!("{s:.4}"))
    );
    Ok(())
}

fn run_gen_data(c: &Common) -> Result<()> {
    let (cfg, dir) = start(c)?;
    let vocab = Vocabulary::standard();
    let ds = cfg.data.generate(&vocab)?;
    if let Some(d) = &dir.0 {
        save_dataset(&d.join("dataset.mpds"), &ds)?;
    }
    println!(
        "{} samples over {} classes ({} corpus, {} style)",
        ds.len(),
        ds.class_ids().len(),
        cfg.data.corpus.name(),
        cfg.data.style.name()
    );
    Ok(())
}

fn configure_threads() -> Result<()> {
    let n = match std::env::var("MAPLE_LAB_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("MAPLE_LAB_THREADS={v:?} is not a count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match &cli.command {
        Command::Pretrain { common } => run_pretrain(common)?,
        Command::Tune { common, checkpoint, data } => run_tune(common, checkpoint.as_deref(), data.as_deref())?,
        Command::Eval { common, checkpoint, data } => run_eval(common, checkpoint, data.as_deref())?,
        Command::Sweep { common, checkpoint, data } => run_sweep(common, checkpoint.as_deref(), data.as_deref())?,
        Command::Gradcheck { common, size: Size::Tiny, precision } => return run_gradcheck(common, *precision),
        Command::Flops { common, preset, variant, classes } => {
            run_flops(common, *preset, variant.as_deref(), *classes)?
        }
        Command::ExportEmbeddings { common, checkpoint, data } => run_export(common, checkpoint, data.as_deref())?,
        Command::GenData { common } => run_gen_data(common)?,
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        Some(Error::Invariant(_)) => EXIT_INVARIANT,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_INVARIANT),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
