use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tokd::datagen::{generate, load_image_dir, read_raster, write_dataset_dir, GenSpec, LabeledDataset, Split, MANIFEST};
use tokd::distill::{hex_digest, run_distillation_with, teacher_features, DistillConfig, DistillMode, ExperimentResult};
use tokd::frequency::HighPassSpec;
use tokd::nn::{Checkpoint, StepLrSchedule};
use tokd::student::{InferenceStudent, StudentNet};
use tokd::teacher::{train_teacher, TeacherConfig, TeacherNet, TeacherTrainConfig};
use tokd::{Error, Result};

const GEN_SPEC_FILE: &str = "gen.json";

/// Keys accepted in a `--config` file. Each matches the long flag of the
/// same name.
const CONFIG_KEYS: &[&str] = &[
    "n", "n-train", "n-val", "n-test", "image-size", "artifact-strength", "checker-amplitude", "noise-std", "seed",
    "cutoff", "epochs", "batch-size", "lr", "lr-step", "lr-gamma", "stages", "rfam", "rfam-modules", "rfam-residual",
    "proj-channels", "mode", "seeds", "alpha", "alpha1", "alpha2", "d", "lr-s", "lr-s-step", "lr-s-gamma", "lr-r",
    "lr-r-step", "lr-r-gamma", "student-stages", "normalize-grads", "train-teacher-projectors", "sweep-alpha",
    "sweep-d", "split",
];

#[derive(Parser)]
#[command(name = "tokd", version, about = "Two-in-one knowledge distillation experiments")]
struct Cli {
    /// Plain-text `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as raster files plus a manifest.
    GenData(GenArgs),
    /// Train the dual-branch teacher.
    TrainTeacher(TeacherArgs),
    /// Distill the teacher into a student in one or more modes.
    Distill(DistillArgs),
    /// Evaluate a teacher, student or inference checkpoint.
    Eval(EvalArgs),
    /// Distill once per alpha (alpha1 = alpha2 = alpha).
    SweepAlpha(SweepArgs),
    /// Distill once per rotation dimension d.
    SweepD(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Total sample count, split 60/20/20 into train/val/test.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    artifact_strength: Option<f64>,
    #[arg(long)]
    checker_amplitude: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TeacherArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_step: Option<usize>,
    #[arg(long)]
    lr_gamma: Option<f64>,
    /// Comma-separated stage widths.
    #[arg(long)]
    stages: Option<String>,
    /// Number of attention blocks; 0 trains a teacher without attention.
    #[arg(long)]
    rfam: Option<usize>,
    #[arg(long)]
    rfam_modules: Option<usize>,
    #[arg(long)]
    rfam_residual: Option<bool>,
    #[arg(long)]
    proj_channels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cutoff: Option<f64>,
}

#[derive(Args, Clone)]
struct DistillArgs {
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint; required for every mode except vanilla.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// One mode or a comma-separated list: vanilla, rgb, fre, both, tokd.
    #[arg(long)]
    mode: Option<String>,
    /// Comma-separated seeds; overrides `--seed`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sets both alpha1 and alpha2.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_s: Option<f64>,
    #[arg(long)]
    lr_s_step: Option<usize>,
    #[arg(long)]
    lr_s_gamma: Option<f64>,
    #[arg(long)]
    lr_r: Option<f64>,
    #[arg(long)]
    lr_r_step: Option<usize>,
    #[arg(long)]
    lr_r_gamma: Option<f64>,
    #[arg(long)]
    student_stages: Option<String>,
    #[arg(long)]
    normalize_grads: Option<bool>,
    #[arg(long)]
    train_teacher_projectors: Option<bool>,
    #[arg(long)]
    cutoff: Option<f64>,
    /// Comma-separated alphas; one run per value.
    #[arg(long)]
    sweep_alpha: Option<String>,
    /// Comma-separated rotation dimensions; one run per value.
    #[arg(long)]
    sweep_d: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated sweep values.
    #[arg(long)]
    values: String,
    #[command(flatten)]
    distill: DistillArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    cutoff: Option<f64>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Values from the config file, looked up when a flag is absent.
struct Settings {
    path: Option<PathBuf>,
    values: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<PathBuf>) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(p) = &path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", p.display(), i + 1)))?;
                let key = k.trim().replace('_', "-");
                if !CONFIG_KEYS.contains(&key.as_str()) {
                    return Err(Error::Config(format!("{}:{}: unknown key `{}`", p.display(), i + 1, k.trim())));
                }
                values.insert(key, v.trim().to_string());
            }
        }
        Ok(Self { path, values })
    }

    fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{v}`"))),
        }
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, flag: Option<String>, key: &str) -> Result<Option<Vec<T>>> {
        self.opt(flag, key)?.map(|s: String| parse_list(&s, key)).transpose()
    }
}

fn parse_list<T: FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    let out: Vec<T> = s
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{}`", v.trim()))))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Config(format!("`{key}` is empty")));
    }
    Ok(out)
}

fn threads() -> usize {
    std::env::var("TOKD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f` over `items` on at most `TOKD_THREADS` threads, keeping order.
fn parallel_map<I: Sync, T: Send>(items: &[I], f: impl Fn(&I) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads().min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no poisoned workers").into_iter().map(|r| r.expect("every item ran")).collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn highpass(settings: &Settings, flag: Option<f64>) -> Result<HighPassSpec> {
    match settings.opt(flag, "cutoff")? {
        Some(c) => HighPassSpec::new(c),
        None => Ok(HighPassSpec::default()),
    }
}

/// Loads a dataset directory at the resolution of its first raster.
fn load_dataset(dir: &Path, hp: HighPassSpec) -> Result<LabeledDataset> {
    let manifest = dir.join(MANIFEST);
    let mut rdr = csv::Reader::from_path(&manifest).map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    let first = rdr
        .records()
        .next()
        .ok_or_else(|| Error::Data(format!("{} lists no images", manifest.display())))?
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    let size = read_raster(&dir.join(&first[0]))?.dim(1);
    load_image_dir(dir, &manifest, size, hp)
}

fn gen_data(args: GenArgs, st: &Settings) -> Result<()> {
    let base = GenSpec::default();
    let n = st.opt(args.n, "n")?;
    let (tr, va, te) = match n {
        Some(n) => (n * 3 / 5, n / 5, n - n * 3 / 5 - n / 5),
        None => (base.n_train, base.n_val, base.n_test),
    };
    let spec = GenSpec {
        n_train: st.get(args.n_train, "n-train", tr)?,
        n_val: st.get(args.n_val, "n-val", va)?,
        n_test: st.get(args.n_test, "n-test", te)?,
        image_size: st.get(args.image_size, "image-size", base.image_size)?,
        artifact_strength: st.get(args.artifact_strength, "artifact-strength", base.artifact_strength)?,
        checker_amplitude: st.get(args.checker_amplitude, "checker-amplitude", base.checker_amplitude)?,
        noise_std: st.get(args.noise_std, "noise-std", base.noise_std)?,
        seed: st.get(args.seed, "seed", base.seed)?,
        ..base
    };
    let data = generate(&spec, HighPassSpec::default())?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", args.out.display()))))?;
    write_dataset_dir(&data, &args.out)?;
    write_json(&args.out.join(GEN_SPEC_FILE), &serde_json::to_value(&spec).map_err(|e| Error::Format(e.to_string()))?)?;
    println!("wrote {} samples to {}", data.len(), args.out.display());
    Ok(())
}

fn train_teacher_cmd(args: TeacherArgs, st: &Settings) -> Result<()> {
    let hp = highpass(st, args.cutoff)?;
    let data = load_dataset(&args.data, hp)?;
    let [c, size, _] = data.image_shape();
    let base = TeacherConfig::default();
    let tc = TeacherConfig {
        image_size: size,
        in_channels: c,
        stages: st.list(args.stages, "stages")?.unwrap_or(base.stages),
        rfam_blocks: st.get(args.rfam, "rfam", base.rfam_blocks)?,
        rfam_modules: st.get(args.rfam_modules, "rfam-modules", base.rfam_modules)?,
        rfam_residual: st.get(args.rfam_residual, "rfam-residual", base.rfam_residual)?,
        proj_channels: st.get(args.proj_channels, "proj-channels", base.proj_channels)?,
        seed: st.get(args.seed, "seed", base.seed)?,
    };
    let train = TeacherTrainConfig {
        epochs: st.get(args.epochs, "epochs", 10)?,
        batch_size: st.get(args.batch_size, "batch-size", 32)?,
        lr: StepLrSchedule::new(
            st.get(args.lr, "lr", 1e-3)?,
            st.get(args.lr_step, "lr-step", 5)?,
            st.get(args.lr_gamma, "lr-gamma", 0.1)?,
        )?,
        seed: tc.seed,
    };
    let mut teacher = TeacherNet::new(tc.clone())?;
    let report = train_teacher(&mut teacher, &data, &train)?;
    std::fs::create_dir_all(&args.out)?;
    let ckpt_path = args.out.join("teacher.ckpt");
    let ckpt = teacher.to_checkpoint()?;
    ckpt.save(&ckpt_path)?;
    if Checkpoint::load(&ckpt_path)? != ckpt {
        return Err(Error::State("teacher checkpoint does not load back identically".into()));
    }
    let mut w = csv::Writer::from_path(args.out.join("teacher_metrics.csv")).map_err(|e| Error::Io(e.into()))?;
    for e in &report.epochs {
        w.serialize(e).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    let test = teacher.evaluate(&data, Split::Test)?;
    write_json(
        &args.out.join("teacher.json"),
        &json!({ "config": tc, "train": train, "epochs": report.epochs, "test": test }),
    )?;
    println!("teacher test acc {:.4} auc {:.4} eer {:.4}", test.accuracy, test.auc, test.eer);
    Ok(())
}

/// One distillation run of a sweep or mode grid.
struct RunSpec {
    tag: String,
    sweep_value: Option<String>,
    cfg: DistillConfig,
}

fn base_distill_config(a: &DistillArgs, st: &Settings) -> Result<DistillConfig> {
    let b = DistillConfig::default();
    let alpha = st.opt(a.alpha, "alpha")?;
    let sched = |lr: Option<f64>, step: Option<usize>, gamma: Option<f64>, key: &str, base: StepLrSchedule| -> Result<StepLrSchedule> {
        StepLrSchedule::new(
            st.get(lr, key, base.base_lr)?,
            st.get(step, &format!("{key}-step"), base.step_epochs)?,
            st.get(gamma, &format!("{key}-gamma"), base.gamma)?,
        )
    };
    Ok(DistillConfig {
        alpha1: st.get(a.alpha1, "alpha1", alpha.unwrap_or(b.alpha1))?,
        alpha2: st.get(a.alpha2, "alpha2", alpha.unwrap_or(b.alpha2))?,
        d: st.get(a.d, "d", b.d)?,
        eta_s: sched(a.lr_s, a.lr_s_step, a.lr_s_gamma, "lr-s", b.eta_s)?,
        eta_r: sched(a.lr_r, a.lr_r_step, a.lr_r_gamma, "lr-r", b.eta_r)?,
        epochs: st.get(a.epochs, "epochs", b.epochs)?,
        batch_size: st.get(a.batch_size, "batch-size", b.batch_size)?,
        highpass: highpass(st, a.cutoff)?,
        seed: st.get(a.seed, "seed", b.seed)?,
        normalize_grads: st.get(a.normalize_grads, "normalize-grads", b.normalize_grads)?,
        student_stages: st.list(a.student_stages.clone(), "student-stages")?.unwrap_or(b.student_stages.clone()),
        train_teacher_projectors: st.get(a.train_teacher_projectors, "train-teacher-projectors", b.train_teacher_projectors)?,
        ..b
    })
}

fn plan_runs(a: &DistillArgs, st: &Settings) -> Result<(Vec<RunSpec>, Option<&'static str>)> {
    let base = base_distill_config(a, st)?;
    let modes: Vec<DistillMode> = st.list(a.mode.clone(), "mode")?.unwrap_or(vec![DistillMode::Tokd]);
    let seeds: Vec<u64> = st.list(a.seeds.clone(), "seeds")?.unwrap_or(vec![base.seed]);
    let alphas: Option<Vec<f64>> = st.list(a.sweep_alpha.clone(), "sweep-alpha")?;
    let ds: Option<Vec<usize>> = st.list(a.sweep_d.clone(), "sweep-d")?;
    if alphas.is_some() && ds.is_some() {
        return Err(Error::Config("use either --sweep-alpha or --sweep-d, not both".into()));
    }
    let mut runs = Vec::new();
    for &mode in &modes {
        for &seed in &seeds {
            let cfg = DistillConfig { mode, seed, ..base.clone() };
            match (&alphas, &ds) {
                (Some(al), _) => runs.extend(al.iter().map(|&x| RunSpec {
                    tag: format!("{mode}_alpha{x}_seed{seed}"),
                    sweep_value: Some(x.to_string()),
                    cfg: DistillConfig { alpha1: x, alpha2: x, ..cfg.clone() },
                })),
                (_, Some(dl)) => runs.extend(dl.iter().map(|&x| RunSpec {
                    tag: format!("{mode}_d{x}_seed{seed}"),
                    sweep_value: Some(x.to_string()),
                    cfg: DistillConfig { d: x, ..cfg.clone() },
                })),
                _ => runs.push(RunSpec { tag: format!("{mode}_seed{seed}"), sweep_value: None, cfg }),
            }
        }
    }
    for r in &runs {
        r.cfg.validate()?;
    }
    let sweep = alphas.as_ref().map(|_| "alpha").or(ds.as_ref().map(|_| "d"));
    Ok((runs, sweep))
}

/// Writes a run's outputs. A rerun of the same configuration into the same
/// directory must reproduce the earlier result exactly.
fn write_run(dir: &Path, run: &RunSpec, result: &ExperimentResult, best: &StudentNet, manifest: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let summary = result.summary_json()?;
    let digest = hex_digest(summary.as_bytes());
    let manifest_path = dir.join("manifest.json");
    if let Ok(old) = std::fs::read_to_string(&manifest_path) {
        let old: serde_json::Value = serde_json::from_str(&old).map_err(|e| Error::Format(e.to_string()))?;
        if old["config_hash"] == json!(run.cfg.hash()) && old["result_hash"] != json!(digest) {
            return Err(Error::State(format!("{}: rerun with identical config produced a different result", run.tag)));
        }
    }
    std::fs::write(dir.join("result.json"), summary + "\n")?;
    result.write_csv(&dir.join("metrics.csv"))?;
    let (full, light) = (dir.join("student.ckpt"), dir.join("student.infer.ckpt"));
    best.to_checkpoint()?.save(&full)?;
    best.inference().to_checkpoint()?.save(&light)?;
    if std::fs::metadata(&light)?.len() >= std::fs::metadata(&full)?.len() {
        return Err(Error::State("inference checkpoint is not smaller than the full checkpoint".into()));
    }
    let mut m = manifest;
    m["result_hash"] = json!(digest);
    write_json(&manifest_path, &m)
}

fn distill_cmd(a: DistillArgs, st: &Settings) -> Result<()> {
    let (runs, sweep) = plan_runs(&a, st)?;
    let hp = runs[0].cfg.highpass;
    let data = load_dataset(&a.data, hp)?;
    let needs_teacher = runs.iter().any(|r| r.cfg.mode != DistillMode::Vanilla);
    let teacher = match &a.teacher {
        Some(p) => TeacherNet::from_checkpoint(&Checkpoint::load(p)?)?,
        None if needs_teacher => return Err(Error::Config("a teacher checkpoint (--teacher) is required for this mode".into())),
        None => {
            let [c, size, _] = data.image_shape();
            TeacherNet::new(TeacherConfig { image_size: size, in_channels: c, ..TeacherConfig::default() })?
        }
    };
    let feats = if needs_teacher { Some(teacher_features(&teacher, &data)?) } else { None };
    let gen_spec: Option<serde_json::Value> = std::fs::read_to_string(a.data.join(GEN_SPEC_FILE))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    std::fs::create_dir_all(&a.out)?;
    let results = parallel_map(&runs, |run| {
        log::info!("starting {}", run.tag);
        let out = run_distillation_with(&run.cfg, &teacher, &data, feats.as_ref())?;
        let dir = a.out.join(&run.tag);
        let manifest = json!({
            "config_path": st.path,
            "distill_config": run.cfg,
            "gen_spec": gen_spec,
            "data_dir": a.data,
            "teacher": a.teacher,
            "output_dir": dir,
            "config_hash": run.cfg.hash(),
        });
        write_run(&dir, run, &out.result, &out.best, manifest)?;
        Ok(out.result)
    })?;

    let mut table = String::from("tag,mode,seed,sweep,alpha1,alpha2,d,best_epoch,val_acc,test_acc,test_auc,test_eer,final_cos_raw,final_cos_rotated\n");
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (run, r) in runs.iter().zip(&results) {
        let last = r.epochs.last();
        writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            run.tag,
            r.mode,
            run.cfg.seed,
            run.sweep_value.clone().unwrap_or_default(),
            run.cfg.alpha1,
            run.cfg.alpha2,
            run.cfg.d,
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            r.val.accuracy,
            r.test.accuracy,
            r.test.auc,
            r.test.eer,
            fmt(last.and_then(|e| e.mean_grad_cosine_raw)),
            fmt(last.and_then(|e| e.mean_grad_cosine_rotated)),
        )
        .expect("writing to a string");
        println!("{:<28} test acc {:.4} auc {:.4} eer {:.4}", run.tag, r.test.accuracy, r.test.auc, r.test.eer);
    }
    let name = match sweep {
        Some(s) => format!("sweep_{s}.csv"),
        None => "summary.csv".into(),
    };
    std::fs::write(a.out.join(name), table)?;
    Ok(())
}

fn sweep_cmd(args: SweepArgs, kind: &str, st: &Settings) -> Result<()> {
    let mut d = args.distill;
    match kind {
        "alpha" => d.sweep_alpha = Some(args.values),
        _ => d.sweep_d = Some(args.values),
    }
    distill_cmd(d, st)
}

fn eval_cmd(args: EvalArgs, st: &Settings) -> Result<()> {
    let data = load_dataset(&args.data, highpass(st, args.cutoff)?)?;
    let split = Split::parse(&st.get(args.split, "split", "test".to_string())?)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (kind, metrics) = if let Ok(s) = StudentNet::from_checkpoint(&ck) {
        ("student", s.evaluate(&data, split)?)
    } else if let Ok(s) = InferenceStudent::from_checkpoint(&ck) {
        ("student_inference", s.evaluate(&data, split)?)
    } else if let Ok(t) = TeacherNet::from_checkpoint(&ck) {
        ("teacher", t.evaluate(&data, split)?)
    } else {
        return Err(Error::Format(format!("{}: not a teacher or student checkpoint", args.checkpoint.display())));
    };
    let v = json!({
        "checkpoint": args.checkpoint,
        "kind": kind,
        "split": split.as_str(),
        "accuracy": metrics.accuracy,
        "auc": metrics.auc,
        "eer": metrics.eer,
    });
    let text = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
    // a closed pipe on stdout is not an error
    let _ = writeln!(std::io::stdout(), "{text}");
    if let Some(p) = &args.out {
        write_json(p, &v)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let st = Settings::load(cli.config)?;
    match cli.command {
        Command::GenData(a) => gen_data(a, &st),
        Command::TrainTeacher(a) => train_teacher_cmd(a, &st),
        Command::Distill(a) => distill_cmd(a, &st),
        Command::Eval(a) => eval_cmd(a, &st),
        Command::SweepAlpha(a) => sweep_cmd(a, "alpha", &st),
        Command::SweepD(a) => sweep_cmd(a, "d", &st),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
