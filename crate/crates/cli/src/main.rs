use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xmcl_core::config::RunConfig;
use xmcl_core::eval::write_histogram_csv;
use xmcl_core::gradsuite::run_suite;
use xmcl_core::losses::LossVariant;
use xmcl_core::run::{evaluate, scenes_for, train, visualize, write_dataset, Model};
use xmcl_core::Error;

#[derive(Parser, Debug)]
#[command(name = "xmcl", version, about = "Cross-modal dense feature learning on synthetic image/point-cloud pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train/val scenes of a config as pair directories.
    GenData(Common),
    /// Train both encoders jointly.
    Train(Common),
    /// Accuracy suite and mismatch histogram on the validation scenes.
    Eval(WithCheckpoint),
    /// Cluster label maps for one validation scene.
    Visualize {
        #[command(flatten)]
        inner: WithCheckpoint,
        /// Index into the validation scenes.
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Finite-difference check of every primitive, loss and micro-encoder.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
}

#[derive(Args, Debug)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Defaults to `final.ckpt` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    TupleCircle,
    Circle,
}

impl From<LossArg> for LossVariant {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::TupleCircle => LossVariant::TupleCircle,
            LossArg::Circle => LossVariant::Circle,
        }
    }
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => Failure::Numerical(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

fn resolve(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(loss) = c.loss {
        cfg.loss.variant = loss.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(w: &WithCheckpoint, cfg: &RunConfig) -> Result<Model, Error> {
    let path = w.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("final.ckpt"));
    Model::from_checkpoint(cfg, &path)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(c: &Common) -> Result<(), Failure> {
    let mut cfg = resolve(c)?;
    // `--seed` picks the scene seeds here, not the model seed.
    if let Some(seed) = c.seed {
        cfg.data.scene_seed = seed;
    }
    let root = c.out.clone().or_else(|| cfg.data.dir.clone()).unwrap_or_else(|| cfg.out_dir.join("data"));
    let manifest = write_dataset(&cfg, &root)?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), root.display());
    Ok(())
}

fn cmd_train(c: &Common) -> Result<(), Failure> {
    let cfg = resolve(c)?;
    let scenes = scenes_for(&cfg)?;
    let out = train(&cfg, &scenes, Some(&cfg.out_dir), |p| {
        eprintln!(
            "step {:>6}  acc_i {:.3}  acc_p {:.3}  acc_c {:.3}  acc_s {:.3}  loss {:.4}",
            p.step, p.acc_i, p.acc_p, p.acc_c, p.acc_s, p.loss
        )
    })?;
    println!(
        "trained {} steps ({} skipped); best acc_s {:.4} at step {}; outputs in {}",
        out.steps,
        out.skipped,
        out.best_acc_s,
        out.best_step,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_eval(w: &WithCheckpoint) -> Result<(), Failure> {
    let cfg = resolve(&w.common)?;
    let model = load_model(w, &cfg)?;
    let scenes = scenes_for(&cfg)?;
    let ev = evaluate(&model, &scenes.val, &cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let mut acc = String::from("scene,acc_i,acc_p,acc_c,acc_s,loss\n");
    for s in &ev.scenes {
        let r = &s.report;
        writeln!(acc, "{},{},{},{},{},{}", s.scene_id, r.acc_i, r.acc_p, r.acc_c, r.acc_s, s.loss).unwrap();
    }
    writeln!(acc, "mean,{},{},{},{},{}", ev.acc_i, ev.acc_p, ev.acc_c, ev.acc_s, ev.loss).unwrap();
    write_text(&cfg.out_dir.join("eval_acc.csv"), &acc)?;

    let mut matches = String::from("scene,anchor,predicted,similarity,correct\n");
    for s in &ev.scenes {
        for m in &s.report.records_s {
            writeln!(matches, "{},{},{},{},{}", s.scene_id, m.anchor, m.predicted, m.similarity, m.correct() as u8).unwrap();
        }
    }
    write_text(&cfg.out_dir.join("matches.csv"), &matches)?;
    write_histogram_csv(&cfg.out_dir.join("mismatch_hist.csv"), &ev.mismatch_histogram(&cfg.eval.bin_edges)?)?;

    println!("acc_i {:.4}  acc_p {:.4}  acc_c {:.4}  acc_s {:.4}  loss {:.4}", ev.acc_i, ev.acc_p, ev.acc_c, ev.acc_s, ev.loss);
    Ok(())
}

fn cmd_visualize(w: &WithCheckpoint, scene: usize) -> Result<(), Failure> {
    let cfg = resolve(&w.common)?;
    let model = load_model(w, &cfg)?;
    let scenes = scenes_for(&cfg)?;
    let s = scenes
        .val
        .get(scene)
        .ok_or_else(|| Failure::Usage(format!("--scene {scene}: only {} validation scenes", scenes.val.len())))?;
    let out = visualize(&model, s, &cfg, &cfg.out_dir)?;
    for f in &out.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<(), Failure> {
    let results = run_suite(seed, corrupt)?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<24} {}  max_rel_err {:.3e}  tol {:.0e}  coords {}",
            r.name,
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_err,
            r.tol,
            r.checked
        );
        if !r.passed {
            failed.push(format!("{} ({:.3e})", r.name, r.max_rel_err));
        }
    }
    if failed.is_empty() {
        println!("{} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::Numerical(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(w) => cmd_eval(w),
        Command::Visualize { inner, scene } => cmd_visualize(inner, *scene),
        Command::Gradcheck { seed, corrupt } => cmd_gradcheck(*seed, corrupt.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
