use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use edgesynth::data::export::{layout_to_rgb, write_image};
use edgesynth::data::{DatasetSpec, Image};
use edgesynth::eval::{evaluate, MetricReport};
use edgesynth::semantic::dump_class_channels;
use edgesynth::training::{
    ablation_config, load_checkpoint, save_checkpoint, Model, TrainLog, TrainState, Trainer, ABLATION_ROWS,
};
use edgesynth::verify::{closed_form_suite, gradient_suite, oracle_suite, Check};
use edgesynth::Config;

#[derive(Parser)]
#[command(name = "edgesynth", version, about = "Edge-guided layout-to-image synthesis on a procedural shapes world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config, or resume from a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out layouts.
    Eval(EvalArgs),
    /// Write the image panels produced for one layout.
    Generate(GenerateArgs),
    /// Finite-difference check of every loss.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Loop, exhaustive and closed-form oracles.
    OracleCheck,
    /// Short training runs of every ablation row.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation row B1..B8 applied on top of the config.
    #[arg(long)]
    ablation: Option<String>,
    /// Average the class-specific output with the refined image.
    #[arg(long)]
    fuse_ig: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => Config::desk(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(row) = &self.ablation {
            cfg = ablation_config(&cfg, row)?;
        }
        cfg.train.fuse_ig |= self.fuse_ig;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Total steps to reach; the config value when omitted.
    #[arg(long)]
    steps: Option<u64>,
    /// Resume from this checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Also save a checkpoint every this many steps.
    #[arg(long)]
    save_every: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Trained weights; a freshly initialised model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed of the held-out layout to render.
    #[arg(long, default_value_t = 0)]
    layout: u64,
    #[arg(long, default_value = "runs/generate")]
    out: PathBuf,
    /// Also write each channel of the gated class map.
    #[arg(long)]
    dump_class_channels: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Generate(a) => generate(a),
        Command::Gradcheck { seeds } => report(gradient_suite(seeds)?),
        Command::OracleCheck => {
            let mut checks = closed_form_suite()?;
            checks.extend(oracle_suite()?);
            report(checks)
        }
        Command::Ablate(a) => ablate(a),
    }
}

fn report(checks: Vec<Check>) -> anyhow::Result<()> {
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut trainer = match &a.checkpoint {
        Some(p) => Trainer::resume(load_checkpoint(p)?)?,
        None => Trainer::new(a.cfg.resolve()?)?,
    };
    let until = a.steps.unwrap_or(trainer.state.config.train.steps);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), trainer.state.config.to_toml_string()?)?;
    let mut log = TrainLog::create(&a.out.join("train.tsv"))?;
    let out = a.out.clone();
    trainer.run_until(until, |state, r| {
        log.record(r)?;
        if r.step % 50 == 0 {
            info!("step {} total {:.3} d {:.3}", r.step, r.generator.total, r.discriminator);
        }
        if let Some(every) = a.save_every {
            if state.step % every == 0 {
                save_checkpoint(state, &out.join(format!("step{}.ckpt", state.step)))?;
            }
        }
        Ok(())
    })?;
    log.flush()?;
    let path = a.out.join("checkpoint.ckpt");
    save_checkpoint(&trainer.state, &path)?;
    println!("saved {} at step {}", path.display(), trainer.state.step);
    Ok(())
}

fn write_report(r: &MetricReport, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.txt"), r.to_text())?;
    fs::write(dir.join("classes.tsv"), r.class_table())?;
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let report = evaluate(&state.model, &state.config, state.step)?;
    print!("{}", report.to_text());
    if let Some(dir) = &a.out {
        write_report(&report, dir)?;
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let (cfg, model) = match &a.checkpoint {
        Some(p) => {
            let mut s: TrainState = load_checkpoint(p)?;
            s.config.train.fuse_ig |= a.cfg.fuse_ig;
            (s.config, s.model)
        }
        None => {
            let cfg = a.cfg.resolve()?;
            let model = Model::init(&cfg)?;
            (cfg, model)
        }
    };
    let scene = DatasetSpec::heldout(&cfg.dataset, a.layout + 1).scene(a.layout)?;
    let out = model.synthesize(&cfg, std::slice::from_ref(&scene.layout))?;
    fs::create_dir_all(&a.out)?;
    layout_to_rgb(&scene.layout).save(a.out.join("layout.png"))?;
    write_image(&scene.image, &a.out.join("real.png"))?;
    let panels = [
        ("edge", out.edge.clone()),
        ("attention", out.attention.map(|t| t.map(|v| 2.0 * v - 1.0))),
        ("image_prime", Some(out.image_prime)),
        ("image_dprime", out.image_dprime),
        ("class_image", out.class_image),
        ("final", Some(out.final_image)),
    ];
    for (name, t) in panels {
        if let Some(t) = t {
            write_image(&Image::from_tensor(&t, 0)?, &a.out.join(format!("{name}.png")))?;
        }
    }
    if a.dump_class_channels {
        match &out.class_map {
            Some(map) => {
                dump_class_channels(map, &a.out, "class_map")?;
            }
            None => bail!("the semantic preserving module is disabled in this config"),
        }
    }
    println!("wrote panels for layout {} to {}", a.layout, a.out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let base = a.cfg.resolve()?;
    fs::create_dir_all(&a.out)?;
    let mut table = String::from("row\tmiou\taccuracy\tpole_iou\tedge_f1\tflag\n");
    let mut best: Option<f64> = None;
    for row in ABLATION_ROWS {
        let cfg = ablation_config(&base, row)?;
        let mut trainer = Trainer::new(cfg.clone())?;
        trainer.run_until(a.steps, |_, _| Ok(()))?;
        let r = evaluate(&trainer.state.model, &cfg, trainer.state.step)?;
        write_report(&r, &a.out.join(row))?;
        let flag = match best {
            Some(b) if r.mean_iou < b - 0.02 => "below-earlier-row",
            _ => "",
        };
        best = Some(best.map_or(r.mean_iou, |b| b.max(r.mean_iou)));
        let cell = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v:.4}"));
        let line = format!(
            "{row}\t{:.4}\t{:.4}\t{}\t{}\t{flag}\n",
            r.mean_iou,
            r.accuracy,
            cell(r.small_object_iou),
            cell(r.edge_f1)
        );
        print!("{line}");
        table.push_str(&line);
    }
    fs::write(a.out.join("ablation.tsv"), table)?;
    Ok(())
}
