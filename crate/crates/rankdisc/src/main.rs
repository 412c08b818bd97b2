//! Command-line entry point: stage commands, evaluation, k-sweep.
//!
//! Exit codes: 0 success, 1 validation error, 2 stage-dependency error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use rankdisc::config::RunConfig;
use rankdisc::data::{apply_split, Dataset, ImageSet};
use rankdisc::model::{load_checkpoint, save_checkpoint, Model, Stage};
use rankdisc::pipeline::{
    run_incremental, stage1_selfsup, stage2_supervised, stage3_joint, RunReport,
};
use rankdisc::{eval, Error, Result};

#[derive(Parser)]
#[command(
    name = "rankdisc",
    version,
    about = "Novel category discovery via rank statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct AblationArgs {
    /// Disable the pairwise BCE term.
    #[arg(long)]
    no_bce: bool,
    /// Disable the labelled cross-entropy term.
    #[arg(long)]
    no_ce: bool,
    /// Disable the consistency (MSE) term.
    #[arg(long)]
    no_consistency: bool,
    /// Skip self-supervised pretraining; stage 2 trains all blocks from
    /// scratch initialization.
    #[arg(long)]
    no_selfsup: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: self-supervised rotation pretext on all images.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Stage 2: supervised fine-tune on the labelled split.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Stage 3: joint discovery training on both splits.
    Discover {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Incremental variant: extended head + pseudo-label CE.
    Incremental {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// Evaluate a checkpoint (ACC, or old/new/all for incremental heads).
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run stage 3 once per k from the shared stage-2 checkpoint.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated top-k values, e.g. 1,5,64
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, ablation } => cmd_pretrain(&config, &ablation),
        Command::Finetune { config, ablation } => cmd_finetune(&config, &ablation),
        Command::Discover { config, ablation } => cmd_discover(&config, &ablation),
        Command::Incremental { config, ablation } => cmd_incremental(&config, &ablation),
        Command::Evaluate { config, checkpoint } => cmd_evaluate(&config, checkpoint.as_deref()),
        Command::SweepK { config, k } => cmd_sweep_k(&config, &k),
    }
}

struct Ctx {
    cfg: RunConfig,
    digest: [u8; 8],
    d_l: Dataset,
    d_u: Dataset,
}

/// Load + validate config, apply CLI ablation overrides, materialize data.
/// The config digest is computed before overrides so one checkpoint chain
/// serves every ablation run.
fn setup(config_path: &Path, ablation: &AblationArgs) -> Result<Ctx> {
    let mut cfg = RunConfig::load(config_path)?;
    let digest = cfg.digest();
    cfg.ablation.no_bce |= ablation.no_bce;
    cfg.ablation.no_ce |= ablation.no_ce;
    cfg.ablation.no_consistency |= ablation.no_consistency;
    cfg.ablation.no_selfsup |= ablation.no_selfsup;
    let ds = cfg.load_dataset()?;
    let (d_l, d_u) = apply_split(&ds, &cfg.split)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(Ctx {
        cfg,
        digest,
        d_l,
        d_u,
    })
}

fn ckpt_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn load_stage_checkpoint(ctx: &Ctx, name: &str, needed_by: &str) -> Result<Model> {
    let path = ckpt_path(&ctx.cfg, name);
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "{needed_by} requires the {name} checkpoint at {path:?}; run the earlier stage first"
        )));
    }
    let (model, digest) = load_checkpoint(&path)?;
    if digest != ctx.digest {
        return Err(Error::Incompatible(format!(
            "checkpoint {path:?} was produced by a different configuration \
             (digest {} vs {})",
            hex(&digest),
            hex(&ctx.digest)
        )));
    }
    Ok(model)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::State(format!("json serialization: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_pretrain(config_path: &Path, ablation: &AblationArgs) -> Result<()> {
    let ctx = setup(config_path, ablation)?;
    if ctx.cfg.ablation.no_selfsup {
        println!("pretrain: skipped (no_selfsup ablation)");
        return Ok(());
    }
    let mut model = Model::init(ctx.cfg.backbone.clone(), ctx.cfg.seed)?;
    let pool = ImageSet::union(&[&ctx.d_l.image_set(), &ctx.d_u.image_set()])?;
    let stats = stage1_selfsup(&mut model, &pool, &ctx.cfg.stage1, ctx.cfg.seed)?;
    save_checkpoint(&model, &ckpt_path(&ctx.cfg, "stage1.ckpt"), &ctx.digest)?;
    write_json(
        &ctx.cfg.output_dir.join("stage1.json"),
        &serde_json::json!({
            "stage": "pretrain",
            "config_digest": hex(&ctx.digest),
            "seed": ctx.cfg.seed,
            "initial_loss": stats.initial_loss,
            "final_loss": stats.final_loss,
            "rotation_acc": stats.rotation_acc,
        }),
    )?;
    println!(
        "pretrain: rotation accuracy {:.4} (loss {:.4} -> {:.4})",
        stats.rotation_acc, stats.initial_loss, stats.final_loss
    );
    Ok(())
}

fn cmd_finetune(config_path: &Path, ablation: &AblationArgs) -> Result<()> {
    let ctx = setup(config_path, ablation)?;
    let from_scratch = ctx.cfg.ablation.no_selfsup;
    let mut model = if from_scratch {
        Model::init(ctx.cfg.backbone.clone(), ctx.cfg.seed)?
    } else {
        load_stage_checkpoint(&ctx, "stage1.ckpt", "finetune")?
    };
    let stats = stage2_supervised(
        &mut model,
        &ctx.d_l,
        &ctx.cfg.stage2,
        from_scratch,
        ctx.cfg.seed,
    )?;
    save_checkpoint(&model, &ckpt_path(&ctx.cfg, "stage2.ckpt"), &ctx.digest)?;
    write_json(
        &ctx.cfg.output_dir.join("stage2.json"),
        &serde_json::json!({
            "stage": "finetune",
            "config_digest": hex(&ctx.digest),
            "seed": ctx.cfg.seed,
            "train_acc": stats.train_acc,
            "from_scratch": from_scratch,
        }),
    )?;
    println!("finetune: labelled train accuracy {:.4}", stats.train_acc);
    Ok(())
}

fn finish_joint_run(
    ctx: &Ctx,
    model: &Model,
    mut report: RunReport,
    name: &str,
) -> Result<RunReport> {
    let ckpt = ckpt_path(&ctx.cfg, &format!("{name}.ckpt"));
    save_checkpoint(model, &ckpt, &ctx.digest)?;
    report.checkpoint = Some(ckpt);
    report.write_csv(&ctx.cfg.output_dir.join(format!("{name}.csv")))?;
    Ok(report)
}

fn cmd_discover(config_path: &Path, ablation: &AblationArgs) -> Result<()> {
    let ctx = setup(config_path, ablation)?;
    let mut model = load_stage_checkpoint(&ctx, "stage2.ckpt", "discover")?;
    // k-means++ baseline on the frozen stage-2 features, for comparison
    let c_u = ctx.cfg.split.n_unlabelled();
    let baseline = eval::kmeans_acc(
        &model,
        &ctx.d_u,
        c_u,
        rankdisc::rng::subseed(ctx.cfg.seed, "kmeans-baseline"),
    )?;
    let report = stage3_joint(
        &mut model,
        &ctx.d_l,
        &ctx.d_u,
        c_u,
        &ctx.cfg.stage3,
        &ctx.cfg.augment,
        &ctx.cfg.ablation,
        ctx.cfg.seed,
        hex(&ctx.digest),
    )?;
    let report = finish_joint_run(&ctx, &model, report, "stage3")?;
    write_json(
        &ctx.cfg.output_dir.join("discover.json"),
        &serde_json::json!({
            "stage": "discover",
            "config_digest": hex(&ctx.digest),
            "seed": ctx.cfg.seed,
            "final_unlabelled_acc": report.final_acc,
            "kmeans_baseline_acc": baseline.acc,
            "ablation": ctx.cfg.ablation,
        }),
    )?;
    println!(
        "discover: unlabelled ACC {:.4} (k-means++ baseline {:.4})",
        report.final_acc, baseline.acc
    );
    Ok(())
}

fn cmd_incremental(config_path: &Path, ablation: &AblationArgs) -> Result<()> {
    let ctx = setup(config_path, ablation)?;
    let mut model = load_stage_checkpoint(&ctx, "stage2.ckpt", "incremental")?;
    let c_u = ctx.cfg.split.n_unlabelled();
    let report = run_incremental(
        &mut model,
        &ctx.d_l,
        &ctx.d_u,
        c_u,
        &ctx.cfg.stage3,
        &ctx.cfg.incremental,
        &ctx.cfg.augment,
        &ctx.cfg.ablation,
        ctx.cfg.seed,
        hex(&ctx.digest),
    )?;
    let report = finish_joint_run(&ctx, &model, report, "incremental")?;
    let inc = eval::incremental_report(&model, &ctx.d_l, &ctx.d_u)?;
    write_json(
        &ctx.cfg.output_dir.join("incremental.json"),
        &serde_json::json!({
            "stage": "incremental",
            "config_digest": hex(&ctx.digest),
            "seed": ctx.cfg.seed,
            "final_unlabelled_acc": report.final_acc,
            "old_acc": inc.old_acc,
            "new_acc": inc.new_acc,
            "all_acc": inc.all_acc,
        }),
    )?;
    println!(
        "incremental: unlabelled ACC {:.4}, old {:.4} / new {:.4} / all {:.4}",
        report.final_acc, inc.old_acc, inc.new_acc, inc.all_acc
    );
    Ok(())
}

fn cmd_evaluate(config_path: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let ctx = setup(config_path, &AblationArgs::default())?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt_path(&ctx.cfg, "stage3.ckpt"));
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "evaluate requires a checkpoint at {path:?}"
        )));
    }
    let (model, digest) = load_checkpoint(&path)?;
    if digest != ctx.digest {
        return Err(Error::Incompatible(format!(
            "checkpoint {path:?} digest {} does not match config digest {}",
            hex(&digest),
            hex(&ctx.digest)
        )));
    }
    let mut out = serde_json::json!({
        "checkpoint": path,
        "config_digest": hex(&ctx.digest),
    });
    match model.stage {
        Stage::Incremental => {
            let inc = eval::incremental_report(&model, &ctx.d_l, &ctx.d_u)?;
            let acc = eval::unlabelled_acc(&model, &ctx.d_u)?;
            out["old_acc"] = inc.old_acc.into();
            out["new_acc"] = inc.new_acc.into();
            out["all_acc"] = inc.all_acc.into();
            out["unlabelled_acc"] = acc.acc.into();
            println!(
                "evaluate: old {:.4} / new {:.4} / all {:.4}, unlabelled ACC {:.4}",
                inc.old_acc, inc.new_acc, inc.all_acc, acc.acc
            );
        }
        Stage::Discovered => {
            let acc = eval::unlabelled_acc(&model, &ctx.d_u)?;
            out["unlabelled_acc"] = acc.acc.into();
            println!("evaluate: unlabelled ACC {:.4}", acc.acc);
        }
        _ => {
            let acc = rankdisc::pipeline::labelled_accuracy(&model, &ctx.d_l)?;
            out["labelled_acc"] = acc.into();
            println!("evaluate: labelled accuracy {:.4}", acc);
        }
    }
    write_json(&ctx.cfg.output_dir.join("evaluate.json"), &out)?;
    Ok(())
}

fn cmd_sweep_k(config_path: &Path, k_values: &[usize]) -> Result<()> {
    let ctx = setup(config_path, &AblationArgs::default())?;
    let model = load_stage_checkpoint(&ctx, "stage2.ckpt", "sweep-k")?;
    let rows = eval::sweep_k(
        &model,
        &ctx.d_l,
        &ctx.d_u,
        ctx.cfg.split.n_unlabelled(),
        &ctx.cfg.stage3,
        &ctx.cfg.augment,
        &ctx.cfg.ablation,
        ctx.cfg.seed,
        &hex(&ctx.digest),
        k_values,
    )?;
    eval::write_sweep_csv(&rows, &ctx.cfg.output_dir.join("sweep_k.csv"))?;
    for (k, acc) in &rows {
        println!("sweep-k: k={k} unlabelled ACC {acc:.4}");
    }
    Ok(())
}
