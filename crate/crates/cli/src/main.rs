//! `lungscore` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lungscore::config::{ModelChoice, RunConfig};
use lungscore::experiments::{
    ablate_augment, ablation_csv, agreement, evaluate, predict_members, predictions_csv,
    render_sweep_plot, rotation_sweep, run_pipeline, sweep_angles, sweep_csv, write_evaluations,
    Member, PipelineConfig, StageEpochs,
};
use lungscore::explain::{explanation_map, render_explanation};
use lungscore::imaging::io::read_image;
use lungscore::imaging::{AugmentPolicy, GrayImage};
use lungscore::losses::LossConfig;
use lungscore::network::{predict_score, AlignControl, AttentionMode};
use lungscore::scoring::parse_rater_csv;
use lungscore::synth::{gen_dataset, DatasetConfig};
use lungscore::train::{
    initial_checkpoint, prepare_image, train_stage, Checkpoint, Dataset, Split, Stage, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "lungscore",
    version,
    about = "Regional lung severity scoring on chest radiographs"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

/// Configuration file plus per-key overrides.
#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    input_size: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    attention_mode: Option<String>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a phantom dataset into `data_dir`.
    GenData {
        #[arg(long, default_value_t = 2500)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
    },
    /// Train one stage (`seg`, `align`, `score`, `finetune`) or all (`full`).
    Train {
        #[arg(long)]
        stage: String,
        /// Checkpoint the stage starts from.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_parser = parse_policy, default_value = "all")]
        augment: AugmentPolicy,
    },
    /// Score images (or the test split) with one or more checkpoints.
    Predict {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Image files; the dataset's test split when omitted.
        #[arg(long)]
        images: Vec<PathBuf>,
    },
    /// Occlusion explanation map of one image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Error statistics and confusion matrices on a split.
    Evaluate {
        /// HA checkpoints: best first, then further ensemble members.
        #[arg(long)]
        ha: Vec<PathBuf>,
        #[arg(long)]
        sa: Vec<PathBuf>,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
    },
    /// Inter-rater agreement from a rater CSV.
    Agreement {
        /// Defaults to `raters.csv` in `data_dir`.
        #[arg(long)]
        raters: Option<PathBuf>,
    },
    /// Test-set MAE under rotations, with and without alignment.
    SweepRotation {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Retrain scoring and fine-tuning under each augmentation policy.
    AblateAugment {
        /// Checkpoint that completed the alignment stage.
        #[arg(long)]
        from: PathBuf,
        /// Epochs for the scoring and the fine-tuning stage.
        #[arg(long, default_value_t = 5)]
        score_epochs: usize,
        #[arg(long, default_value_t = 3)]
        finetune_epochs: usize,
    },
}

fn parse_policy(s: &str) -> Result<AugmentPolicy, String> {
    s.parse().map_err(|e: lungscore::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (train|val|test)")),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text, &p.display().to_string())?
        }
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    let flags: [(&str, Option<String>); 6] = [
        ("seed", c.seed.map(|v| v.to_string())),
        ("input_size", c.input_size.map(|v| v.to_string())),
        ("epochs", c.epochs.map(|v| v.to_string())),
        ("attention_mode", c.attention_mode.clone()),
        (
            "data_dir",
            c.data_dir.as_ref().map(|p| p.display().to_string()),
        ),
        (
            "out_dir",
            c.out_dir.as_ref().map(|p| p.display().to_string()),
        ),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        lr_scale: cfg.lr / d.base_lr,
        plateau_patience: cfg.patience,
        seed: cfg.seed,
        loss: LossConfig {
            alpha: cfg.alpha,
            beta: cfg.beta,
        },
        input_size: cfg.input_size,
        attention: match cfg.attention_mode {
            ModelChoice::Single(m) => m,
            ModelChoice::Ensemble => AttentionMode::Hard,
        },
        ..d
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn load_data(cfg: &RunConfig, preprocess: bool) -> Result<Dataset> {
    Dataset::load(&cfg.data_dir, cfg.input_size, preprocess)
        .with_context(|| format!("loading dataset from {}", cfg.data_dir.display()))
}

fn members(cks: &[Checkpoint]) -> Result<Vec<Member<'_>>> {
    cks.iter()
        .map(|c| match c.attention {
            Some(mode) => Ok(Member {
                model: &c.model,
                mode,
            }),
            None => bail!(
                "checkpoint has not been trained for scoring (stages: {:?})",
                c.stages
            ),
        })
        .collect()
}

fn check_input_size(cks: &[Checkpoint], cfg: &RunConfig) -> Result<()> {
    if let Some(c) = cks
        .iter()
        .find(|c| c.model.config.input_size != cfg.input_size)
    {
        bail!(
            "checkpoint input size {} differs from input_size {}",
            c.model.config.input_size,
            cfg.input_size
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = &cfg.out_dir;
    match cli.cmd {
        Command::GenData { n, image_size } => {
            let dc = DatasetConfig {
                n,
                seed: cfg.seed,
                image_size,
                ..DatasetConfig::default()
            };
            gen_dataset(&dc, &cfg.data_dir)?;
            println!("wrote {n} phantoms to {}", cfg.data_dir.display());
        }
        Command::Train {
            stage,
            from,
            augment,
        } => {
            let data = load_data(&cfg, true)?;
            let tc = TrainConfig {
                augment,
                ..train_config(&cfg)
            };
            if stage == "full" {
                let modes = match cfg.attention_mode {
                    ModelChoice::Single(m) => vec![m],
                    ModelChoice::Ensemble => vec![AttentionMode::Hard, AttentionMode::Soft],
                };
                let pc = PipelineConfig {
                    train: tc,
                    epochs: StageEpochs::uniform(cfg.epochs),
                    modes,
                };
                let run = run_pipeline(&data, &pc, |m| println!("{m}"))?;
                run.save(out)?;
            } else {
                let stage: Stage = stage.parse().map_err(|_| {
                    anyhow!("unknown stage `{stage}` (seg|align|score|finetune|full)")
                })?;
                if matches!(stage, Stage::Scoring | Stage::Finetune)
                    && cfg.attention_mode == ModelChoice::Ensemble
                {
                    bail!(
                        "the {} stage trains one model; set attention_mode to ha or sa",
                        stage.tag()
                    );
                }
                let prev = match (&from, stage) {
                    (Some(p), _) => load_checkpoint(p)?,
                    (None, Stage::Segmentation) => initial_checkpoint(&tc)?,
                    (None, _) => bail!(
                        "--from <checkpoint> is required for the {} stage",
                        stage.tag()
                    ),
                };
                let r = train_stage(&prev, &data, &TrainConfig { stage, ..tc })?;
                let dir = out.join(stage.tag());
                r.best.save(&dir.join("best"))?;
                r.last.save(&dir.join("last"))?;
                write(&dir.join("history.csv"), &r.report.to_csv())?;
                println!(
                    "{}: best validation metric {:.4} at epoch {}",
                    stage.tag(),
                    r.report.best_val,
                    r.report.best_epoch
                );
            }
        }
        Command::Predict {
            checkpoints,
            images,
        } => {
            let cks: Vec<Checkpoint> = checkpoints
                .iter()
                .map(|p| load_checkpoint(p))
                .collect::<Result<_>>()?;
            check_input_size(&cks, &cfg)?;
            let (ids, imgs): (Vec<String>, Vec<GrayImage>) = if images.is_empty() {
                let data = load_data(&cfg, true)?;
                data.test.into_iter().map(|s| (s.id, s.image)).unzip()
            } else {
                images
                    .iter()
                    .map(|p| {
                        let img =
                            read_image(p).with_context(|| format!("reading {}", p.display()))?;
                        let id = p.file_stem().map_or_else(
                            || p.display().to_string(),
                            |s| s.to_string_lossy().into_owned(),
                        );
                        Ok((id, prepare_image(&img, cfg.input_size, true)))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .unzip()
            };
            let refs: Vec<&GrayImage> = imgs.iter().collect();
            let d = predict_members(&members(&cks)?, &refs, AlignControl::Estimated, cfg.batch)?;
            let preds: Vec<_> = d.iter().map(predict_score).collect();
            let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            write(
                &out.join("predictions.csv"),
                &predictions_csv(&id_refs, &preds),
            )?;
            println!(
                "wrote {} predictions to {}",
                preds.len(),
                out.join("predictions.csv").display()
            );
        }
        Command::Explain { checkpoint, image } => {
            let ck = load_checkpoint(&checkpoint)?;
            check_input_size(std::slice::from_ref(&ck), &cfg)?;
            let m = members(std::slice::from_ref(&ck))?[0];
            let img = read_image(&image).with_context(|| format!("reading {}", image.display()))?;
            let img = prepare_image(&img, cfg.input_size, true);
            let e = explanation_map(m.model, &img, cfg.n_superpixels, m.mode)?;
            let pred = predict_score(&e.p0);
            let stem = image
                .file_stem()
                .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            render_explanation(&e, &pred, &out.join(format!("explain_{stem}.png")))?;
            write(&out.join(format!("explain_{stem}.csv")), &e.to_csv())?;
            println!("predicted {pred} from {} forward passes", e.forward_passes);
        }
        Command::Evaluate { ha, sa, split } => {
            if ha.is_empty() && sa.is_empty() {
                bail!("evaluate needs at least one --ha or --sa checkpoint");
            }
            let load = |ps: &[PathBuf]| -> Result<Vec<Checkpoint>> {
                ps.iter().map(|p| load_checkpoint(p)).collect()
            };
            let (ha, sa) = (load(&ha)?, load(&sa)?);
            check_input_size(&ha, &cfg)?;
            check_input_size(&sa, &cfg)?;
            let data = load_data(&cfg, true)?;
            let samples = data.split(split);
            if samples.is_empty() {
                bail!("the selected split is empty");
            }
            let hm: Vec<_> = ha.iter().map(|c| &c.model).collect();
            let sm: Vec<_> = sa.iter().map(|c| &c.model).collect();
            let evals = evaluate(&hm, &sm, samples, cfg.batch)?;
            write_evaluations(&evals, out)?;
            for e in &evals {
                println!("{}: region MAE {:.4}", e.tag, e.mae);
            }
        }
        Command::Agreement { raters } => {
            let path = raters.unwrap_or_else(|| cfg.data_dir.join("raters.csv"));
            let text =
                fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let a = agreement(&parse_rater_csv(&text, &path.display().to_string())?)?;
            write(&out.join("agreement.csv"), &a.mae_csv)?;
            write(&out.join("agreement_kappa.csv"), &a.kappa_csv)?;
            println!("wrote agreement reports to {}", out.display());
        }
        Command::SweepRotation { checkpoints } => {
            let cks: Vec<Checkpoint> = checkpoints
                .iter()
                .map(|p| load_checkpoint(p))
                .collect::<Result<_>>()?;
            check_input_size(&cks, &cfg)?;
            let data = load_data(&cfg, true)?;
            let rows = rotation_sweep(&members(&cks)?, &data.test, &sweep_angles(), cfg.batch)?;
            write(&out.join("rotation_sweep.csv"), &sweep_csv(&rows))?;
            render_sweep_plot(&rows, &out.join("rotation_sweep.png"))?;
            println!(
                "wrote {} angles to {}",
                rows.len(),
                out.join("rotation_sweep.csv").display()
            );
        }
        Command::AblateAugment {
            from,
            score_epochs,
            finetune_epochs,
        } => {
            if cfg.attention_mode == ModelChoice::Ensemble {
                bail!("ablation trains one model; set attention_mode to ha or sa");
            }
            let base = load_checkpoint(&from)?;
            let data = load_data(&cfg, true)?;
            let raw = load_data(&cfg, false)?;
            let rows = ablate_augment(
                &base,
                &data,
                &raw,
                &train_config(&cfg),
                (score_epochs, finetune_epochs),
                data.val.len().max(1),
            )?;
            write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
            println!("wrote {} ablation rows", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
