//! diffmod: generation, training, evaluation, inference, verification, and
//! plot-data emission for the point-denoising moving-object detector.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use diffmod::assign::{mink_ota, schedule_params, AssignConfig, ScheduleKind};
use diffmod::config::{load_config, RunConfig};
use diffmod::error::Error;
use diffmod::loss::missing_penalty;
use diffmod::model::DiffModParams;
use diffmod::pipeline::ablate::{run_ablation, AblationKind};
use diffmod::pipeline::eval::{evaluate, infer_sequence, EvalConfig};
use diffmod::pipeline::gradsuite;
use diffmod::pipeline::train::train;
use diffmod::scenegen::io::{make_dataset, read_dataset, read_scene, Split};
use diffmod::sraa::quantize_distance;

#[derive(Parser)]
#[command(name = "diffmod", version, about = "Progressive point-denoising moving-object detector")]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path config override, e.g. --set train.iterations=500 (repeatable).
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Root seed driving every derived stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/test scene directories).
    Gen,
    /// Train a model on a generated dataset.
    Train {
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split to evaluate: train or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run streaming inference over one scene directory.
    Infer {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Resume temporal state from a state checkpoint.
        #[arg(long)]
        state_in: Option<PathBuf>,
        /// Save the final temporal state for later resumption.
        #[arg(long)]
        state_out: Option<PathBuf>,
    },
    /// Standalone MinK OTA assignment on CSV point/target files.
    Assign {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        level: usize,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value_t = 4.0)]
        r: f64,
        #[arg(long, default_value = "exponential")]
        schedule: String,
    },
    /// Run the gradient verification suite; exits non-zero on any failure.
    Gradcheck,
    /// Train both arms of an ablation and report the metric deltas.
    Ablate {
        /// assignment | missing_loss | scheduling | tpgf
        kind: String,
        /// Comma-separated seeds (at least 3).
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Emit CSV curve data.
    Plot {
        /// gx | lmiss | schedule
        which: String,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 3,
        Error::Io(_) => 4,
        Error::NonFinite(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    diffmod::pipeline::init_thread_pool();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let file_text = match &cli.config {
        Some(path) => Some(fs::read_to_string(path)?),
        None => None,
    };
    let mut cfg = load_config(file_text.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Reproducibility contract: the fully-resolved config lands next to outputs.
fn echo_config(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    fs::write(out.join("effective_config.json"), cfg.to_json_pretty()?)?;
    Ok(())
}

fn require_out(cli: &Cli) -> Result<PathBuf, Error> {
    cli.out
        .clone()
        .ok_or_else(|| Error::Config("--out DIR is required for this subcommand".into()))
}

fn load_split(data: &Path, split: Split) -> Result<Vec<diffmod::scenegen::SceneSequence>, Error> {
    let entries = read_dataset(data)?;
    entries
        .into_iter()
        .filter(|(_, s)| *s == split)
        .map(|(dir, _)| read_scene(&dir))
        .collect()
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match &cli.command {
        Command::Gen => {
            let cfg = resolve_config(&cli)?;
            let out = require_out(&cli)?;
            echo_config(&cfg, &out)?;
            let manifest = make_dataset(
                cfg.dataset.n_train,
                cfg.dataset.n_test,
                &cfg.scene,
                cfg.dataset_seed(),
                &out,
            )?;
            println!(
                "generated {} scenes ({} train / {} test) under {}",
                manifest.scenes.len(),
                cfg.dataset.n_train,
                cfg.dataset.n_test,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Train { data } => {
            let cfg = resolve_config(&cli)?;
            let out = require_out(&cli)?;
            echo_config(&cfg, &out)?;
            let scenes = load_split(data, Split::Train)?;
            let mut model = DiffModParams::new(cfg.model.clone())?;
            let log_path = out.join("train_log.jsonl");
            let mut log_file = fs::File::create(&log_path)?;
            use std::io::Write;
            let result = train(&mut model, &scenes, &cfg.train, |entry| {
                let line = serde_json::to_string(entry).expect("log entry serializes");
                let _ = writeln!(log_file, "{line}");
                println!(
                    "iter {:>5}  lr {:.2e}  loss {:.4}",
                    entry.iteration, entry.lr, entry.total
                );
            });
            result?;
            let ckpt = out.join("checkpoint.ckpt");
            model.save(&ckpt)?;
            println!("checkpoint written to {}", ckpt.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval { data, checkpoint, split } => {
            let cfg = resolve_config(&cli)?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Config(format!("unknown split {other:?}"))),
            };
            let scenes = load_split(data, split)?;
            let model = DiffModParams::load(checkpoint)?;
            let eval_cfg = EvalConfig {
                d_eval: cfg.eval.d_eval,
                seed: cfg.eval.seed,
            };
            let report = evaluate(&model, &scenes, &eval_cfg)?;
            println!(
                "mean over {} sequences: Re {:.4} Pr {:.4} F1 {:.4} jitter {:.4}",
                report.per_sequence.len(),
                report.mean_recall,
                report.mean_precision,
                report.mean_f1,
                report.mean_jitter
            );
            if let Some(out) = &cli.out {
                echo_config(&cfg, out)?;
                fs::write(out.join("metrics.csv"), report.to_csv())?;
                println!("metrics written to {}", out.join("metrics.csv").display());
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Infer { scene, checkpoint, state_in, state_out } => {
            let cfg = resolve_config(&cli)?;
            let model = DiffModParams::load(checkpoint)?;
            let seq = read_scene(scene)?;
            let mut runner = diffmod::model::SequenceRunner::new(
                &model,
                seq.config.width,
                seq.config.height,
                cfg.eval.seed,
            )?;
            if let Some(path) = state_in {
                runner.set_state(model.load_state(path)?);
            }
            let mut csv = String::from("frame,cx,cy,confidence\n");
            for t in 0..seq.config.frames {
                for det in runner.step(&seq.frames, t)? {
                    csv.push_str(&format!(
                        "{},{:.3},{:.3},{:.6}\n",
                        det.frame, det.cx, det.cy, det.confidence
                    ));
                }
            }
            if let Some(path) = state_out {
                model.save_state(runner.state(), path)?;
            }
            match &cli.out {
                Some(out) => {
                    echo_config(&cfg, out)?;
                    fs::write(out.join("detections.csv"), &csv)?;
                    println!("detections written to {}", out.join("detections.csv").display());
                }
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Assign { points, targets, k, level, levels, r, schedule } => {
            let pts = read_points_csv(points)?;
            let tgt_rows = read_points_csv(targets)?;
            let tgts: Vec<(f64, f64)> = tgt_rows.chunks_exact(2).map(|c| (c[0], c[1])).collect();
            let schedule = match schedule.as_str() {
                "exponential" => ScheduleKind::Exponential,
                "linear" => ScheduleKind::Linear,
                other => return Err(Error::Config(format!("unknown schedule {other:?}"))),
            };
            let acfg = AssignConfig {
                k: *k,
                level: *level,
                levels: *levels,
                r: *r,
                schedule,
            };
            let assignment = mink_ota(&pts, &tgts, &acfg)?;
            let mut csv = String::from("sample_idx,target_idx,cost\n");
            for (i, j) in assignment.matched_pairs() {
                csv.push_str(&format!("{i},{j},{:.6}\n", assignment.cost(i, j)));
            }
            match &cli.out {
                Some(out) => {
                    fs::create_dir_all(out)?;
                    fs::write(out.join("matches.csv"), &csv)?;
                }
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Gradcheck => {
            let entries = gradsuite::run_suite()?;
            let mut all_pass = true;
            for e in &entries {
                println!(
                    "{:<28} error {:>10.3e}  threshold {:>7.0e}  {}",
                    e.name,
                    e.error,
                    e.threshold,
                    if e.passed() { "PASS" } else { "FAIL" }
                );
                all_pass &= e.passed();
            }
            if all_pass {
                println!("gradcheck: all {} checks passed", entries.len());
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradcheck: failures detected");
                Ok(ExitCode::FAILURE)
            }
        }

        Command::Ablate { kind, seeds } => {
            let kind: AblationKind = kind.parse()?;
            let mut cfg = match &cli.config {
                Some(_) => resolve_config(&cli)?,
                None => {
                    let mut base = diffmod::pipeline::ablate::ablation_preset();
                    // overrides still apply on top of the preset
                    let mut doc = serde_json::to_value(&base)
                        .map_err(|e| Error::Format(e.to_string()))?;
                    for ov in &cli.overrides {
                        diffmod::config::apply_override(&mut doc, ov)?;
                    }
                    base = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
                    base
                }
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>().map_err(|_| Error::Config(format!("bad seed {s:?}"))))
                .collect::<Result<_, _>>()?;
            let table = run_ablation(kind, &cfg, &seeds)?;
            print!("{}", table.summary_text());
            if let Some(out) = &cli.out {
                echo_config(&cfg, out)?;
                let path = out.join(format!("ablation_{}.csv", kind_slug(kind)));
                fs::write(&path, table.to_csv())?;
                println!("table written to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Plot { which } => {
            let cfg = resolve_config(&cli)?;
            let (name, csv) = match which.as_str() {
                "gx" => {
                    let mut csv = String::from("x,gx\n");
                    for x in 0..=512 {
                        let g = quantize_distance(x as f64, &cfg.model.sraa)?;
                        csv.push_str(&format!("{x},{g}\n"));
                    }
                    ("plot_gx.csv", csv)
                }
                "lmiss" => {
                    let mut csv = String::from("dist_ratio,l_miss\n");
                    for i in 0..=300 {
                        let ratio = i as f64 * 0.01;
                        let v = missing_penalty(ratio, cfg.train.weights.gamma2, cfg.train.weights.epsilon);
                        csv.push_str(&format!("{ratio:.2},{v:.6}\n"));
                    }
                    ("plot_lmiss.csv", csv)
                }
                "schedule" => {
                    let mut csv = String::from("schedule,level,k_min,r_thre\n");
                    for kind in [ScheduleKind::Exponential, ScheduleKind::Linear] {
                        for n in 1..=cfg.model.denoise.levels {
                            let acfg = AssignConfig {
                                k: cfg.model.denoise.k_max,
                                level: n,
                                levels: cfg.model.denoise.levels,
                                r: cfg.model.denoise.r,
                                schedule: kind,
                            };
                            let (k_min, r_thre) = schedule_params(&acfg);
                            let label = match kind {
                                ScheduleKind::Exponential => "exponential",
                                ScheduleKind::Linear => "linear",
                            };
                            csv.push_str(&format!("{label},{n},{k_min},{r_thre}\n"));
                        }
                    }
                    ("plot_schedule.csv", csv)
                }
                other => return Err(Error::Config(format!("unknown plot {other:?} (gx|lmiss|schedule)"))),
            };
            match &cli.out {
                Some(out) => {
                    echo_config(&cfg, out)?;
                    fs::write(out.join(name), &csv)?;
                    println!("wrote {}", out.join(name).display());
                }
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn kind_slug(kind: AblationKind) -> &'static str {
    match kind {
        AblationKind::Assignment => "assignment",
        AblationKind::MissingLoss => "missing_loss",
        AblationKind::Scheduling => "scheduling",
        AblationKind::Tpgf => "tpgf",
    }
}

/// Reads a CSV with a `cx,cy` header into a flat coordinate list.
fn read_points_csv(path: &Path) -> Result<Vec<f64>, Error> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "cx,cy" {
                return Err(Error::Format(format!(
                    "{}: expected header cx,cy, got {line:?}",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("{}: bad row {line:?}", path.display())))?;
        let x: f64 = a.trim().parse().map_err(|_| Error::Format(format!("bad cx {a:?}")))?;
        let y: f64 = b.trim().parse().map_err(|_| Error::Format(format!("bad cy {b:?}")))?;
        out.push(x);
        out.push(y);
    }
    Ok(out)
}
