//! `medgrpo`: score, bin, train, evaluate and compare group-relative policy
//! optimization runs on the simulated multiple-choice task.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 data
//! error, 4 numerical failure.

mod plot;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use medgrpo_core::config::Prepared;
use medgrpo_core::curriculum::{partition_bins, save_bins};
use medgrpo_core::metrics::{self, evaluate, invalid_ratio, rolling_mean, save_curves};
use medgrpo_core::{Error, ErrorKind, MetricsLog, PolicyParams, RunConfig, Strategy, TrainOutcome};

use plot::{line_chart, Series};

#[derive(Debug, Parser)]
#[command(name = "medgrpo", version, about = "Group-relative policy optimization on a simulated multiple-choice task")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Group strategy: vanilla, dapo_resample, gpg_scale or gdqa.
    #[arg(long, global = true)]
    strategy: Option<String>,

    /// Override a configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write per-question difficulty scores sorted by score.
    Score,
    /// Partition scored questions into curriculum bins.
    Bin,
    /// Train and write metrics, curves and the final checkpoint.
    Train,
    /// Evaluate a checkpoint on unmodified prompts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train several methods on identical data and seeds and tabulate them.
    /// Methods are strategy names, optionally suffixed with `+asc` to enable
    /// the curriculum.
    Compare {
        #[arg(required = true, num_args = 1..)]
        methods: Vec<String>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numerical) => 4,
        Some(ErrorKind::Io) | None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Core errors already embed their cause in the message.
            let mut msg = err.to_string();
            for cause in err.chain().skip(1) {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    msg = format!("{msg}: {text}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(s) = &cli.strategy {
        cfg.grpo.strategy = s.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    write_effective_config(&cfg, &cfg.output_dir)?;
    let prepared = cfg.prepare()?;
    match &cli.command {
        Command::Score => cmd_score(&cfg, &prepared),
        Command::Bin => cmd_bin(&cfg, &prepared),
        Command::Train => cmd_train(&cfg, &prepared),
        Command::Eval { checkpoint } => cmd_eval(&cfg, &prepared, checkpoint),
        Command::Compare { methods } => cmd_compare(&cfg, &prepared, methods),
    }
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_effective_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let text = format!("{}\n{}", cfg.provenance().comment_line("#"), cfg.to_text());
    write_text(&dir.join("config.txt"), &text)
}

fn cmd_score(cfg: &RunConfig, p: &Prepared) -> Result<()> {
    let mut scores = p.scores.clone();
    scores.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.question_id.cmp(&b.question_id)));
    let path = cfg.output_dir.join("scores.csv");
    let mut w = std::io::BufWriter::new(create(&path)?);
    writeln!(w, "{}", cfg.provenance().comment_line("#"))?;
    writeln!(w, "question_id,anatomy_label,score")?;
    for s in &scores {
        let label = p.dataset.get(&s.question_id).map(|q| q.anatomy_label.as_str()).unwrap_or("");
        writeln!(w, "{},{},{:?}", s.question_id, label, s.score)?;
    }
    w.flush()?;
    println!("scored {} questions -> {}", scores.len(), path.display());
    Ok(())
}

fn cmd_bin(cfg: &RunConfig, p: &Prepared) -> Result<()> {
    let bins = partition_bins(&p.scores, cfg.curriculum.num_bins, cfg.curriculum.strategy)?;
    let path = cfg.output_dir.join("bins.jsonl");
    save_bins(&bins, &path, Some(&cfg.provenance()))?;
    let lookup: std::collections::HashMap<&str, f64> =
        p.scores.iter().map(|s| (s.question_id.as_str(), s.score)).collect();
    for b in &bins {
        let member: Vec<f64> = b.question_ids.iter().filter_map(|id| lookup.get(id.as_str()).copied()).collect();
        let lo = member.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = member.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!(
            "bin {}: {} questions, scores [{lo:.4}, {hi:.4}], edges [{:.4}, {:.4}]",
            b.index,
            b.question_ids.len(),
            b.lower,
            b.upper
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

struct RunFiles {
    final_reward: f64,
    final_invalid: f64,
}

fn write_run(cfg: &RunConfig, out: &TrainOutcome, dir: &Path) -> Result<RunFiles> {
    let prov = cfg.provenance();
    out.log.save_csv(dir.join("metrics.csv"), Some(&prov))?;
    save_curves(&out.log, cfg.metrics_window, dir.join("curves.csv"), Some(&prov))?;
    out.state.params.save_checkpoint(dir.join("checkpoint.txt"), Some(&prov))?;
    let (reward, invalid) = rolling(&out.log, cfg.metrics_window)?;
    let steps: Vec<f64> = out.log.rows.iter().map(|r| r.step as f64).collect();
    let svg = line_chart(
        "Training curves",
        "step",
        "rolling value",
        &[
            Series {
                name: "reward mean",
                points: steps.iter().copied().zip(reward.iter().copied()).collect(),
            },
            Series {
                name: "invalid ratio",
                points: steps.iter().copied().zip(invalid.iter().copied()).collect(),
            },
        ],
        &prov,
    );
    write_text(&dir.join("curves.svg"), &svg)?;
    if out.log.perturbation_fallbacks > 0 {
        log::warn!(
            "{} perturbations kept the original stimulus after exhausting rejections",
            out.log.perturbation_fallbacks
        );
    }
    Ok(RunFiles {
        final_reward: reward.last().copied().unwrap_or(f64::NAN),
        final_invalid: invalid.last().copied().unwrap_or(f64::NAN),
    })
}

fn rolling(log: &MetricsLog, window: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let rewards: Vec<f64> = log.rows.iter().map(|r| r.reward_mean).collect();
    let invalid = invalid_ratio(log, window, false)?.overall;
    Ok((rolling_mean(&rewards, window), invalid))
}

fn cmd_train(cfg: &RunConfig, p: &Prepared) -> Result<()> {
    let out = cfg.train(p)?;
    let files = write_run(cfg, &out, &cfg.output_dir)?;
    println!(
        "trained {} steps ({}): rolling reward {:.4}, invalid ratio {:.4}, perturbation fallbacks {} -> {}",
        cfg.grpo.steps,
        cfg.grpo.strategy,
        files.final_reward,
        files.final_invalid,
        out.log.perturbation_fallbacks,
        cfg.output_dir.display()
    );
    Ok(())
}

fn write_eval(cfg: &RunConfig, params: &PolicyParams, p: &Prepared, dir: &Path) -> Result<metrics::EvalResult> {
    let result = evaluate(params, &p.dataset, cfg.seed, cfg.eval_samples)?;
    let prov = cfg.provenance();
    let mut w = std::io::BufWriter::new(create(&dir.join("eval.csv"))?);
    result.write_questions(&mut w, Some(&prov))?;
    let mut w = std::io::BufWriter::new(create(&dir.join("summary.csv"))?);
    result.write_summary(&mut w, Some(&prov))?;
    Ok(result)
}

fn cmd_eval(cfg: &RunConfig, p: &Prepared, checkpoint: &Path) -> Result<()> {
    let params = PolicyParams::load_checkpoint(checkpoint)?;
    if params.dim() != p.dataset.dimension {
        return Err(Error::DimensionMismatch {
            expected: p.dataset.dimension,
            found: params.dim(),
        }
        .into());
    }
    let r = write_eval(cfg, &params, p, &cfg.output_dir)?;
    println!(
        "avg@5 {:.4}  pass@1 {:.4}  major@5 {:.4}  ({} questions; {})",
        r.overall.avg_at_5,
        r.overall.pass_at_1,
        r.overall.major_at_5,
        r.overall.questions,
        metrics::AVG_NOTE
    );
    Ok(())
}

/// Parses `strategy` or `strategy+asc`.
fn parse_method(token: &str) -> Result<(Strategy, bool)> {
    let (name, asc) = match token.strip_suffix("+asc") {
        Some(name) => (name, true),
        None => (token, false),
    };
    Ok((name.parse::<Strategy>()?, asc))
}

fn cmd_compare(cfg: &RunConfig, p: &Prepared, methods: &[String]) -> Result<()> {
    let prov = cfg.provenance();
    let mut table = String::new();
    table.push_str(&format!("{}\n# {}\n", prov.comment_line("#"), metrics::AVG_NOTE));
    table.push_str("method,avg_at_5,pass_at_1,major_at_5,final_reward,final_invalid_ratio\n");
    let mut reward_series = Vec::new();
    let mut invalid_series = Vec::new();
    for token in methods {
        let (strategy, asc) = parse_method(token)?;
        let mut run_cfg = cfg.clone();
        run_cfg.grpo.strategy = strategy;
        run_cfg.curriculum_enabled = asc;
        let dir = cfg.output_dir.join(token);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write_effective_config(&run_cfg, &dir)?;
        let out = run_cfg.train(p)?;
        let files = write_run(&run_cfg, &out, &dir)?;
        let eval = write_eval(&run_cfg, &out.state.params, p, &dir)?;
        let a = &eval.overall;
        let row = format!(
            "{token},{:?},{:?},{:?},{:?},{:?}",
            a.avg_at_5, a.pass_at_1, a.major_at_5, files.final_reward, files.final_invalid
        );
        println!("{row}");
        table.push_str(&row);
        table.push('\n');
        let (reward, invalid) = rolling(&out.log, cfg.metrics_window)?;
        let steps: Vec<f64> = out.log.rows.iter().map(|r| r.step as f64).collect();
        reward_series.push((token.as_str(), steps.iter().copied().zip(reward).collect::<Vec<_>>()));
        invalid_series.push((token.as_str(), steps.into_iter().zip(invalid).collect::<Vec<_>>()));
    }
    write_text(&cfg.output_dir.join("comparison.csv"), &table)?;
    for (file, title, series) in [
        ("reward.svg", "Rolling reward mean", reward_series),
        ("invalid.svg", "Rolling invalid-group ratio", invalid_series),
    ] {
        let series: Vec<Series<'_>> = series.into_iter().map(|(name, points)| Series { name, points }).collect();
        write_text(&cfg.output_dir.join(file), &line_chart(title, "step", title, &series, &prov))?;
    }
    println!("wrote {}", cfg.output_dir.join("comparison.csv").display());
    Ok(())
}
