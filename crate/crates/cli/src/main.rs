use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use logmech::attractor::{probe_trajectory, DEFAULT_GRID};
use logmech::mechanics::{attach_entropy, entropy_series, step_index_cv};
use logmech::model::{encode_bytes, generate_greedy, init_model, model_from_trajectory, ModelConfig};
use logmech::report::{emit_report, ReportFormat, PER_STEP_HEADER};
use logmech::steering::{splice_steered, steer, steer_and_continue, InitialStep, SteerParams};
use logmech::{ltrj, summarize, trajectory_mechanics, Error, MechanicsSummary, StepMechanics, Trajectory};

#[derive(Parser)]
#[command(
    name = "logmech",
    version,
    about = "Log-space mechanics of hidden-state trajectories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trajectory with the toy transformer and write it as LTRJ.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// File whose raw bytes form the prompt.
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-step mechanics and summary statistics for one or more trajectories.
    Analyze {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Per-step CSV output.
        #[arg(long)]
        per_step: Option<PathBuf>,
        /// Summary JSON output; printed to stdout when no output file is given.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// CSV of the cross-trajectory CV of H at each step index.
        #[arg(long)]
        step_cv: Option<PathBuf>,
    },
    /// Steer the hidden state at one step toward a target token.
    Steer {
        path: PathBuf,
        #[arg(long)]
        step: usize,
        #[arg(long)]
        target: usize,
        #[arg(long, default_value_t = 0.5)]
        eta: f64,
        #[arg(long, default_value_t = 50)]
        max_steps: usize,
        /// Fixed initial line-search step instead of 0.1 |h|.
        #[arg(long)]
        alpha0: Option<f64>,
        /// Tokens to regenerate after the steered step (toy-model trajectories only).
        #[arg(long = "continue", default_value_t = 0)]
        continue_steps: usize,
        /// Writes the spliced, steered trajectory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count distinct argmax tokens between consecutive hidden states.
    Probe {
        path: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        /// Per-pair counts CSV output.
        #[arg(long)]
        counts: Option<PathBuf>,
    },
    /// Summarize every .ltrj file in a directory, one row per model.
    Batch {
        dir: PathBuf,
        /// Summary CSV output; printed to stdout when omitted.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
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

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            config,
            seed,
            prompt,
            steps,
            out,
        } => cmd_gen(&config, seed, &prompt, steps, &out),
        Command::Analyze {
            paths,
            per_step,
            summary,
            step_cv,
        } => cmd_analyze(&paths, per_step.as_deref(), summary.as_deref(), step_cv.as_deref()),
        Command::Steer {
            path,
            step,
            target,
            eta,
            max_steps,
            alpha0,
            continue_steps,
            out,
        } => {
            let mut params = SteerParams {
                eta,
                max_steps,
                ..SteerParams::default()
            };
            if let Some(a) = alpha0 {
                params.alpha0 = InitialStep::Fixed(a);
            }
            cmd_steer(&path, step, target, &params, continue_steps, out.as_deref())
        }
        Command::Probe { path, grid, counts } => cmd_probe(&path, grid, counts.as_deref()),
        Command::Batch { dir, summary } => cmd_batch(&dir, summary.as_deref()),
    }
}

fn load(path: &Path) -> Result<Trajectory> {
    ltrj::read_file(path).with_context(|| format!("reading {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(config_path: &Path, seed: Option<u64>, prompt_path: &Path, steps: usize, out: &Path) -> Result<()> {
    let mut config =
        ModelConfig::from_file(config_path).with_context(|| format!("loading config {}", config_path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let prompt = fs::read(prompt_path).with_context(|| format!("reading prompt {}", prompt_path.display()))?;
    if prompt.is_empty() {
        bail!("prompt file {} is empty", prompt_path.display());
    }
    let model = init_model(&config)?;
    let traj = generate_greedy(&model, &encode_bytes(&prompt), steps)?;
    ltrj::write_file(&traj, out).with_context(|| format!("writing {}", out.display()))?;
    if traj.len() < 2 {
        println!("T={} (mechanics need at least 2 steps)", traj.len());
        return Ok(());
    }
    let summary = summarize(&[trajectory_mechanics(&traj)?])?;
    println!(
        "T={} mean_H={} global_cv={}",
        traj.len(),
        summary.mean_log_e,
        summary.global_cv
    );
    Ok(())
}

fn cmd_analyze(
    paths: &[PathBuf],
    per_step: Option<&Path>,
    summary_out: Option<&Path>,
    step_cv: Option<&Path>,
) -> Result<()> {
    let mut series = Vec::with_capacity(paths.len());
    let mut entropies = Vec::new();
    for path in paths {
        let traj = load(path)?;
        let steps = trajectory_mechanics(&traj).with_context(|| format!("analyzing {}", path.display()))?;
        if traj.head().is_some() {
            entropies.push(entropy_series(&traj).with_context(|| format!("entropy of {}", path.display()))?);
        }
        series.push(steps);
    }
    let mut summary = summarize(&series)?;
    attach_entropy(&mut summary, &entropies);

    if let Some(out) = per_step {
        write_text(out, &per_step_text(&series, &summary))?;
    }
    if let Some(out) = step_cv {
        let mut text = String::from("t,n,cv\n");
        for (t, n, cv) in step_index_cv(&series) {
            let cv = cv.map(|c| c.to_string()).unwrap_or_default();
            writeln!(text, "{t},{n},{cv}")?;
        }
        write_text(out, &text)?;
    }
    let json = emit_report(&summary, None, ReportFormat::SummaryJson);
    match summary_out {
        Some(out) => write_text(out, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

/// One input keeps the plain per-step layout; several inputs get a leading
/// 0-based `trajectory` column.
fn per_step_text(series: &[Vec<StepMechanics>], summary: &MechanicsSummary) -> String {
    if let [only] = series {
        return emit_report(summary, Some(only), ReportFormat::PerStepCsv);
    }
    let mut text = format!("trajectory,{PER_STEP_HEADER}\n");
    for (i, steps) in series.iter().enumerate() {
        let body = emit_report(summary, Some(steps), ReportFormat::PerStepCsv);
        for line in body.lines().skip(1) {
            text.push_str(&format!("{i},{line}\n"));
        }
    }
    text
}

fn cmd_steer(
    path: &Path,
    step: usize,
    target: usize,
    params: &SteerParams,
    continue_steps: usize,
    out: Option<&Path>,
) -> Result<()> {
    let traj = load(path)?;
    let head = traj
        .require_head()
        .with_context(|| format!("steering {}", path.display()))?;
    if target >= head.vocab_size() {
        bail!("target {target} out of range for vocabulary of {}", head.vocab_size());
    }
    if step >= traj.len() {
        bail!("step {step} out of range for trajectory of length {}", traj.len());
    }
    let outcome = if continue_steps > 0 {
        let (model, _) = model_from_trajectory(&traj).context("continuation needs a toy-model trajectory")?;
        if model.head() != head {
            bail!("rebuilt model does not reproduce the head stored in {}", path.display());
        }
        steer_and_continue(&model, &traj, step, target, params, continue_steps)
    } else {
        steer(head, &traj.hidden_f64(step), target, params).map(|r| (r, None))
    };
    let (result, continuation) = match outcome {
        Ok(r) => r,
        Err(Error::SteeringStalled { iteration, path }) => {
            for (k, s) in path.iter().enumerate() {
                eprintln!("step {}: p={} alpha={}", k + 1, s.p_target, s.step_length);
            }
            bail!("line search stalled at iteration {iteration}");
        }
        Err(e) => return Err(e.into()),
    };

    println!("p_initial={}", result.p_initial);
    for (k, s) in result.path.iter().enumerate() {
        println!("step {}: p={} alpha={}", k + 1, s.p_target, s.step_length);
    }
    println!(
        "steps_taken={} converged={} p_final={} displacement={}",
        result.steps_taken, result.converged, result.p_final, result.total_displacement
    );
    if let Some(c) = &continuation {
        let ids: Vec<String> = c.token_ids().iter().map(u32::to_string).collect();
        println!("continuation={}", ids.join(" "));
    }
    if let Some(out) = out {
        let spliced = splice_steered(&traj, step, target, &result, continuation.as_ref())?;
        ltrj::write_file(&spliced, out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_probe(path: &Path, grid: usize, counts: Option<&Path>) -> Result<()> {
    let traj = load(path)?;
    let probe = probe_trajectory(&traj, grid).with_context(|| format!("probing {}", path.display()))?;
    println!(
        "unique tokens per pair: {} ± {} over {} pairs",
        probe.mean_unique,
        probe.std_unique,
        probe.per_pair_counts.len()
    );
    if let Some(out) = counts {
        let mut text = String::from("pair,unique_count\n");
        for (i, c) in probe.per_pair_counts.iter().enumerate() {
            writeln!(text, "{i},{c}")?;
        }
        write_text(out, &text)?;
    }
    Ok(())
}

const BATCH_COLUMNS: [&str; 9] = [
    "n_files",
    "n_steps",
    "global_cv",
    "avg_traj_cv",
    "mean_log_e",
    "kv_ratio",
    "mean_drift",
    "mean_abs_jump",
    "drift_ratio",
];

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn cmd_batch(dir: &Path, summary_out: Option<&Path>) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "ltrj"));
    files.sort();
    if files.is_empty() {
        bail!("no .ltrj files in {}", dir.display());
    }

    // model_id -> (hidden dim, per-trajectory series)
    let mut groups: BTreeMap<String, (usize, Vec<Vec<StepMechanics>>)> = BTreeMap::new();
    for path in &files {
        let traj = load(path)?;
        let steps = trajectory_mechanics(&traj).with_context(|| format!("analyzing {}", path.display()))?;
        let entry = groups
            .entry(traj.model_id().to_string())
            .or_insert_with(|| (traj.hidden_dim(), Vec::new()));
        if entry.0 != traj.hidden_dim() {
            bail!(
                "{}: hidden dim {} differs from {} seen earlier for model {}",
                path.display(),
                traj.hidden_dim(),
                entry.0,
                traj.model_id()
            );
        }
        entry.1.push(steps);
    }

    let mut rows: Vec<(String, [f64; 9])> = Vec::with_capacity(groups.len());
    for (model_id, (_, series)) in &groups {
        let s = summarize(series).with_context(|| format!("summarizing model {model_id}"))?;
        rows.push((
            model_id.clone(),
            [
                series.len() as f64,
                s.n_steps as f64,
                s.global_cv,
                s.avg_traj_cv,
                s.mean_log_e,
                s.kv_ratio,
                s.mean_drift,
                s.mean_abs_jump,
                s.drift_ratio,
            ],
        ));
    }
    let medians: Vec<f64> = (0..BATCH_COLUMNS.len())
        .map(|c| median(rows.iter().map(|r| r.1[c]).collect()))
        .collect();

    let mut text = format!("model_id,{}\n", BATCH_COLUMNS.join(","));
    for (id, values) in &rows {
        let cells: Vec<String> = values.iter().map(f64::to_string).collect();
        writeln!(text, "{id},{}", cells.join(","))?;
    }
    let cells: Vec<String> = medians.iter().map(f64::to_string).collect();
    writeln!(text, "Median (all),{}", cells.join(","))?;
    match summary_out {
        Some(out) => write_text(out, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
