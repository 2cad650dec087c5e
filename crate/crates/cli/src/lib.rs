//! Command implementations behind the `r3lab` binary.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use r3lab::rebalance::{self, RebalanceConfig, RebalanceReport};
use r3lab::schedule::{self, TrainingSchedule};
use r3lab::testbeds::{self, DiracState, DiracSummary};
use r3lab::trainer::{self, ExperimentConfig, MetricLog, Testbed};

#[derive(Debug, Parser)]
#[command(
    name = "r3lab",
    version,
    about = "Burn-in schedules and R1/R2-regularized GAN training at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one experiment and write its metric log, checkpoints and samples.
    Train(TrainArgs),
    /// Train several presets over several seeds and rank them.
    Compare(CompareArgs),
    /// Print a preset's hyperparameter curves as CSV.
    Schedule(ScheduleArgs),
    /// Run the one-parameter Dirac game with a constant learning rate and gamma.
    Dirac(DiracArgs),
    /// Run the minority-class rebalancing pipeline.
    Rebalance(RebalanceArgs),
    /// List the preset ladder.
    Presets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TestbedArg {
    Dirac,
    RingGmm,
    RingImage,
}

impl From<TestbedArg> for Testbed {
    fn from(t: TestbedArg) -> Self {
        match t {
            TestbedArg::Dirac => Testbed::Dirac,
            TestbedArg::RingGmm => Testbed::RingGmm,
            TestbedArg::RingImage => Testbed::RingImage,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON schedule file used instead of a preset.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub testbed: Option<TestbedArg>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    /// Overrides the schedule's image budget.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Trains with gamma held at zero.
    #[arg(long)]
    pub no_penalty: bool,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated preset names (at least two).
    #[arg(long, value_delimiter = ',', required = true)]
    pub presets: Vec<String>,
    /// First seed; runs use `seed..seed + runs`.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub runs: u64,
    #[arg(long, value_enum, default_value = "ring-gmm")]
    pub testbed: TestbedArg,
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long, default_value = "runs/compare")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    pub preset: String,
    #[arg(long, default_value_t = 101, value_parser = clap::value_parser!(u64).range(2..))]
    pub points: u64,
}

#[derive(Debug, Args)]
pub struct DiracArgs {
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 5000, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: u64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub theta: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub psi: f64,
    #[arg(long, default_value = "dirac_trajectory.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RebalanceArgs {
    /// JSON rebalance config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub synth_count: Option<usize>,
    #[arg(long)]
    pub gan_budget: Option<u64>,
    #[arg(long, default_value = "runs/rebalance")]
    pub out: PathBuf,
}

/// Dispatches a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Compare(a) => cmd_compare(&a, out),
        Command::Schedule(a) => {
            let csv = schedule_dump(&a.preset, a.points as usize)?;
            out.write_all(csv.as_bytes())?;
            Ok(())
        }
        Command::Dirac(a) => cmd_dirac(&a, out),
        Command::Rebalance(a) => cmd_rebalance(&a, out),
        Command::Presets => {
            out.write_all(presets_listing().as_bytes())?;
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// train

pub fn train_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let testbed = a.testbed.map(Testbed::from).unwrap_or(Testbed::RingGmm);
            let mut c = ExperimentConfig::new("exp017", testbed, a.seed);
            c.preset = None;
            c
        }
    };
    cfg.seed = a.seed;
    if let Some(t) = a.testbed {
        cfg.testbed = t.into();
    }
    if let Some(p) = &a.preset {
        cfg.preset = Some(p.clone());
        cfg.schedule = None;
    }
    if let Some(path) = &a.schedule {
        cfg.schedule = Some(TrainingSchedule::from_file(path)?);
    }
    if cfg.preset.is_none() && cfg.schedule.is_none() {
        bail!("give --preset, --schedule or a config naming one");
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(e) = a.eval_interval {
        cfg.eval_interval_images = e;
    }
    if a.budget.is_some() || a.no_penalty {
        let mut s = cfg.resolve_schedule()?;
        if let Some(b) = a.budget {
            s.total_images = b;
        }
        if a.no_penalty {
            s = s.without_penalty();
        }
        cfg.schedule = Some(s);
    }
    cfg.output_dir = Some(a.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn summary_line(log: &MetricLog) -> String {
    match log.last() {
        Some(r) => {
            let mut s = format!(
                "images_seen={} proxy_fd={:.6} d_loss={:.6} g_loss={:.6}",
                r.images_seen, r.proxy_fd, r.d_loss, r.g_loss
            );
            if let (Some(m), Some(h)) = (r.modes_covered, r.hq_fraction) {
                write!(s, " modes_covered={m} hq_fraction={h:.4}").expect("string write");
            }
            s
        }
        None => "no records".into(),
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = train_config(a)?;
    let run = trainer::run_training(&cfg)?;
    writeln!(out, "{}", summary_line(&run.log))?;
    writeln!(out, "artifacts written to {}", a.out.display())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// compare

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub preset: String,
    pub completed: usize,
    pub failed: usize,
    pub median_proxy_fd: f64,
    pub median_modes_covered: Option<f64>,
    pub median_hq_fraction: Option<f64>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// CSV ranked by ascending median proxy FD; presets with no completed run last.
pub fn compare_csv(rows: &[CompareRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut out = String::from(
        "rank,preset,completed,failed,median_proxy_fd,median_modes_covered,median_hq_fraction\n",
    );
    for (i, r) in rows.iter().enumerate() {
        let fd = if r.completed > 0 {
            format!("{:.6}", r.median_proxy_fd)
        } else {
            String::new()
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            i + 1,
            r.preset,
            r.completed,
            r.failed,
            fd,
            fmt(r.median_modes_covered),
            fmt(r.median_hq_fraction)
        )
        .expect("string write");
    }
    out
}

fn cell_config(a: &CompareArgs, preset: &str, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(preset, a.testbed.into(), seed);
    if let Some(b) = a.budget {
        let mut s = schedule::load_preset(preset)?;
        s.total_images = b;
        cfg.schedule = Some(s);
    }
    cfg.output_dir = Some(a.out.join(preset).join(format!("seed_{seed}")));
    Ok(cfg)
}

pub fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> Result<()> {
    let mut presets = a.presets.clone();
    presets.dedup();
    if presets.len() < 2 {
        bail!("compare needs at least two presets");
    }
    if a.runs == 0 {
        bail!("compare needs at least one run per preset");
    }
    for p in &presets {
        schedule::load_preset(p)?;
    }
    let mut rows = Vec::new();
    let mut failures = String::new();
    for preset in &presets {
        let (mut fds, mut modes, mut hqs) = (Vec::new(), Vec::new(), Vec::new());
        let mut failed = 0;
        for seed in a.seed..a.seed + a.runs {
            let result = cell_config(a, preset, seed)
                .and_then(|cfg| trainer::run_training(&cfg).map_err(Into::into));
            match result {
                Ok(run) => {
                    let last = run.log.last().context("run produced no records")?;
                    fds.push(last.proxy_fd);
                    if let Some(m) = last.modes_covered {
                        modes.push(m as f64);
                    }
                    if let Some(h) = last.hq_fraction {
                        hqs.push(h);
                    }
                }
                Err(e) => {
                    failed += 1;
                    writeln!(failures, "{preset} seed {seed}: {e:#}")?;
                }
            }
        }
        rows.push(CompareRow {
            preset: preset.clone(),
            completed: fds.len(),
            failed,
            median_proxy_fd: median(&mut fds).unwrap_or(f64::INFINITY),
            median_modes_covered: median(&mut modes),
            median_hq_fraction: median(&mut hqs),
        });
    }
    rows.sort_by(|x, y| {
        x.median_proxy_fd
            .total_cmp(&y.median_proxy_fd)
            .then_with(|| x.preset.cmp(&y.preset))
    });
    let csv = compare_csv(&rows);
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("summary.csv"), &csv)?;
    out.write_all(csv.as_bytes())?;
    if !failures.is_empty() {
        eprint!("{failures}");
        bail!(
            "{} cell(s) failed; summary covers completed cells",
            rows.iter().map(|r| r.failed).sum::<usize>()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// schedule, dirac, presets

pub fn schedule_dump(preset: &str, points: usize) -> Result<String> {
    if points < 2 {
        bail!("--points must be at least 2");
    }
    let s = schedule::load_preset(preset)?;
    let mut out = String::from("progress,lr,gamma,beta2,ema_halflife_kimg,aug_prob\n");
    for i in 0..points {
        let p = i as f64 / (points - 1) as f64;
        let h = s.snapshot_at_progress(p)?;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p, h.lr, h.gamma, h.beta2, h.ema_halflife_kimg, h.aug_prob
        )?;
    }
    Ok(out)
}

pub fn dirac_run(a: &DiracArgs) -> Result<(DiracSummary, Vec<DiracState>)> {
    if a.steps == 0 {
        bail!("--steps must be at least 1");
    }
    let traj = testbeds::dirac_trajectory(
        DiracState::new(a.theta, a.psi),
        a.lr,
        a.gamma,
        a.steps as usize,
    );
    Ok((testbeds::summarize_dirac(&traj), traj))
}

pub fn cmd_dirac(a: &DiracArgs, out: &mut dyn Write) -> Result<()> {
    let (summary, traj) = dirac_run(a)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.out, trainer::dirac_csv(&traj))
        .with_context(|| format!("writing {}", a.out.display()))?;
    writeln!(
        out,
        "final_norm={:.6e} min_norm={:.6} max_norm={:.6} steps={}",
        summary.final_norm, summary.min_norm, summary.max_norm, summary.steps
    )?;
    Ok(())
}

pub fn presets_listing() -> String {
    let mut out = String::new();
    for (name, citation) in schedule::preset_citations() {
        let s = schedule::load_preset(name).expect("bundled preset parses");
        writeln!(
            out,
            "{name}\tgamma {} -> {} ({:?}, burn-in {}), aug {} -> {}, {} images\t{citation}",
            s.gamma.initial,
            s.gamma.final_value,
            s.gamma.shape,
            s.gamma.burn_in_fraction,
            s.aug_prob.initial,
            s.aug_prob.final_value,
            s.total_images
        )
        .expect("string write");
    }
    out
}

// ---------------------------------------------------------------------------
// rebalance

pub fn rebalance_config(a: &RebalanceArgs) -> Result<RebalanceConfig> {
    let base = match &a.config {
        Some(path) => RebalanceConfig::from_file(path)?,
        None => RebalanceConfig::default(),
    };
    let mut cfg = base.with_seed(a.seed);
    if let Some(n) = a.synth_count {
        cfg.synth_count = n;
    }
    if let Some(b) = a.gan_budget {
        cfg.gan_budget_images = Some(b);
    }
    cfg.output_dir = Some(a.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn macro_line(label: &str, r: &r3lab::metrics::ClassReport) -> String {
    format!(
        "{label}: macro precision={:.4} recall={:.4} f1={:.4} accuracy={:.4}",
        r.macro_precision, r.macro_recall, r.macro_f1, r.accuracy
    )
}

pub fn cmd_rebalance(a: &RebalanceArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = rebalance_config(a)?;
    let report: RebalanceReport = rebalance::run_rebalance_experiment(&cfg)?;
    writeln!(out, "{}", macro_line("before", &report.before))?;
    writeln!(out, "{}", macro_line("after", &report.after))?;
    writeln!(
        out,
        "report written to {}",
        Path::new(&a.out).join("report.csv").display()
    )?;
    Ok(())
}
