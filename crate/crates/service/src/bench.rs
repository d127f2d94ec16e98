//! Headless benchmark episodes written as CSV.
//!
//! The step file has the header `sim_time,total_cost,<term names...>,planning_ms`
//! and one row per simulation step. The summary file (`<out>.summary.csv`)
//! has one header and one row; see [`BenchSummary`].
//!
//! In synchronous mode the planner runs a fixed number of iterations before
//! every step, so the step file is a pure function of task, planner and
//! seed. Wall-clock planning time is the one non-reproducible quantity, so
//! the step file leaves `planning_ms` empty in this mode and the summary
//! reports its median instead. Asynchronous mode runs the threaded runtime
//! in real time and is marked non-deterministic.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::mpsc::RecvTimeoutError;
use std::time::{Duration, Instant};

use serde::Serialize;

use recede_core::agent::{Runtime, RuntimeOptions};
use recede_core::episode::{mean_final_half, median, EpisodeOptions, SuccessTracker, SyncEpisode};
use recede_core::planner::PlannerKind;
use recede_core::task::TaskSpec;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] recede_core::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid benchmark: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sync,
    Async,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub task: TaskSpec,
    pub planner: PlannerKind,
    /// Simulated seconds.
    pub duration: f64,
    pub seed: u64,
    pub mode: Mode,
}

/// One summary row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchSummary {
    pub task: String,
    pub planner: PlannerKind,
    pub seed: u64,
    pub mode: Mode,
    pub deterministic: bool,
    pub duration: f64,
    pub steps: usize,
    /// Mean per-step cost over the final 50% of steps; empty with no steps.
    pub mean_final_cost: Option<f64>,
    pub success: bool,
    pub solved_at: Option<f64>,
    pub resets: usize,
    pub median_planning_ms: Option<f64>,
}

struct Row {
    time: f64,
    total: f64,
    terms: Vec<f64>,
    planning_ms: Option<f64>,
}

struct StepWriter {
    csv: csv::Writer<File>,
}

impl StepWriter {
    fn create(path: &Path, terms: &[String]) -> Result<Self, BenchError> {
        let mut csv = csv::Writer::from_path(path)?;
        let mut header = vec!["sim_time".to_string(), "total_cost".to_string()];
        header.extend(terms.iter().cloned());
        header.push("planning_ms".into());
        csv.write_record(&header)?;
        Ok(Self { csv })
    }

    fn write(&mut self, row: &Row) -> Result<(), BenchError> {
        let mut record = vec![row.time.to_string(), row.total.to_string()];
        record.extend(row.terms.iter().map(f64::to_string));
        record.push(row.planning_ms.map(|ms| ms.to_string()).unwrap_or_default());
        self.csv.write_record(&record)?;
        Ok(())
    }

    fn finish(mut self) -> Result<(), BenchError> {
        self.csv.flush()?;
        Ok(())
    }
}

/// Path of the summary file written next to `out`.
pub fn summary_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".summary.csv");
    out.with_file_name(name)
}

fn validate(options: &BenchOptions) -> Result<(), BenchError> {
    if !(options.duration >= 0.0 && options.duration.is_finite()) {
        return Err(BenchError::Invalid("duration must be finite and non-negative".into()));
    }
    Ok(())
}

/// Runs one episode, writing the step CSV to `out` and the summary next to
/// it.
pub fn run_benchmark(options: &BenchOptions, out: &Path) -> Result<BenchSummary, BenchError> {
    validate(options)?;
    let summary = match options.mode {
        Mode::Sync => run_sync(options, out)?,
        Mode::Async => run_async(options, out)?,
    };
    write_summary(&summary, &summary_path(out))?;
    Ok(summary)
}

fn write_summary(summary: &BenchSummary, path: &Path) -> Result<(), BenchError> {
    let mut csv = csv::Writer::from_path(path)?;
    csv.serialize(summary)?;
    csv.flush()?;
    Ok(())
}

fn finish_summary(
    options: &BenchOptions,
    costs: &[f64],
    tracker: &SuccessTracker,
    resets: usize,
    planning: &[f64],
) -> BenchSummary {
    BenchSummary {
        task: options.task.name.clone(),
        planner: options.planner,
        seed: options.seed,
        mode: options.mode,
        deterministic: options.mode == Mode::Sync,
        duration: options.duration,
        steps: costs.len(),
        mean_final_cost: Some(mean_final_half(costs)).filter(|c| c.is_finite()),
        success: tracker.success(),
        solved_at: tracker.achieved_at(),
        resets,
        median_planning_ms: Some(median(planning)).filter(|m| m.is_finite()),
    }
}

fn run_sync(options: &BenchOptions, out: &Path) -> Result<BenchSummary, BenchError> {
    let mut episode = SyncEpisode::new(&options.task, EpisodeOptions::new(options.planner, options.seed))?;
    let mut writer = StepWriter::create(out, &options.task.term_names())?;
    let mut costs = Vec::new();
    let mut planning = Vec::new();
    let mut failure = None;
    episode.run(options.duration, |rec| {
        costs.push(rec.total_cost);
        planning.push(rec.planning_ms);
        if failure.is_none() {
            let row = Row {
                time: rec.time,
                total: rec.total_cost,
                terms: rec.term_costs.clone(),
                planning_ms: None,
            };
            failure = writer.write(&row).err();
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    writer.finish()?;
    Ok(finish_summary(options, &costs, episode.tracker(), episode.resets(), &planning))
}

fn run_async(options: &BenchOptions, out: &Path) -> Result<BenchSummary, BenchError> {
    let model = options.task.build_model()?;
    let h = model.timestep();
    let steps = (options.duration / h).round() as u64;
    let mut writer = StepWriter::create(out, &options.task.term_names())?;
    let tracker = SuccessTracker::new(options.task.success.threshold, options.task.success.hold, h);
    if steps == 0 {
        writer.finish()?;
        return Ok(finish_summary(options, &[], &tracker, 0, &[]));
    }
    let runtime = Runtime::start(
        options.task.clone(),
        options.planner,
        RuntimeOptions {
            seed: Some(options.seed),
            paused: true,
            ..Default::default()
        },
    )?;
    let observed = runtime.subscribe_steps();
    runtime.resume()?;
    let mut tracker = tracker;
    let mut costs = Vec::new();
    let mut planning = Vec::new();
    let mut resets = 0;
    let mut episode = runtime.agent().episode;
    let deadline = Instant::now() + Duration::from_secs_f64(10.0 * options.duration + 10.0);
    while (costs.len() as u64) < steps {
        let snap = match observed.recv_timeout(Duration::from_millis(100)) {
            Ok(snap) => snap,
            Err(RecvTimeoutError::Timeout) if Instant::now() < deadline => continue,
            Err(_) => return Err(BenchError::Invalid("simulation stopped advancing".into())),
        };
        if snap.episode != episode {
            resets += 1;
            episode = snap.episode;
        }
        // The row describes the step that produced this snapshot.
        let plan = runtime.plan();
        let planning_ms = plan.policy.is_some().then_some(plan.planning_ms);
        tracker.observe(snap.clock.sim_time, snap.goal_error);
        costs.push(snap.total_cost);
        planning.extend(planning_ms);
        writer.write(&Row {
            time: snap.clock.sim_time - h,
            total: snap.total_cost,
            terms: snap.term_costs.clone(),
            planning_ms,
        })?;
    }
    runtime.stop();
    writer.finish()?;
    Ok(finish_summary(options, &costs, &tracker, resets, &planning))
}

/// Human-readable one-line summary.
pub fn describe(summary: &BenchSummary) -> String {
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    let mut line = format!(
        "{} / {} seed {} ({:?}): {} steps, mean final-half cost {}, success {}, median planning {} ms",
        summary.task,
        summary.planner,
        summary.seed,
        summary.mode,
        summary.steps,
        fmt(summary.mean_final_cost),
        summary.success,
        fmt(summary.median_planning_ms),
    );
    if let Some(t) = summary.solved_at {
        line.push_str(&format!(", solved at {t:.2} s"));
    }
    line
}
