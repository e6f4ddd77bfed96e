//! Search procedures over checkpoint space: α-grid sweeps for
//! interpolation and analogies, greedy soup construction, and
//! misalignment-matrix assembly.
//!
//! Scoring is abstracted behind two traits. [`Evaluator`] scores a single
//! checkpoint; [`GridEvaluator`] additionally receives an eval-set argument
//! so one scorer can serve every cell of a misalignment matrix.
//! [`EvaluatorSpec`] implements both by materializing the candidate to a
//! temporary container file and running an external command, which keeps
//! model scoring decoupled from the arithmetic: any executable that prints
//! a number can drive a sweep.
//!
//! Every sweep enumerates its rows in a fixed order and breaks ties by
//! first encounter, so identical inputs always produce identical results.

use std::collections::BTreeMap;
use std::io::Read;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::analysis::MisalignmentMatrix;
use crate::parallel;
use crate::tensorio::{write_checkpoint, Checkpoint};
use crate::vecalg::{analogy, apply, interpolate, lincomb, TimeVector, VecAlgError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    VecAlg(#[from] VecAlgError),
    #[error("evaluator failed{context}: {reason}")]
    EvaluatorFailed { context: String, reason: String },
    #[error("evaluator template does not contain the {{checkpoint}} placeholder")]
    MissingPlaceholder,
    #[error("evaluator template contains {{evalset}} but no eval set was provided")]
    UnboundEvalSet,
    #[error("empty alpha list")]
    EmptyGrid,
    #[error("alpha {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("{ablation} ablation requires {requirement}")]
    AblationViolation {
        ablation: &'static str,
        requirement: &'static str,
    },
    #[error("empty candidate list")]
    NoCandidates,
    #[error("empty model or eval-set map")]
    EmptyMatrixInputs,
}

pub type Result<T> = std::result::Result<T, SweepError>;

fn eval_failure(reason: impl Into<String>) -> SweepError {
    SweepError::EvaluatorFailed {
        context: String::new(),
        reason: reason.into(),
    }
}

/// Attach "where were we" information to a bare evaluator failure.
fn at(context: impl Into<String>) -> impl FnOnce(SweepError) -> SweepError {
    move |e| match e {
        SweepError::EvaluatorFailed { context: c, reason } if c.is_empty() => {
            SweepError::EvaluatorFailed {
                context: format!(" at {}", context.into()),
                reason,
            }
        }
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Evaluator protocol
// ---------------------------------------------------------------------------

/// Scores one checkpoint. Implementations must be thread-safe; sweeps may
/// score rows concurrently.
pub trait Evaluator: Sync {
    fn higher_is_better(&self) -> bool;
    fn evaluate(&self, model: &Checkpoint) -> Result<f64>;
}

/// Scores a checkpoint against a named evaluation set.
pub trait GridEvaluator: Sync {
    fn higher_is_better(&self) -> bool;
    fn evaluate_on(&self, model: &Checkpoint, eval_arg: &str) -> Result<f64>;
}

/// A [`GridEvaluator`] pinned to one eval set so it can act as a plain
/// [`Evaluator`].
pub struct WithEvalSet<'a, G: GridEvaluator + ?Sized> {
    pub grid: &'a G,
    pub eval_arg: &'a str,
}

impl<G: GridEvaluator + ?Sized> Evaluator for WithEvalSet<'_, G> {
    fn higher_is_better(&self) -> bool {
        self.grid.higher_is_better()
    }

    fn evaluate(&self, model: &Checkpoint) -> Result<f64> {
        self.grid.evaluate_on(model, self.eval_arg)
    }
}

/// Scratch directory for temporary candidate checkpoints. Honors
/// `CHRONOVEC_TMPDIR`; the directory and its contents are removed on drop,
/// so sweeps never leave orphan files behind, even on error paths.
pub fn scratch_dir() -> std::io::Result<tempfile::TempDir> {
    let builder = || {
        let mut b = tempfile::Builder::new();
        b.prefix("chronovec-");
        b
    };
    match std::env::var_os("CHRONOVEC_TMPDIR") {
        Some(dir) => builder().tempdir_in(dir),
        None => builder().tempdir(),
    }
}

/// External scoring command. The argument template must mention
/// `{checkpoint}`, which is replaced with an absolute path to a freshly
/// written container file; `{evalset}` is replaced when scoring matrix
/// cells. The command must print a finite decimal on its last stdout line
/// and exit 0; stderr passes through for logging.
#[derive(Debug, Clone)]
pub struct EvaluatorSpec {
    pub command: Vec<String>,
    pub higher_is_better: bool,
    pub timeout: Duration,
}

impl EvaluatorSpec {
    pub fn new(command: Vec<String>, higher_is_better: bool, timeout: Duration) -> EvaluatorSpec {
        EvaluatorSpec {
            command,
            higher_is_better,
            timeout,
        }
    }

    fn mentions(&self, placeholder: &str) -> bool {
        self.command.iter().any(|arg| arg.contains(placeholder))
    }

    fn run(&self, model: &Checkpoint, eval_arg: Option<&str>) -> Result<f64> {
        if !self.mentions("{checkpoint}") {
            return Err(SweepError::MissingPlaceholder);
        }
        if eval_arg.is_none() && self.mentions("{evalset}") {
            return Err(SweepError::UnboundEvalSet);
        }
        let dir = scratch_dir()?;
        let ckpt_path = dir.path().join("candidate.ckpt");
        write_checkpoint(model, &ckpt_path, None).map_err(VecAlgError::from)?;
        let ckpt_str = ckpt_path.to_string_lossy();
        let argv: Vec<String> = self
            .command
            .iter()
            .map(|arg| {
                let mut s = arg.replace("{checkpoint}", &ckpt_str);
                if let Some(ev) = eval_arg {
                    s = s.replace("{evalset}", ev);
                }
                s
            })
            .collect();
        run_scoring_command(&argv, self.timeout)
    }
}

impl Evaluator for EvaluatorSpec {
    fn higher_is_better(&self) -> bool {
        self.higher_is_better
    }

    fn evaluate(&self, model: &Checkpoint) -> Result<f64> {
        self.run(model, None)
    }
}

impl GridEvaluator for EvaluatorSpec {
    fn higher_is_better(&self) -> bool {
        self.higher_is_better
    }

    fn evaluate_on(&self, model: &Checkpoint, eval_arg: &str) -> Result<f64> {
        self.run(model, Some(eval_arg))
    }
}

/// Spawn, enforce the timeout, and parse the last non-empty stdout line.
fn run_scoring_command(argv: &[String], timeout: Duration) -> Result<f64> {
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| eval_failure(format!("failed to spawn {:?}: {e}", argv[0])))?;
    // Drain stdout on a separate thread so a chatty child never blocks on a
    // full pipe while we poll for exit.
    let mut stdout = child.stdout.take().expect("stdout was piped");
    let reader = std::thread::spawn(move || {
        let mut buf = String::new();
        stdout.read_to_string(&mut buf).map(|_| buf)
    });
    let deadline = Instant::now() + timeout;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    // Deliberately not joining the reader: grandchildren may
                    // still hold the pipe open, and the thread exits on its
                    // own once the last writer closes.
                    drop(reader);
                    return Err(eval_failure(format!(
                        "timed out after {:.1}s",
                        timeout.as_secs_f64()
                    )));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(eval_failure(format!("wait failed: {e}"))),
        }
    };
    let output = reader
        .join()
        .expect("stdout reader never panics")
        .map_err(|e| eval_failure(format!("reading stdout: {e}")))?;
    if !status.success() {
        return Err(eval_failure(format!("command exited with {status}")));
    }
    let last = output
        .lines()
        .map(str::trim)
        .rfind(|l| !l.is_empty())
        .ok_or_else(|| eval_failure("no output on stdout"))?;
    match last.parse::<f64>() {
        Ok(score) if score.is_finite() => Ok(score),
        _ => Err(eval_failure(format!(
            "last stdout line {last:?} is not a finite decimal"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Grids and results
// ---------------------------------------------------------------------------

/// Coefficient grid for analogy sweeps, enumerated in lexicographic order
/// with a1 outermost. Singleton lists collapse a dimension.
#[derive(Debug, Clone)]
pub struct AlphaGrid {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub a3: Vec<f64>,
}

impl AlphaGrid {
    pub fn new(a1: Vec<f64>, a2: Vec<f64>, a3: Vec<f64>) -> Result<AlphaGrid> {
        if a1.is_empty() || a2.is_empty() || a3.is_empty() {
            return Err(SweepError::EmptyGrid);
        }
        Ok(AlphaGrid { a1, a2, a3 })
    }

    /// The default analogy search space: a1 ∈ {0.6, 0.8, …, 2.2},
    /// a2, a3 ∈ {0.1, …, 0.6} — 9 × 6 × 6 = 324 combinations.
    pub fn analogy_default() -> AlphaGrid {
        AlphaGrid {
            a1: (3..=11).map(|i| f64::from(i) * 2.0 / 10.0).collect(),
            a2: (1..=6).map(|i| f64::from(i) / 10.0).collect(),
            a3: (1..=6).map(|i| f64::from(i) / 10.0).collect(),
        }
    }

    /// Clamp the grid to an ablation's constraints.
    pub fn restricted(&self, ablation: Ablation) -> AlphaGrid {
        match ablation {
            Ablation::Full => self.clone(),
            Ablation::TaskAddition => AlphaGrid {
                a1: self.a1.clone(),
                a2: self.a2.clone(),
                a3: vec![0.0],
            },
            Ablation::ScalingOnly => AlphaGrid {
                a1: self.a1.clone(),
                a2: vec![0.0],
                a3: vec![0.0],
            },
        }
    }

    pub fn len(&self) -> usize {
        self.a1.len() * self.a2.len() * self.a3.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn enumerate(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for &a1 in &self.a1 {
            for &a2 in &self.a2 {
                for &a3 in &self.a3 {
                    out.push((a1, a2, a3));
                }
            }
        }
        out
    }
}

/// Analogy ablations: the full three-term arithmetic, the `task_addition`
/// variant without the source-LM subtraction (a3 = 0), and `scaling_only`
/// with no LM terms at all (a2 = a3 = 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    TaskAddition,
    ScalingOnly,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::TaskAddition => "task_addition",
            Ablation::ScalingOnly => "scaling_only",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        match s {
            "full" => Some(Ablation::Full),
            "task_addition" => Some(Ablation::TaskAddition),
            "scaling_only" => Some(Ablation::ScalingOnly),
            _ => None,
        }
    }
}

/// One scored grid point. Coefficients not used by the sweep kind stay
/// `None` (interpolation fills only a1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub coeffs: [Option<f64>; 3],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Index of the optimum under the evaluator's orientation; ties go to
    /// the first-encountered row.
    pub best: usize,
    pub higher_is_better: bool,
}

fn improves(new: f64, old: f64, higher_is_better: bool) -> bool {
    if higher_is_better {
        new > old
    } else {
        new < old
    }
}

impl SweepResult {
    fn from_rows(rows: Vec<SweepRow>, higher_is_better: bool) -> SweepResult {
        let mut best = 0;
        for (i, row) in rows.iter().enumerate().skip(1) {
            if improves(row.score, rows[best].score, higher_is_better) {
                best = i;
            }
        }
        SweepResult {
            rows,
            best,
            higher_is_better,
        }
    }

    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }

    /// CSV with columns a1,a2,a3,score; unused coefficients stay blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("a1,a2,a3,score\n");
        for row in &self.rows {
            for c in row.coeffs {
                match c {
                    Some(v) => out.push_str(&format!("{v},")),
                    None => out.push(','),
                }
            }
            out.push_str(&format!("{}\n", row.score));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Score apply(base, α·τ_j + (1−α)·τ_k) for every α.
pub fn sweep_interpolation(
    vj: &TimeVector,
    vk: &TimeVector,
    base: &Checkpoint,
    alphas: &[f64],
    evaluator: &dyn Evaluator,
    workers: usize,
) -> Result<SweepResult> {
    if alphas.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(SweepError::AlphaOutOfRange(a));
        }
    }
    let scores = parallel::try_map(workers, alphas, |_, &alpha| {
        let v = interpolate(vj, vk, alpha)?;
        let model = apply(base, &v, 1.0)?;
        evaluator
            .evaluate(&model)
            .map_err(at(format!("alpha={alpha}")))
    })?;
    let rows = alphas
        .iter()
        .zip(scores)
        .map(|(&a, score)| SweepRow {
            coeffs: [Some(a), None, None],
            score,
        })
        .collect();
    Ok(SweepResult::from_rows(rows, evaluator.higher_is_better()))
}

/// Score analogy(task_j, lm_j, lm_k, a1, a2, a3) over the whole grid.
#[allow(clippy::too_many_arguments)] // three vectors + base + search config are all distinct inputs
pub fn sweep_analogy(
    task_j: &TimeVector,
    lm_j: &TimeVector,
    lm_k: &TimeVector,
    base: &Checkpoint,
    grid: &AlphaGrid,
    evaluator: &dyn Evaluator,
    ablation: Ablation,
    workers: usize,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(SweepError::EmptyGrid);
    }
    match ablation {
        Ablation::Full => {}
        Ablation::TaskAddition => {
            if grid.a3 != [0.0] {
                return Err(SweepError::AblationViolation {
                    ablation: "task_addition",
                    requirement: "a3 = [0]",
                });
            }
        }
        Ablation::ScalingOnly => {
            if grid.a2 != [0.0] || grid.a3 != [0.0] {
                return Err(SweepError::AblationViolation {
                    ablation: "scaling_only",
                    requirement: "a2 = a3 = [0]",
                });
            }
        }
    }
    let points = grid.enumerate();
    let scores = parallel::try_map(workers, &points, |_, &(a1, a2, a3)| {
        let v = analogy(task_j, lm_j, lm_k, a1, a2, a3)?;
        let model = apply(base, &v, 1.0)?;
        evaluator
            .evaluate(&model)
            .map_err(at(format!("a1={a1} a2={a2} a3={a3}")))
    })?;
    let rows = points
        .iter()
        .zip(scores)
        .map(|(&(a1, a2, a3), score)| SweepRow {
            coeffs: [Some(a1), Some(a2), Some(a3)],
            score,
        })
        .collect();
    Ok(SweepResult::from_rows(rows, evaluator.higher_is_better()))
}

// ---------------------------------------------------------------------------
// Greedy soup
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SoupResult {
    pub soup: Checkpoint,
    /// Accepted candidate indices in acceptance order; repeats are allowed
    /// (sampling with replacement across passes).
    pub ingredients: Vec<usize>,
    pub soup_score: f64,
    /// Individual candidate scores, in input order.
    pub candidate_scores: Vec<f64>,
}

fn average_of(ingredients: &[usize], candidates: &[TimeVector]) -> Result<TimeVector> {
    let w = 1.0 / ingredients.len() as f64;
    let terms: Vec<(f64, &TimeVector)> = ingredients.iter().map(|&i| (w, &candidates[i])).collect();
    Ok(lincomb(&terms)?)
}

/// Greedy soup: candidates are scored individually, visited in order of
/// decreasing performance, and added (with replacement, for up to
/// `max_passes` passes) whenever the addition strictly improves the score
/// of the averaged soup. Starts from the best single candidate, so the
/// final score never falls below the best individual score.
pub fn greedy_soup(
    candidates: &[TimeVector],
    base: &Checkpoint,
    evaluator: &dyn Evaluator,
    max_passes: usize,
    workers: usize,
) -> Result<SoupResult> {
    if candidates.is_empty() {
        return Err(SweepError::NoCandidates);
    }
    let higher = evaluator.higher_is_better();
    let indices: Vec<usize> = (0..candidates.len()).collect();
    let candidate_scores = parallel::try_map(workers, &indices, |_, &i| {
        let model = apply(base, &candidates[i], 1.0)?;
        evaluator
            .evaluate(&model)
            .map_err(at(format!("candidate {i} ({})", candidates[i].period)))
    })?;

    // Visit order: best score first; ties by period ordinal, provenance,
    // then input position, so the order is fully deterministic.
    let mut order = indices;
    order.sort_by(|&i, &j| {
        let by_score = if higher {
            candidate_scores[j].partial_cmp(&candidate_scores[i])
        } else {
            candidate_scores[i].partial_cmp(&candidate_scores[j])
        }
        .expect("scores are finite");
        by_score
            .then_with(|| {
                candidates[i]
                    .period
                    .ordinal()
                    .cmp(&candidates[j].period.ordinal())
            })
            .then_with(|| candidates[i].provenance.cmp(&candidates[j].provenance))
            .then_with(|| i.cmp(&j))
    });

    let mut ingredients = vec![order[0]];
    // A one-ingredient soup is exactly the best single model; reuse its score.
    let mut current = candidate_scores[order[0]];
    for _pass in 0..max_passes {
        let mut improved = false;
        for &cand in &order {
            ingredients.push(cand);
            let soup_model = apply(base, &average_of(&ingredients, candidates)?, 1.0)?;
            let score = evaluator
                .evaluate(&soup_model)
                .map_err(at(format!("soup trial with candidate {cand}")))?;
            if improves(score, current, higher) {
                current = score;
                improved = true;
            } else {
                ingredients.pop();
            }
        }
        if !improved {
            break;
        }
    }
    let soup = apply(base, &average_of(&ingredients, candidates)?, 1.0)?;
    Ok(SoupResult {
        soup,
        ingredients,
        soup_score: current,
        candidate_scores,
    })
}

// ---------------------------------------------------------------------------
// Misalignment-matrix assembly
// ---------------------------------------------------------------------------

use crate::vecalg::TimePeriod;

/// Score every (train-period model, eval-period set) pair and assemble the
/// grid in period order.
pub fn build_misalignment_matrix(
    models: &BTreeMap<TimePeriod, Checkpoint>,
    eval_sets: &BTreeMap<TimePeriod, String>,
    evaluator: &dyn GridEvaluator,
    metric_name: &str,
    workers: usize,
) -> Result<MisalignmentMatrix> {
    if models.is_empty() || eval_sets.is_empty() {
        return Err(SweepError::EmptyMatrixInputs);
    }
    let train_periods: Vec<TimePeriod> = models.keys().copied().collect();
    let eval_periods: Vec<TimePeriod> = eval_sets.keys().copied().collect();
    let cells: Vec<(TimePeriod, TimePeriod)> = train_periods
        .iter()
        .flat_map(|t| eval_periods.iter().map(move |e| (*t, *e)))
        .collect();
    let scores = parallel::try_map(workers, &cells, |_, &(t, e)| {
        evaluator
            .evaluate_on(&models[&t], &eval_sets[&e])
            .map_err(at(format!("train={t} eval={e}")))
    })?;
    let ne = eval_periods.len();
    let values: Vec<Vec<f64>> = scores.chunks(ne).map(<[f64]>::to_vec).collect();
    Ok(MisalignmentMatrix::new(
        train_periods,
        eval_periods,
        values,
        evaluator.higher_is_better(),
        metric_name,
    )
    .expect("dimensions match by construction"))
}
