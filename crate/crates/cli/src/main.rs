//! chronovec: every library operation as a subcommand, for scripted
//! pipelines.
//!
//! Conventions shared by all subcommands:
//! - machine-readable output (containers, CSV, JSON) goes to `--out` files
//!   or stdout, never mixed with diagnostics; diagnostics go to stderr;
//! - exit code 0 on success, 1 on user or delegate errors, 2 on internal
//!   errors (panics);
//! - commands that produce a checkpoint or time-vector container require
//!   `--out` (binary data is never written to stdout);
//! - subcommands hold no numerical logic of their own — each delegates to
//!   exactly one library operation and formats its result.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use chronovec_core::analysis::{self, MisalignmentMatrix};
use chronovec_core::sweep::{self, Ablation, AlphaGrid, EvaluatorSpec};
use chronovec_core::toylab::{self, InitMode, ToyModel, TrainSpec};
use chronovec_core::vecalg::{self, GroupSelector, ParamGroupRules};
use chronovec_core::{tensorio, Checkpoint, TimePeriod, TimeVector};

#[derive(Parser)]
#[command(
    name = "chronovec",
    version,
    about = "Checkpoint weight arithmetic: time vectors, soups, sweeps, and a toy lab",
    after_help = "Environment: CHRONOVEC_TMPDIR overrides where sweeps place \
                  temporary candidate checkpoints."
)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand (most use only a subset).
#[derive(Args)]
struct Global {
    /// Worker threads for parallel sweeps and experiments
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Seed for seeded subcommands (toy-gen, toy-train, toy-experiment)
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Diff over the common tensor inventory instead of requiring an exact
    /// inventory match
    #[arg(long, global = true)]
    intersect: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build a time vector: finetuned minus pretrained
    Diff {
        /// Finetuned checkpoint
        #[arg(long)]
        finetuned: PathBuf,
        /// Pretrained checkpoint the finetune started from
        #[arg(long)]
        pretrained: PathBuf,
        /// Period label, e.g. year:2015, month:2015-03, index:7
        #[arg(long)]
        period: TimePeriod,
        /// Free-form provenance string stored in the vector file
        #[arg(long)]
        provenance: Option<String>,
        /// Output time-vector container
        #[arg(long)]
        out: PathBuf,
    },

    /// Apply a scaled time vector to a base checkpoint
    Apply {
        /// Base checkpoint (must match the vector's recorded base)
        #[arg(long)]
        base: PathBuf,
        /// Time-vector container
        #[arg(long)]
        vector: PathBuf,
        /// Scale factor for the vector
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        scale: f64,
        /// Output checkpoint
        #[arg(long)]
        out: PathBuf,
    },

    /// Linear combination of time vectors sharing a base
    Lincomb {
        /// Coefficients, comma separated, one per vector
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_hyphen_values = true
        )]
        coeffs: Vec<f64>,
        /// Time-vector containers, one per coefficient
        #[arg(long, num_args = 1.., required = true)]
        vectors: Vec<PathBuf>,
        /// Output time-vector container
        #[arg(long)]
        out: PathBuf,
    },

    /// Interpolate two time vectors: alpha*vj + (1-alpha)*vk
    Interp {
        /// First time vector (weight alpha)
        #[arg(long)]
        vj: PathBuf,
        /// Second time vector (weight 1-alpha)
        #[arg(long)]
        vk: PathBuf,
        /// Interpolation coefficient in [0, 1]
        #[arg(long)]
        alpha: f64,
        /// Output time-vector container
        #[arg(long)]
        out: PathBuf,
    },

    /// Task analogy: a1*task_j + a2*lm_k - a3*lm_j
    Analogy {
        /// Task vector for the source period
        #[arg(long)]
        task_j: PathBuf,
        /// LM vector for the source period
        #[arg(long)]
        lm_j: PathBuf,
        /// LM vector for the target period
        #[arg(long)]
        lm_k: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        a1: f64,
        #[arg(long, allow_negative_numbers = true)]
        a2: f64,
        #[arg(long, allow_negative_numbers = true)]
        a3: f64,
        /// Output time-vector container
        #[arg(long)]
        out: PathBuf,
    },

    /// Average all vectors and apply them to the base checkpoint
    SoupUniform {
        /// Time-vector containers to average
        #[arg(long, num_args = 1.., required = true)]
        vectors: Vec<PathBuf>,
        /// Base checkpoint the vectors were built against
        #[arg(long)]
        base: PathBuf,
        /// Output checkpoint
        #[arg(long)]
        out: PathBuf,
    },

    /// Greedy soup: admit vectors only when they improve the evaluator score
    SoupGreedy {
        /// Candidate time-vector containers
        #[arg(long, num_args = 1.., required = true)]
        vectors: Vec<PathBuf>,
        /// Base checkpoint the vectors were built against
        #[arg(long)]
        base: PathBuf,
        /// Passes over the ranked candidates (with replacement)
        #[arg(long, default_value_t = 1)]
        max_passes: usize,
        #[command(flatten)]
        eval: EvalFlags,
        /// Output checkpoint for the final soup
        #[arg(long)]
        out: PathBuf,
        /// Evaluator command; {checkpoint} is replaced per candidate
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },

    /// Fold a LoRA adapter into the base weights
    MergeLora {
        /// Base checkpoint
        #[arg(long)]
        base: PathBuf,
        /// LoRA adapter file
        #[arg(long)]
        adapter: PathBuf,
        /// Output checkpoint
        #[arg(long)]
        out: PathBuf,
    },

    /// Pairwise cosine similarity of time vectors, as a matrix CSV
    CossimMatrix {
        /// Time-vector containers; rows/columns follow this order
        #[arg(long, num_args = 1.., required = true)]
        vectors: Vec<PathBuf>,
        /// Restrict to one parameter group (embeddings, attention,
        /// feed_forward, other, non_embedding, all)
        #[arg(long, value_parser = GroupSelector::parse)]
        group: Option<GroupSelector>,
        /// Grouping rules: builtin:t5, builtin:toy, or a rules file
        #[arg(long, default_value = "builtin:t5")]
        rules: String,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Per-group L2 norms of a time vector, as CSV
    GroupNorms {
        /// Time-vector container
        #[arg(long)]
        vector: PathBuf,
        /// Grouping rules: builtin:t5, builtin:toy, or a rules file
        #[arg(long, default_value = "builtin:t5")]
        rules: String,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Transplant parameter groups from a donor checkpoint
    Swap {
        /// Checkpoint providing the unswapped tensors
        #[arg(long)]
        base_model: PathBuf,
        /// Checkpoint providing the swapped-in tensors
        #[arg(long)]
        donor_model: PathBuf,
        /// Groups to take from the donor, comma separated
        #[arg(long, value_delimiter = ',', value_parser = GroupSelector::parse, required = true)]
        groups: Vec<GroupSelector>,
        /// Grouping rules: builtin:t5, builtin:toy, or a rules file
        #[arg(long, default_value = "builtin:t5")]
        rules: String,
        /// Output checkpoint; the names taken from the donor are printed to
        /// stdout, one per line
        #[arg(long)]
        out: PathBuf,
    },

    /// Score every (model, eval set) pair into a misalignment matrix CSV
    Matrix {
        /// Model checkpoint as PERIOD=PATH; repeat per period
        #[arg(long = "model", value_parser = parse_period_pair, required = true)]
        models: Vec<(TimePeriod, String)>,
        /// Eval-set argument as PERIOD=VALUE; VALUE replaces {evalset}
        #[arg(long = "eval-set", value_parser = parse_period_pair, required = true)]
        eval_sets: Vec<(TimePeriod, String)>,
        /// Metric name recorded with the matrix
        #[arg(long, default_value = "score")]
        metric: String,
        #[command(flatten)]
        eval: EvalFlags,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluator command; {checkpoint} and {evalset} are replaced per cell
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },

    /// Percent-from-mean normalization of a matrix CSV
    AnalyzeNormalize {
        #[command(flatten)]
        matrix: MatrixFlags,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Temporal-degradation slope of a matrix CSV, as JSON
    AnalyzeTd {
        #[command(flatten)]
        matrix: MatrixFlags,
        /// Fit one pooled line instead of averaging per-row/column slopes
        #[arg(long)]
        pooled: bool,
    },

    /// Correlate a similarity grid with a degradation matrix, as JSON
    AnalyzeCorr {
        /// Similarity grid CSV (e.g. from cossim-matrix); its period labels
        /// must match the degradation matrix
        #[arg(long)]
        similarity: PathBuf,
        #[command(flatten)]
        matrix: MatrixFlags,
    },

    /// Seasonal cell-group means of a monthly matrix CSV
    AnalyzeSeason {
        #[command(flatten)]
        matrix: MatrixFlags,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Row-min/max normalization of an online similarity series CSV
    AnalyzeOnline {
        #[command(flatten)]
        matrix: MatrixFlags,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Project time vectors to 2-D (top principal components), as CSV
    Project {
        /// Time-vector containers (at least three)
        #[arg(long, num_args = 1.., required = true)]
        vectors: Vec<PathBuf>,
        /// Restrict to one parameter group
        #[arg(long, value_parser = GroupSelector::parse)]
        group: Option<GroupSelector>,
        /// Grouping rules: builtin:t5, builtin:toy, or a rules file
        #[arg(long, default_value = "builtin:t5")]
        rules: String,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Score interpolations alpha*vj + (1-alpha)*vk over an alpha grid
    SweepInterp {
        /// First time vector
        #[arg(long)]
        vj: PathBuf,
        /// Second time vector
        #[arg(long)]
        vk: PathBuf,
        /// Base checkpoint the vectors were built against
        #[arg(long)]
        base: PathBuf,
        /// Alphas to score, comma separated, each in [0, 1]
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[command(flatten)]
        eval: EvalFlags,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluator command; {checkpoint} is replaced per grid point
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },

    /// Score task analogies over an (a1, a2, a3) grid
    SweepAnalogy {
        /// Task vector for the source period
        #[arg(long)]
        task_j: PathBuf,
        /// LM vector for the source period
        #[arg(long)]
        lm_j: PathBuf,
        /// LM vector for the target period
        #[arg(long)]
        lm_k: PathBuf,
        /// Base checkpoint the vectors were built against
        #[arg(long)]
        base: PathBuf,
        /// a1 grid values, comma separated (omit all three for the built-in
        /// grid)
        #[arg(long, value_delimiter = ',')]
        a1: Option<Vec<f64>>,
        /// a2 grid values, comma separated
        #[arg(long, value_delimiter = ',')]
        a2: Option<Vec<f64>>,
        /// a3 grid values, comma separated
        #[arg(long, value_delimiter = ',')]
        a3: Option<Vec<f64>>,
        /// full, task_addition (a3 = 0), or scaling_only (a2 = a3 = 0);
        /// restricts the built-in grid, or validates a custom one
        #[arg(long, default_value = "full", value_parser = parse_ablation)]
        ablation: Ablation,
        #[command(flatten)]
        eval: EvalFlags,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluator command; {checkpoint} is replaced per grid point
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },

    /// Generate a synthetic drifting/seasonal corpus, one file per period
    ToyGen {
        /// Periods, comma separated, e.g. year:2012,year:2013
        #[arg(long, value_delimiter = ',', required = true)]
        periods: Vec<TimePeriod>,
        /// Token alphabet size
        #[arg(long, default_value_t = toylab::DEFAULT_VOCAB)]
        vocab_size: usize,
        /// Tokens generated per period
        #[arg(long, default_value_t = toylab::DEFAULT_TOKENS_PER_PERIOD)]
        tokens_per_period: usize,
        /// Logit drift per period step
        #[arg(long, default_value_t = 0.0)]
        drift_rate: f64,
        /// Amplitude of the seasonal logit oscillation
        #[arg(long, default_value_t = 0.0)]
        season_strength: f64,
        /// Season length in period steps
        #[arg(long, default_value_t = toylab::DEFAULT_SEASON_PERIOD)]
        season_period: u32,
        /// Output directory; files are named <period>.toyc
        #[arg(long)]
        out: PathBuf,
    },

    /// Train the toy language model on a corpus file
    ToyTrain {
        /// Corpus file from toy-gen
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint to start from (fresh seeded init when omitted)
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// SGD learning rate
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        /// Passes over the corpus
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        /// Minibatch size in token pairs
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        /// Period label stored in the checkpoint metadata
        #[arg(long)]
        period: Option<TimePeriod>,
        /// Output checkpoint
        #[arg(long)]
        out: PathBuf,
    },

    /// Evaluate a toy-model checkpoint on a corpus file, as JSON
    ToyEval {
        /// Toy-model checkpoint
        #[arg(long)]
        model: PathBuf,
        /// Corpus file from toy-gen
        #[arg(long)]
        corpus: PathBuf,
    },

    /// Run a named end-to-end toy experiment
    ToyExperiment {
        /// One of: manifold, intervening_years, intervening_months, analogy,
        /// soups, online, swap, seasonality
        #[arg(long)]
        name: String,
        /// Output directory for the experiment's reports
        #[arg(long)]
        out: PathBuf,
    },

    /// Panic on purpose (exercises the exit-2 path in tests)
    #[command(hide = true)]
    DebugPanic,
}

/// Flags describing the external evaluator used by sweep-style commands.
#[derive(Args)]
struct EvalFlags {
    /// Treat larger evaluator scores as better (default: smaller is better)
    #[arg(long)]
    maximize: bool,

    /// Kill an evaluator invocation after this many seconds
    #[arg(long, default_value_t = 300.0)]
    timeout_secs: f64,
}

impl EvalFlags {
    fn spec(&self, command: Vec<String>) -> Result<EvaluatorSpec> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            bail!("--timeout-secs must be a positive number");
        }
        Ok(EvaluatorSpec::new(
            command,
            self.maximize,
            Duration::from_secs_f64(self.timeout_secs),
        ))
    }
}

/// Flags describing a matrix CSV input. The CSV stores labels and values
/// only, so the metric name and orientation ride on flags.
#[derive(Args)]
struct MatrixFlags {
    /// Matrix CSV (train\eval header, as written by `matrix`)
    #[arg(long)]
    matrix: PathBuf,

    /// Metric name to attribute to the matrix values
    #[arg(long, default_value = "score")]
    metric: String,

    /// Treat larger matrix values as better (default: smaller is better)
    #[arg(long)]
    maximize: bool,
}

impl MatrixFlags {
    fn read(&self) -> Result<MisalignmentMatrix> {
        let text = fs::read_to_string(&self.matrix)
            .with_context(|| format!("reading {}", self.matrix.display()))?;
        Ok(analysis::read_matrix_csv(
            &text,
            self.maximize,
            &self.metric,
        )?)
    }
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too; clap routes those to
            // stdout and flags them as non-errors.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => 0,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            1
        }
        // The default panic hook has already written the message to stderr.
        Err(_) => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Diff {
            finetuned,
            pretrained,
            period,
            provenance,
            out,
        } => cmd_diff(&g, &finetuned, &pretrained, period, provenance, &out),
        Command::Apply {
            base,
            vector,
            scale,
            out,
        } => cmd_apply(&base, &vector, scale, &out),
        Command::Lincomb {
            coeffs,
            vectors,
            out,
        } => cmd_lincomb(&coeffs, &vectors, &out),
        Command::Interp { vj, vk, alpha, out } => cmd_interp(&vj, &vk, alpha, &out),
        Command::Analogy {
            task_j,
            lm_j,
            lm_k,
            a1,
            a2,
            a3,
            out,
        } => cmd_analogy(&task_j, &lm_j, &lm_k, a1, a2, a3, &out),
        Command::SoupUniform { vectors, base, out } => cmd_soup_uniform(&vectors, &base, &out),
        Command::SoupGreedy {
            vectors,
            base,
            max_passes,
            eval,
            out,
            command,
        } => cmd_soup_greedy(&g, &vectors, &base, max_passes, &eval, &out, command),
        Command::MergeLora { base, adapter, out } => cmd_merge_lora(&base, &adapter, &out),
        Command::CossimMatrix {
            vectors,
            group,
            rules,
            out,
        } => cmd_cossim_matrix(&vectors, group, &rules, out.as_deref()),
        Command::GroupNorms { vector, rules, out } => {
            cmd_group_norms(&vector, &rules, out.as_deref())
        }
        Command::Swap {
            base_model,
            donor_model,
            groups,
            rules,
            out,
        } => cmd_swap(&base_model, &donor_model, &groups, &rules, &out),
        Command::Matrix {
            models,
            eval_sets,
            metric,
            eval,
            out,
            command,
        } => cmd_matrix(
            &g,
            models,
            eval_sets,
            &metric,
            &eval,
            out.as_deref(),
            command,
        ),
        Command::AnalyzeNormalize { matrix, out } => cmd_analyze_normalize(&matrix, out.as_deref()),
        Command::AnalyzeTd { matrix, pooled } => cmd_analyze_td(&matrix, pooled),
        Command::AnalyzeCorr { similarity, matrix } => cmd_analyze_corr(&similarity, &matrix),
        Command::AnalyzeSeason { matrix, out } => cmd_analyze_season(&matrix, out.as_deref()),
        Command::AnalyzeOnline { matrix, out } => cmd_analyze_online(&matrix, out.as_deref()),
        Command::Project {
            vectors,
            group,
            rules,
            out,
        } => cmd_project(&vectors, group, &rules, out.as_deref()),
        Command::SweepInterp {
            vj,
            vk,
            base,
            alphas,
            eval,
            out,
            command,
        } => cmd_sweep_interp(&g, &vj, &vk, &base, &alphas, &eval, out.as_deref(), command),
        Command::SweepAnalogy {
            task_j,
            lm_j,
            lm_k,
            base,
            a1,
            a2,
            a3,
            ablation,
            eval,
            out,
            command,
        } => cmd_sweep_analogy(
            &g,
            &task_j,
            &lm_j,
            &lm_k,
            &base,
            a1,
            a2,
            a3,
            ablation,
            &eval,
            out.as_deref(),
            command,
        ),
        Command::ToyGen {
            periods,
            vocab_size,
            tokens_per_period,
            drift_rate,
            season_strength,
            season_period,
            out,
        } => cmd_toy_gen(
            &g,
            periods,
            vocab_size,
            tokens_per_period,
            drift_rate,
            season_strength,
            season_period,
            &out,
        ),
        Command::ToyTrain {
            corpus,
            init_from,
            learning_rate,
            epochs,
            batch_size,
            period,
            out,
        } => cmd_toy_train(
            &g,
            &corpus,
            init_from.as_deref(),
            learning_rate,
            epochs,
            batch_size,
            period,
            &out,
        ),
        Command::ToyEval { model, corpus } => cmd_toy_eval(&model, &corpus),
        Command::ToyExperiment { name, out } => {
            toylab::run_experiment(&name, &out, g.seed, g.workers)?;
            eprintln!("experiment {name}: reports written to {}", out.display());
            Ok(())
        }
        Command::DebugPanic => panic!("debug-panic requested"),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    tensorio::load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_vector(path: &Path) -> Result<TimeVector> {
    vecalg::load_time_vector(path)
        .with_context(|| format!("loading time vector {}", path.display()))
}

fn load_vectors(paths: &[PathBuf]) -> Result<Vec<TimeVector>> {
    paths.iter().map(|p| load_vector(p)).collect()
}

fn save_vector(v: &TimeVector, out: &Path) -> Result<()> {
    vecalg::save_time_vector(v, out, None)
        .map(|_| ())
        .with_context(|| format!("writing time vector {}", out.display()))
}

fn save_model(ckpt: &Checkpoint, out: &Path) -> Result<()> {
    tensorio::write_checkpoint(ckpt, out, None)
        .map(|_| ())
        .with_context(|| format!("writing checkpoint {}", out.display()))
}

/// Write `data` to the given path, or to stdout when no path was given.
fn emit(out: Option<&Path>, data: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, data).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{data}");
            Ok(())
        }
    }
}

fn load_rules(spec: &str) -> Result<ParamGroupRules> {
    match spec {
        "builtin:t5" => Ok(ParamGroupRules::t5()),
        "builtin:toy" => Ok(ParamGroupRules::toy()),
        path => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading rules file {path}"))?;
            Ok(ParamGroupRules::parse(&text)?)
        }
    }
}

/// Parse a `PERIOD=VALUE` pair, as used by `--model` and `--eval-set`.
fn parse_period_pair(s: &str) -> Result<(TimePeriod, String), String> {
    let (period, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected PERIOD=VALUE, got {s:?}"))?;
    let period: TimePeriod = period.parse().map_err(|e| format!("{e}"))?;
    if value.is_empty() {
        return Err(format!("empty value in {s:?}"));
    }
    Ok((period, value.to_string()))
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s)
        .ok_or_else(|| format!("unknown ablation {s:?} (full, task_addition, scaling_only)"))
}

fn period_map<V>(
    flag: &str,
    pairs: Vec<(TimePeriod, String)>,
    mut value: impl FnMut(&str) -> Result<V>,
) -> Result<BTreeMap<TimePeriod, V>> {
    let mut map = BTreeMap::new();
    for (period, raw) in pairs {
        if map.insert(period, value(&raw)?).is_some() {
            bail!("duplicate {flag} period {period}");
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Vector arithmetic commands
// ---------------------------------------------------------------------------

fn cmd_diff(
    g: &Global,
    finetuned: &Path,
    pretrained: &Path,
    period: TimePeriod,
    provenance: Option<String>,
    out: &Path,
) -> Result<()> {
    let finetuned = load_ckpt(finetuned)?;
    let pretrained = load_ckpt(pretrained)?;
    let mut v = if g.intersect {
        let (v, dropped) = vecalg::diff_intersect(&finetuned, &pretrained, period)?;
        for name in &dropped {
            eprintln!("dropped {name} (present on one side only)");
        }
        v
    } else {
        vecalg::diff(&finetuned, &pretrained, period)?
    };
    if let Some(p) = provenance {
        v.provenance = p;
    }
    save_vector(&v, out)
}

fn cmd_apply(base: &Path, vector: &Path, scale: f64, out: &Path) -> Result<()> {
    let base = load_ckpt(base)?;
    let v = load_vector(vector)?;
    save_model(&vecalg::apply(&base, &v, scale)?, out)
}

fn cmd_lincomb(coeffs: &[f64], vectors: &[PathBuf], out: &Path) -> Result<()> {
    if coeffs.len() != vectors.len() {
        bail!(
            "got {} coefficients for {} vectors",
            coeffs.len(),
            vectors.len()
        );
    }
    let loaded = load_vectors(vectors)?;
    let terms: Vec<(f64, &TimeVector)> = coeffs.iter().copied().zip(&loaded).collect();
    save_vector(&vecalg::lincomb(&terms)?, out)
}

fn cmd_interp(vj: &Path, vk: &Path, alpha: f64, out: &Path) -> Result<()> {
    let vj = load_vector(vj)?;
    let vk = load_vector(vk)?;
    save_vector(&vecalg::interpolate(&vj, &vk, alpha)?, out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_analogy(
    task_j: &Path,
    lm_j: &Path,
    lm_k: &Path,
    a1: f64,
    a2: f64,
    a3: f64,
    out: &Path,
) -> Result<()> {
    let task_j = load_vector(task_j)?;
    let lm_j = load_vector(lm_j)?;
    let lm_k = load_vector(lm_k)?;
    save_vector(&vecalg::analogy(&task_j, &lm_j, &lm_k, a1, a2, a3)?, out)
}

fn cmd_soup_uniform(vectors: &[PathBuf], base: &Path, out: &Path) -> Result<()> {
    let loaded = load_vectors(vectors)?;
    let base = load_ckpt(base)?;
    let refs: Vec<&TimeVector> = loaded.iter().collect();
    save_model(&vecalg::uniform_soup(&refs, &base)?, out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_soup_greedy(
    g: &Global,
    vectors: &[PathBuf],
    base: &Path,
    max_passes: usize,
    eval: &EvalFlags,
    out: &Path,
    command: Vec<String>,
) -> Result<()> {
    let candidates = load_vectors(vectors)?;
    let base = load_ckpt(base)?;
    let evaluator = eval.spec(command)?;
    let result = sweep::greedy_soup(&candidates, &base, &evaluator, max_passes, g.workers)?;
    save_model(&result.soup, out)?;
    println!(
        "{}",
        json!({
            "soup_score": result.soup_score,
            "ingredients": result.ingredients,
            "candidate_scores": result.candidate_scores,
        })
    );
    Ok(())
}

fn cmd_merge_lora(base: &Path, adapter: &Path, out: &Path) -> Result<()> {
    let base = load_ckpt(base)?;
    let adapter = vecalg::load_lora_adapter(adapter)
        .with_context(|| format!("loading LoRA adapter {}", adapter.display()))?;
    save_model(&vecalg::merge_lora(&base, &adapter)?, out)
}

// ---------------------------------------------------------------------------
// Inspection commands
// ---------------------------------------------------------------------------

fn cmd_cossim_matrix(
    vectors: &[PathBuf],
    group: Option<GroupSelector>,
    rules: &str,
    out: Option<&Path>,
) -> Result<()> {
    let loaded = load_vectors(vectors)?;
    let rules_loaded;
    let filter = match group {
        Some(sel) => {
            rules_loaded = load_rules(rules)?;
            Some((sel, &rules_loaded))
        }
        None => None,
    };
    let grid = vecalg::cosine_matrix(&loaded, filter)?;
    let periods: Vec<TimePeriod> = loaded.iter().map(|v| v.period).collect();
    let m = MisalignmentMatrix::new(periods.clone(), periods, grid, true, "cosine")?;
    emit(out, &analysis::write_matrix_csv(&m))
}

fn cmd_group_norms(vector: &Path, rules: &str, out: Option<&Path>) -> Result<()> {
    let v = load_vector(vector)?;
    let rules = load_rules(rules)?;
    let mut csv = String::from("group,l2_norm,tensors\n");
    for (group, &(norm, count)) in vecalg::group_norms(&v, &rules).iter() {
        csv.push_str(&format!("{},{norm},{count}\n", group.as_str()));
    }
    emit(out, &csv)
}

fn cmd_swap(
    base_model: &Path,
    donor_model: &Path,
    groups: &[GroupSelector],
    rules: &str,
    out: &Path,
) -> Result<()> {
    let base_model = load_ckpt(base_model)?;
    let donor_model = load_ckpt(donor_model)?;
    let rules = load_rules(rules)?;
    let (swapped, from_donor) = vecalg::swap_groups(&base_model, &donor_model, groups, &rules)?;
    save_model(&swapped, out)?;
    for name in from_donor {
        println!("{name}");
    }
    Ok(())
}

fn cmd_project(
    vectors: &[PathBuf],
    group: Option<GroupSelector>,
    rules: &str,
    out: Option<&Path>,
) -> Result<()> {
    let loaded = load_vectors(vectors)?;
    let rules_loaded;
    let filter = match group {
        Some(sel) => {
            rules_loaded = load_rules(rules)?;
            Some((sel, &rules_loaded))
        }
        None => None,
    };
    let coords = analysis::project_2d(&loaded, filter)?;
    let mut csv = String::from("period,x,y\n");
    for (v, (x, y)) in loaded.iter().zip(&coords) {
        csv.push_str(&format!("{},{x},{y}\n", v.period));
    }
    emit(out, &csv)
}

// ---------------------------------------------------------------------------
// Matrix and analysis commands
// ---------------------------------------------------------------------------

fn cmd_matrix(
    g: &Global,
    models: Vec<(TimePeriod, String)>,
    eval_sets: Vec<(TimePeriod, String)>,
    metric: &str,
    eval: &EvalFlags,
    out: Option<&Path>,
    command: Vec<String>,
) -> Result<()> {
    let models = period_map("--model", models, |path| load_ckpt(Path::new(path)))?;
    let eval_sets = period_map("--eval-set", eval_sets, |arg| Ok(arg.to_string()))?;
    let evaluator = eval.spec(command)?;
    let m = sweep::build_misalignment_matrix(&models, &eval_sets, &evaluator, metric, g.workers)?;
    emit(out, &analysis::write_matrix_csv(&m))
}

fn cmd_analyze_normalize(matrix: &MatrixFlags, out: Option<&Path>) -> Result<()> {
    let m = matrix.read()?;
    let normalized = analysis::normalize_percent_from_mean(&m)?;
    emit(out, &analysis::write_matrix_csv(&normalized))
}

fn cmd_analyze_td(matrix: &MatrixFlags, pooled: bool) -> Result<()> {
    let report = analysis::td_score(&matrix.read()?, pooled)?;
    println!(
        "{}",
        json!({
            "slope": report.slope,
            "r2": report.r2,
            "normalized": report.normalized,
        })
    );
    Ok(())
}

fn cmd_analyze_corr(similarity: &Path, matrix: &MatrixFlags) -> Result<()> {
    let text = fs::read_to_string(similarity)
        .with_context(|| format!("reading {}", similarity.display()))?;
    let sims = analysis::read_matrix_csv(&text, true, "similarity")?;
    let m = matrix.read()?;
    if sims.train_periods != m.train_periods || sims.eval_periods != m.eval_periods {
        bail!("similarity and matrix period labels disagree");
    }
    let report = analysis::correlate_similarity_degradation(&sims.values, &m)?;
    println!(
        "{}",
        json!({
            "pearson_r": report.pearson_r,
            "p_value": report.p_value,
            "n": report.n,
        })
    );
    Ok(())
}

fn cmd_analyze_season(matrix: &MatrixFlags, out: Option<&Path>) -> Result<()> {
    let stats = analysis::seasonality_stats(&matrix.read()?)?;
    let csv = format!(
        "group,mean,cells\naligned,{},{}\nstripe,{},{}\nother,{},{}\n",
        stats.aligned.mean,
        stats.aligned.count,
        stats.stripe.mean,
        stats.stripe.count,
        stats.other.mean,
        stats.other.count,
    );
    emit(out, &csv)
}

fn cmd_analyze_online(matrix: &MatrixFlags, out: Option<&Path>) -> Result<()> {
    let m = matrix.read()?;
    let normalized = MisalignmentMatrix::new(
        m.train_periods.clone(),
        m.eval_periods.clone(),
        analysis::normalize_online_similarity(&m.values)?,
        m.higher_is_better,
        format!("{}_normalized", m.metric_name),
    )?;
    emit(out, &analysis::write_matrix_csv(&normalized))
}

// ---------------------------------------------------------------------------
// Sweep commands
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_sweep_interp(
    g: &Global,
    vj: &Path,
    vk: &Path,
    base: &Path,
    alphas: &[f64],
    eval: &EvalFlags,
    out: Option<&Path>,
    command: Vec<String>,
) -> Result<()> {
    let vj = load_vector(vj)?;
    let vk = load_vector(vk)?;
    let base = load_ckpt(base)?;
    let evaluator = eval.spec(command)?;
    let result = sweep::sweep_interpolation(&vj, &vk, &base, alphas, &evaluator, g.workers)?;
    emit(out, &result.to_csv())?;
    let best = result.best_row();
    eprintln!(
        "best: alpha={} score={}",
        best.coeffs[0].expect("interpolation rows carry a1"),
        best.score
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep_analogy(
    g: &Global,
    task_j: &Path,
    lm_j: &Path,
    lm_k: &Path,
    base: &Path,
    a1: Option<Vec<f64>>,
    a2: Option<Vec<f64>>,
    a3: Option<Vec<f64>>,
    ablation: Ablation,
    eval: &EvalFlags,
    out: Option<&Path>,
    command: Vec<String>,
) -> Result<()> {
    let grid = match (a1, a2, a3) {
        (None, None, None) => AlphaGrid::analogy_default().restricted(ablation),
        (Some(a1), Some(a2), Some(a3)) => AlphaGrid::new(a1, a2, a3)?,
        _ => bail!("give all of --a1/--a2/--a3 or none (none selects the built-in grid)"),
    };
    let task_j = load_vector(task_j)?;
    let lm_j = load_vector(lm_j)?;
    let lm_k = load_vector(lm_k)?;
    let base = load_ckpt(base)?;
    let evaluator = eval.spec(command)?;
    let result = sweep::sweep_analogy(
        &task_j, &lm_j, &lm_k, &base, &grid, &evaluator, ablation, g.workers,
    )?;
    emit(out, &result.to_csv())?;
    let best = result.best_row();
    let coeff = |i: usize| best.coeffs[i].expect("analogy rows carry a1..a3");
    eprintln!(
        "best: a1={} a2={} a3={} score={}",
        coeff(0),
        coeff(1),
        coeff(2),
        best.score
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Toy-lab commands
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_toy_gen(
    g: &Global,
    periods: Vec<TimePeriod>,
    vocab_size: usize,
    tokens_per_period: usize,
    drift_rate: f64,
    season_strength: f64,
    season_period: u32,
    out: &Path,
) -> Result<()> {
    let mut spec = toylab::ToyCorpusSpec::new(periods, g.seed);
    spec.vocab_size = vocab_size;
    spec.tokens_per_period = tokens_per_period;
    spec.drift_rate = drift_rate;
    spec.season_strength = season_strength;
    spec.season_period = season_period;
    let corpus = toylab::generate_corpus(&spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (period, tokens) in &corpus {
        let path = out.join(format!("{}.toyc", toylab::slug(*period)));
        toylab::write_corpus(&path, spec.vocab_size, tokens)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("wrote {} corpus files to {}", corpus.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_toy_train(
    g: &Global,
    corpus: &Path,
    init_from: Option<&Path>,
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    period: Option<TimePeriod>,
    out: &Path,
) -> Result<()> {
    let (vocab, tokens) = toylab::read_corpus(corpus)
        .with_context(|| format!("reading corpus {}", corpus.display()))?;
    // The init model is built here (rather than via InitMode::Random inside
    // train) so corpora with non-default vocab sizes get a matching
    // embedding table; at the default vocab the two paths are identical.
    let init = match init_from {
        Some(path) => ToyModel::from_checkpoint(&load_ckpt(path)?)?,
        None => ToyModel::init(
            vocab,
            toylab::DEFAULT_EMBED_DIM,
            toylab::DEFAULT_HIDDEN_DIM,
            g.seed,
        ),
    };
    let spec = TrainSpec {
        learning_rate,
        epochs,
        batch_size,
        seed: g.seed,
        init: InitMode::FromCheckpoint,
    };
    let model = toylab::train(&tokens, &spec, Some(&init))?;
    let mut ckpt = model.to_checkpoint();
    vecalg::stamp_model_metadata(&mut ckpt, period);
    save_model(&ckpt, out)
}

fn cmd_toy_eval(model: &Path, corpus: &Path) -> Result<()> {
    let model = ToyModel::from_checkpoint(&load_ckpt(model)?)?;
    let (_vocab, tokens) = toylab::read_corpus(corpus)
        .with_context(|| format!("reading corpus {}", corpus.display()))?;
    let (cross_entropy, perplexity) = toylab::evaluate(&model, &tokens)?;
    println!(
        "{}",
        json!({
            "cross_entropy": cross_entropy,
            "perplexity": perplexity,
        })
    );
    Ok(())
}
