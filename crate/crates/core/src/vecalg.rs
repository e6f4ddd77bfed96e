//! The algebra of time vectors.
//!
//! A time vector is the elementwise difference between a finetuned
//! checkpoint and the pretrained checkpoint it started from:
//! `τ_t = θ_t − θ_pre`.
//!
//! Everything else in this module is linear algebra over such deltas:
//! applying them back to a base (θ_pre + s·τ), linear combinations,
//! interpolation α·τ_j + (1−α)·τ_k, task analogies
//! α1·τ_task + α2·τ_lm_tgt − α3·τ_lm_src, uniform soups, LoRA merging,
//! cosine similarity, and parameter-group selection/swapping.
//!
//! All arithmetic is carried out in F32 with F64 accumulation for
//! reductions (dot products, norms, multi-term sums); results are stored
//! as F32 tensors regardless of input storage dtype.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensorio::{
    self, fingerprint, Checkpoint, Dtype, Fingerprint, Tensor, TensorIoError, WriteStats,
};

pub const META_BASE_FINGERPRINT: &str = "chronovec.base_fingerprint";
pub const META_PERIOD_KIND: &str = "chronovec.period_kind";
pub const META_PERIOD_ORDINAL: &str = "chronovec.period_ordinal";
pub const META_ROLE: &str = "chronovec.role";
pub const META_PROVENANCE: &str = "chronovec.provenance";
pub const ROLE_TIME_VECTOR: &str = "time_vector";
pub const ROLE_MODEL: &str = "model";
pub const ROLE_LORA_ADAPTER: &str = "lora_adapter";

#[derive(Debug, Error)]
pub enum VecAlgError {
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error(
        "inventory mismatch: missing from finetuned {missing:?}, extra in finetuned {extra:?}"
    )]
    InventoryMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("shape mismatch for {name:?}: {left:?} vs {right:?}")]
    ShapeMismatch {
        name: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("base fingerprint mismatch: vector was built on {expected}, base is {actual}")]
    FingerprintMismatch {
        expected: Fingerprint,
        actual: Fingerprint,
    },
    #[error("base is missing tensor {0:?} required by the vector")]
    MissingInBase(String),
    #[error("empty term list")]
    EmptyTerms,
    #[error("mixed base fingerprints in linear combination")]
    MixedBases,
    #[error("alpha {0} outside [0, 1]; use lincomb for extrapolation")]
    AlphaOutOfRange(f64),
    #[error("undefined similarity: zero-norm operand")]
    ZeroNorm,
    #[error("lora target {0:?} missing from base")]
    MissingLoraTarget(String),
    #[error("unknown group token {0:?}")]
    UnknownGroup(String),
    #[error("unknown param group {0:?}")]
    UnknownParamGroup(String),
    #[error("rules line {line}: {reason}")]
    BadRulesLine { line: usize, reason: String },
    #[error("malformed period {0:?}; expected year:YYYY, month:YYYY-MM, or index:N")]
    BadPeriod(String),
    #[error("not a usable vector file: {0}")]
    BadVectorFile(String),
    #[error("not a usable adapter file: {0}")]
    BadAdapterFile(String),
}

pub type Result<T> = std::result::Result<T, VecAlgError>;

// ---------------------------------------------------------------------------
// Time periods
// ---------------------------------------------------------------------------

/// A labeled time period. Ordinal differences measure misalignment
/// distance; months are encoded as year×12 + month − 1 so that consecutive
/// months differ by one and month-of-year is ordinal mod 12.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimePeriod {
    Year(i64),
    Month { year: i64, month: u8 },
    Index(i64),
}

impl TimePeriod {
    pub fn month(year: i64, month: u8) -> TimePeriod {
        assert!((1..=12).contains(&month), "month must be 1..=12");
        TimePeriod::Month { year, month }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TimePeriod::Year(_) => "year",
            TimePeriod::Month { .. } => "month",
            TimePeriod::Index(_) => "index",
        }
    }

    pub fn ordinal(&self) -> i64 {
        match *self {
            TimePeriod::Year(y) => y,
            TimePeriod::Month { year, month } => year * 12 + i64::from(month) - 1,
            TimePeriod::Index(i) => i,
        }
    }

    pub fn from_kind_ordinal(kind: &str, ordinal: i64) -> Result<TimePeriod> {
        match kind {
            "year" => Ok(TimePeriod::Year(ordinal)),
            "month" => Ok(TimePeriod::Month {
                year: ordinal.div_euclid(12),
                month: (ordinal.rem_euclid(12) + 1) as u8,
            }),
            "index" => Ok(TimePeriod::Index(ordinal)),
            _ => Err(VecAlgError::BadPeriod(format!("{kind}:{ordinal}"))),
        }
    }

    /// Month-of-year position, 0..12, for month-kind periods.
    pub fn month_of_year(&self) -> Option<i64> {
        match self {
            TimePeriod::Month { .. } => Some(self.ordinal().rem_euclid(12)),
            _ => None,
        }
    }
}

impl fmt::Display for TimePeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TimePeriod::Year(y) => write!(f, "year:{y}"),
            TimePeriod::Month { year, month } => write!(f, "month:{year}-{month:02}"),
            TimePeriod::Index(i) => write!(f, "index:{i}"),
        }
    }
}

impl FromStr for TimePeriod {
    type Err = VecAlgError;

    fn from_str(s: &str) -> Result<TimePeriod> {
        let bad = || VecAlgError::BadPeriod(s.to_string());
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "year" => rest.parse().map(TimePeriod::Year).map_err(|_| bad()),
            "index" => rest.parse().map(TimePeriod::Index).map_err(|_| bad()),
            "month" => {
                let (y, m) = rest.split_once('-').ok_or_else(bad)?;
                let year: i64 = y.parse().map_err(|_| bad())?;
                let month: u8 = m.parse().map_err(|_| bad())?;
                if !(1..=12).contains(&month) {
                    return Err(bad());
                }
                Ok(TimePeriod::Month { year, month })
            }
            _ => Err(bad()),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter groups
// ---------------------------------------------------------------------------

/// The four tensor classes used by group-wise analyses and swaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Embeddings,
    Attention,
    FeedForward,
    Other,
}

pub const ALL_GROUPS: [ParamGroup; 4] = [
    ParamGroup::Embeddings,
    ParamGroup::Attention,
    ParamGroup::FeedForward,
    ParamGroup::Other,
];

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Attention => "attention",
            ParamGroup::FeedForward => "feed_forward",
            ParamGroup::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Result<ParamGroup> {
        match s {
            "embeddings" => Ok(ParamGroup::Embeddings),
            "attention" => Ok(ParamGroup::Attention),
            "feed_forward" => Ok(ParamGroup::FeedForward),
            "other" => Ok(ParamGroup::Other),
            _ => Err(VecAlgError::UnknownParamGroup(s.to_string())),
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Group selection token accepted by swap and filter operations. Extends
/// the plain groups with the `non_embedding` complement and `all`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupSelector {
    Group(ParamGroup),
    NonEmbedding,
    All,
}

impl GroupSelector {
    pub fn matches(self, group: ParamGroup) -> bool {
        match self {
            GroupSelector::Group(g) => g == group,
            GroupSelector::NonEmbedding => group != ParamGroup::Embeddings,
            GroupSelector::All => true,
        }
    }

    pub fn parse(s: &str) -> Result<GroupSelector> {
        match s {
            "non_embedding" => Ok(GroupSelector::NonEmbedding),
            "all" => Ok(GroupSelector::All),
            _ => ParamGroup::parse(s)
                .map(GroupSelector::Group)
                .map_err(|_| VecAlgError::UnknownGroup(s.to_string())),
        }
    }
}

impl fmt::Display for GroupSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupSelector::Group(g) => g.fmt(f),
            GroupSelector::NonEmbedding => f.write_str("non_embedding"),
            GroupSelector::All => f.write_str("all"),
        }
    }
}

/// Ordered substring rules classifying tensor names into groups. The first
/// matching rule wins; names matching no rule fall into `other`.
#[derive(Debug, Clone)]
pub struct ParamGroupRules {
    rules: Vec<(ParamGroup, String)>,
}

impl ParamGroupRules {
    pub fn new(rules: Vec<(ParamGroup, String)>) -> ParamGroupRules {
        ParamGroupRules { rules }
    }

    /// Profile matching T5-style tensor names.
    pub fn t5() -> ParamGroupRules {
        let rules = [
            (ParamGroup::Embeddings, "embed"),
            (ParamGroup::Embeddings, "shared"),
            (ParamGroup::Attention, "SelfAttention"),
            (ParamGroup::Attention, "EncDecAttention"),
            (ParamGroup::Attention, ".q."),
            (ParamGroup::Attention, ".k."),
            (ParamGroup::Attention, ".v."),
            (ParamGroup::Attention, ".o."),
            (ParamGroup::FeedForward, "DenseReluDense"),
            (ParamGroup::FeedForward, "wi"),
            (ParamGroup::FeedForward, "wo"),
        ];
        ParamGroupRules::new(rules.iter().map(|(g, p)| (*g, p.to_string())).collect())
    }

    /// Profile matching the toy model's tensor names.
    pub fn toy() -> ParamGroupRules {
        ParamGroupRules::new(vec![
            (ParamGroup::Embeddings, "embed.".to_string()),
            (ParamGroup::FeedForward, "ff.".to_string()),
        ])
    }

    /// Parse rules text: one rule per line, "group<TAB>pattern"; blank
    /// lines and lines starting with '#' are skipped.
    pub fn parse(text: &str) -> Result<ParamGroupRules> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (group, pattern) =
                line.split_once('\t')
                    .ok_or_else(|| VecAlgError::BadRulesLine {
                        line: line_no,
                        reason: "expected \"group<TAB>pattern\"".to_string(),
                    })?;
            let group = ParamGroup::parse(group).map_err(|_| VecAlgError::BadRulesLine {
                line: line_no,
                reason: format!("unknown group {group:?}"),
            })?;
            if pattern.is_empty() {
                return Err(VecAlgError::BadRulesLine {
                    line: line_no,
                    reason: "empty pattern".to_string(),
                });
            }
            rules.push((group, pattern.to_string()));
        }
        Ok(ParamGroupRules::new(rules))
    }

    pub fn classify(&self, name: &str) -> ParamGroup {
        for (group, pattern) in &self.rules {
            if name.contains(pattern.as_str()) {
                return *group;
            }
        }
        ParamGroup::Other
    }
}

// ---------------------------------------------------------------------------
// Time vectors
// ---------------------------------------------------------------------------

/// A checkpoint-shaped weight delta with its provenance: which base it was
/// computed against and which time period the finetuned model covered.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeVector {
    pub delta: Checkpoint,
    pub base: Fingerprint,
    pub period: TimePeriod,
    pub provenance: String,
}

/// Fingerprint of `base` restricted to the given sorted name list. Used by
/// `apply` so that vectors built in intersect mode (or any vector whose
/// inventory is a subset of the base) still verify against the base.
fn restricted_fingerprint<'a>(
    base: &Checkpoint,
    names: impl Iterator<Item = &'a str>,
) -> Result<Fingerprint> {
    let mut hasher = Sha256::new();
    for name in names {
        let tensor = base
            .get(name)
            .ok_or_else(|| VecAlgError::MissingInBase(name.to_string()))?;
        hasher.update(name.as_bytes());
        hasher.update(b"\n");
        hasher.update(tensor.dtype().as_str().as_bytes());
        hasher.update(b"\n");
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        hasher.update(dims.join(",").as_bytes());
        hasher.update(b"\n");
    }
    Ok(Fingerprint::from_bytes(hasher.finalize().into()))
}

fn subtract_tensors(name: &str, left: &Tensor, right: &Tensor) -> Result<Tensor> {
    if left.shape() != right.shape() {
        return Err(VecAlgError::ShapeMismatch {
            name: name.to_string(),
            left: left.shape().to_vec(),
            right: right.shape().to_vec(),
        });
    }
    let a = left.to_f32();
    let b = right.to_f32();
    let out: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_f32(left.shape().to_vec(), &out)?)
}

/// Build τ = finetuned − pretrained. Requires identical inventories; use
/// [`diff_intersect`] when the checkpoints only partially overlap.
pub fn diff(
    finetuned: &Checkpoint,
    pretrained: &Checkpoint,
    period: TimePeriod,
) -> Result<TimeVector> {
    let missing: Vec<String> = pretrained
        .names()
        .filter(|n| !finetuned.contains(n))
        .map(str::to_string)
        .collect();
    let extra: Vec<String> = finetuned
        .names()
        .filter(|n| !pretrained.contains(n))
        .map(str::to_string)
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(VecAlgError::InventoryMismatch { missing, extra });
    }
    let mut delta = Checkpoint::new();
    for (name, ft) in finetuned.iter() {
        let pre = pretrained.get(name).expect("inventory checked above");
        delta.insert(name, subtract_tensors(name, ft, pre)?)?;
    }
    Ok(TimeVector {
        delta,
        base: fingerprint(pretrained),
        period,
        provenance: String::new(),
    })
}

/// Like [`diff`] but over the common name set only. Returns the vector and
/// the dropped names (present on one side only), sorted. The recorded base
/// fingerprint covers just the common inventory, so `apply` later verifies
/// the same restriction.
pub fn diff_intersect(
    finetuned: &Checkpoint,
    pretrained: &Checkpoint,
    period: TimePeriod,
) -> Result<(TimeVector, Vec<String>)> {
    let mut dropped = Vec::new();
    let mut delta = Checkpoint::new();
    for (name, ft) in finetuned.iter() {
        match pretrained.get(name) {
            Some(pre) => delta.insert(name, subtract_tensors(name, ft, pre)?)?,
            None => dropped.push(name.to_string()),
        }
    }
    for (name, _) in pretrained.iter() {
        if !finetuned.contains(name) {
            dropped.push(name.to_string());
        }
    }
    dropped.sort();
    let base = restricted_fingerprint(pretrained, delta.names())?;
    Ok((
        TimeVector {
            delta,
            base,
            period,
            provenance: String::new(),
        },
        dropped,
    ))
}

/// θ = base + scale·τ. Tensors outside the vector's inventory pass through
/// unchanged; the base must fingerprint-match over the vector's inventory.
pub fn apply(base: &Checkpoint, v: &TimeVector, scale: f64) -> Result<Checkpoint> {
    let actual = restricted_fingerprint(base, v.delta.names())?;
    if actual != v.base {
        return Err(VecAlgError::FingerprintMismatch {
            expected: v.base,
            actual,
        });
    }
    let mut out = Checkpoint::new();
    out.metadata = base.metadata.clone();
    for (name, tensor) in base.iter() {
        match v.delta.get(name) {
            Some(d) => {
                let b = tensor.to_f32();
                let dv = d.to_f32();
                let vals: Vec<f32> = b
                    .iter()
                    .zip(&dv)
                    .map(|(x, y)| (f64::from(*x) + scale * f64::from(*y)) as f32)
                    .collect();
                out.insert(name, Tensor::from_f32(tensor.shape().to_vec(), &vals)?)?;
            }
            None => out.insert(name, tensor.clone())?,
        }
    }
    Ok(out)
}

/// Σ coef_i · τ_i, accumulated per scalar in F64 and stored as F32. The
/// result keeps the common period if every term shares one, otherwise it is
/// tagged with the unlabeled period `index:0`.
pub fn lincomb(terms: &[(f64, &TimeVector)]) -> Result<TimeVector> {
    let (_, first) = terms.first().ok_or(VecAlgError::EmptyTerms)?;
    for (_, v) in terms {
        if v.base != first.base {
            return Err(VecAlgError::MixedBases);
        }
        let missing: Vec<String> = first
            .delta
            .names()
            .filter(|n| !v.delta.contains(n))
            .map(str::to_string)
            .collect();
        let extra: Vec<String> = v
            .delta
            .names()
            .filter(|n| !first.delta.contains(n))
            .map(str::to_string)
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(VecAlgError::InventoryMismatch { missing, extra });
        }
    }
    let mut delta = Checkpoint::new();
    for (name, t0) in first.delta.iter() {
        let mut acc = vec![0.0f64; t0.len()];
        for (coef, v) in terms {
            let t = v.delta.get(name).expect("inventory checked above");
            if t.shape() != t0.shape() {
                return Err(VecAlgError::ShapeMismatch {
                    name: name.to_string(),
                    left: t0.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            for (a, x) in acc.iter_mut().zip(t.to_f32()) {
                *a += coef * f64::from(x);
            }
        }
        let vals: Vec<f32> = acc.iter().map(|a| *a as f32).collect();
        delta.insert(name, Tensor::from_f32(t0.shape().to_vec(), &vals)?)?;
    }
    let period = if terms.iter().all(|(_, v)| v.period == first.period) {
        first.period
    } else {
        TimePeriod::Index(0)
    };
    Ok(TimeVector {
        delta,
        base: first.base,
        period,
        provenance: String::new(),
    })
}

/// α·τ_j + (1−α)·τ_k for α ∈ [0, 1].
pub fn interpolate(vj: &TimeVector, vk: &TimeVector, alpha: f64) -> Result<TimeVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(VecAlgError::AlphaOutOfRange(alpha));
    }
    lincomb(&[(alpha, vj), (1.0 - alpha, vk)])
}

/// Task analogy: τ_tgt ≈ a1·τ_task + a2·τ_lm_tgt − a3·τ_lm_src. The result
/// carries the target LM vector's period.
pub fn analogy(
    task_j: &TimeVector,
    lm_j: &TimeVector,
    lm_k: &TimeVector,
    a1: f64,
    a2: f64,
    a3: f64,
) -> Result<TimeVector> {
    let mut v = lincomb(&[(a1, task_j), (a2, lm_k), (-a3, lm_j)])?;
    v.period = lm_k.period;
    Ok(v)
}

/// θ_pre + (1/|T|)·Σ τ_t.
pub fn uniform_soup(vectors: &[&TimeVector], base: &Checkpoint) -> Result<Checkpoint> {
    if vectors.is_empty() {
        return Err(VecAlgError::EmptyTerms);
    }
    let w = 1.0 / vectors.len() as f64;
    let terms: Vec<(f64, &TimeVector)> = vectors.iter().map(|v| (w, *v)).collect();
    apply(base, &lincomb(&terms)?, 1.0)
}

// ---------------------------------------------------------------------------
// LoRA merging
// ---------------------------------------------------------------------------

/// One low-rank pair: the adapted weight receives (alpha/r)·B·A.
#[derive(Debug, Clone)]
pub struct LoraPair {
    /// r×k down-projection output.
    pub a: Tensor,
    /// d×r up-projection.
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub pairs: BTreeMap<String, LoraPair>,
    pub rank: usize,
    pub alpha: f64,
}

/// Fold adapter products into the base: W ← W + (alpha/r)·B·A for each
/// target. Non-target tensors are untouched.
pub fn merge_lora(base: &Checkpoint, adapter: &LoraAdapter) -> Result<Checkpoint> {
    let mut out = base.clone();
    let scale = adapter.alpha / adapter.rank as f64;
    for (target, pair) in &adapter.pairs {
        let w = base
            .get(target)
            .ok_or_else(|| VecAlgError::MissingLoraTarget(target.clone()))?;
        let (d, r_b) = match pair.b.shape() {
            [d, r] => (*d, *r),
            s => {
                return Err(VecAlgError::ShapeMismatch {
                    name: format!("{target} (lora B)"),
                    left: s.to_vec(),
                    right: vec![0, adapter.rank],
                })
            }
        };
        let (r_a, k) = match pair.a.shape() {
            [r, k] => (*r, *k),
            s => {
                return Err(VecAlgError::ShapeMismatch {
                    name: format!("{target} (lora A)"),
                    left: s.to_vec(),
                    right: vec![adapter.rank, 0],
                })
            }
        };
        if r_a != adapter.rank || r_b != adapter.rank || w.shape() != [d, k] {
            return Err(VecAlgError::ShapeMismatch {
                name: target.clone(),
                left: w.shape().to_vec(),
                right: vec![d, k],
            });
        }
        let wv = w.to_f32();
        let av = pair.a.to_f32();
        let bv = pair.b.to_f32();
        let mut merged = vec![0.0f32; d * k];
        for i in 0..d {
            for j in 0..k {
                let mut acc = 0.0f64;
                for t in 0..adapter.rank {
                    acc += f64::from(bv[i * adapter.rank + t]) * f64::from(av[t * k + j]);
                }
                merged[i * k + j] = (f64::from(wv[i * k + j]) + scale * acc) as f32;
            }
        }
        out.remove(target);
        out.insert(target, Tensor::from_f32(vec![d, k], &merged)?)?;
    }
    Ok(out)
}

/// Read an adapter container: tensors named "<target>.lora_A" /
/// "<target>.lora_B" with metadata "chronovec.lora_rank" and
/// "chronovec.lora_alpha".
pub fn load_lora_adapter(path: &Path) -> Result<LoraAdapter> {
    let ckpt = tensorio::load_checkpoint(path)?;
    let rank: usize = ckpt
        .metadata
        .get("chronovec.lora_rank")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| VecAlgError::BadAdapterFile("missing chronovec.lora_rank".to_string()))?;
    let alpha: f64 = ckpt
        .metadata
        .get("chronovec.lora_alpha")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| VecAlgError::BadAdapterFile("missing chronovec.lora_alpha".to_string()))?;
    let mut halves: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    for (name, tensor) in ckpt.iter() {
        if let Some(target) = name.strip_suffix(".lora_A") {
            halves.entry(target.to_string()).or_default().0 = Some(tensor.clone());
        } else if let Some(target) = name.strip_suffix(".lora_B") {
            halves.entry(target.to_string()).or_default().1 = Some(tensor.clone());
        } else {
            return Err(VecAlgError::BadAdapterFile(format!(
                "tensor {name:?} is neither .lora_A nor .lora_B"
            )));
        }
    }
    let mut pairs = BTreeMap::new();
    for (target, (a, b)) in halves {
        match (a, b) {
            (Some(a), Some(b)) => {
                pairs.insert(target, LoraPair { a, b });
            }
            _ => {
                return Err(VecAlgError::BadAdapterFile(format!(
                    "target {target:?} is missing one of its lora_A/lora_B halves"
                )))
            }
        }
    }
    Ok(LoraAdapter { pairs, rank, alpha })
}

/// Write an adapter in the container schema read by [`load_lora_adapter`].
pub fn save_lora_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    for (target, pair) in &adapter.pairs {
        ckpt.insert(&format!("{target}.lora_A"), pair.a.clone())?;
        ckpt.insert(&format!("{target}.lora_B"), pair.b.clone())?;
    }
    ckpt.metadata
        .insert("chronovec.lora_rank".to_string(), adapter.rank.to_string());
    ckpt.metadata.insert(
        "chronovec.lora_alpha".to_string(),
        adapter.alpha.to_string(),
    );
    ckpt.metadata
        .insert(META_ROLE.to_string(), ROLE_LORA_ADAPTER.to_string());
    tensorio::write_checkpoint(&ckpt, path, None)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Similarity and norms
// ---------------------------------------------------------------------------

/// Deterministic chunked-pairwise F64 accumulator: scalars are summed
/// sequentially within fixed 1024-element chunks and the chunk totals are
/// reduced pairwise, so the summation tree never depends on thread count.
pub(crate) struct PairwiseSum {
    partials: Vec<f64>,
    chunk: f64,
    filled: usize,
}

const CHUNK: usize = 1024;

impl PairwiseSum {
    pub(crate) fn new() -> PairwiseSum {
        PairwiseSum {
            partials: Vec::new(),
            chunk: 0.0,
            filled: 0,
        }
    }

    pub(crate) fn push(&mut self, x: f64) {
        self.chunk += x;
        self.filled += 1;
        if self.filled == CHUNK {
            self.partials.push(self.chunk);
            self.chunk = 0.0;
            self.filled = 0;
        }
    }

    pub(crate) fn finish(mut self) -> f64 {
        if self.filled > 0 {
            self.partials.push(self.chunk);
        }
        let mut level = self.partials;
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len().div_ceil(2));
            for pair in level.chunks(2) {
                next.push(pair.iter().sum());
            }
            level = next;
        }
        level.first().copied().unwrap_or(0.0)
    }
}

fn selected_names<'a>(
    v: &'a TimeVector,
    filter: Option<(GroupSelector, &ParamGroupRules)>,
) -> Vec<&'a str> {
    v.delta
        .names()
        .filter(|name| match filter {
            Some((sel, rules)) => sel.matches(rules.classify(name)),
            None => true,
        })
        .collect()
}

/// Cosine similarity between two vectors, flattening the selected tensors
/// in lexicographic name order. `filter` restricts to one parameter group;
/// `None` uses every tensor.
pub fn cosine_similarity(
    v1: &TimeVector,
    v2: &TimeVector,
    filter: Option<(GroupSelector, &ParamGroupRules)>,
) -> Result<f64> {
    let names1 = selected_names(v1, filter);
    let names2 = selected_names(v2, filter);
    if names1 != names2 {
        let missing = names2
            .iter()
            .filter(|n| !names1.contains(n))
            .map(|n| n.to_string())
            .collect();
        let extra = names1
            .iter()
            .filter(|n| !names2.contains(n))
            .map(|n| n.to_string())
            .collect();
        return Err(VecAlgError::InventoryMismatch { missing, extra });
    }
    let mut dot = PairwiseSum::new();
    let mut sq1 = PairwiseSum::new();
    let mut sq2 = PairwiseSum::new();
    for name in names1 {
        let t1 = v1.delta.get(name).expect("name from v1");
        let t2 = v2.delta.get(name).expect("names checked equal");
        if t1.shape() != t2.shape() {
            return Err(VecAlgError::ShapeMismatch {
                name: name.to_string(),
                left: t1.shape().to_vec(),
                right: t2.shape().to_vec(),
            });
        }
        for (x, y) in t1.to_f32().iter().zip(t2.to_f32()) {
            let (x, y) = (f64::from(*x), f64::from(y));
            dot.push(x * y);
            sq1.push(x * x);
            sq2.push(y * y);
        }
    }
    let (dot, n1, n2) = (dot.finish(), sq1.finish().sqrt(), sq2.finish().sqrt());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(VecAlgError::ZeroNorm);
    }
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Full pairwise cosine matrix over a vector population (diagonal included).
pub fn cosine_matrix(
    vectors: &[TimeVector],
    filter: Option<(GroupSelector, &ParamGroupRules)>,
) -> Result<Vec<Vec<f64>>> {
    let n = vectors.len();
    let mut grid = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = cosine_similarity(&vectors[i], &vectors[j], filter)?;
            // Self-similarity is 1 by definition, but the computed quotient
            // can land an ulp off; pin it after the zero-norm check above.
            let c = if i == j { 1.0 } else { c };
            grid[i][j] = c;
            grid[j][i] = c;
        }
    }
    Ok(grid)
}

/// Per-group L2 norm and tensor count. Every group appears in the output,
/// with (0, 0) for groups holding no tensors.
pub fn group_norms(v: &TimeVector, rules: &ParamGroupRules) -> BTreeMap<ParamGroup, (f64, usize)> {
    let mut sums: BTreeMap<ParamGroup, (PairwiseSum, usize)> = ALL_GROUPS
        .iter()
        .map(|g| (*g, (PairwiseSum::new(), 0)))
        .collect();
    for (name, tensor) in v.delta.iter() {
        let entry = sums
            .get_mut(&rules.classify(name))
            .expect("all groups present");
        entry.1 += 1;
        for x in tensor.to_f32() {
            entry.0.push(f64::from(x) * f64::from(x));
        }
    }
    sums.into_iter()
        .map(|(g, (sum, count))| (g, (sum.finish().sqrt(), count)))
        .collect()
}

/// Rebuild a model taking tensors whose group matches any selector from
/// `donor_model` and everything else from `base_model`. Also returns the
/// names that came from the donor.
pub fn swap_groups(
    base_model: &Checkpoint,
    donor_model: &Checkpoint,
    groups: &[GroupSelector],
    rules: &ParamGroupRules,
) -> Result<(Checkpoint, Vec<String>)> {
    let (fb, fd) = (fingerprint(base_model), fingerprint(donor_model));
    if fb != fd {
        return Err(VecAlgError::FingerprintMismatch {
            expected: fb,
            actual: fd,
        });
    }
    let mut out = Checkpoint::new();
    out.metadata = base_model.metadata.clone();
    let mut from_donor = Vec::new();
    for (name, tensor) in base_model.iter() {
        let group = rules.classify(name);
        if groups.iter().any(|sel| sel.matches(group)) {
            let donor = donor_model.get(name).expect("fingerprints equal");
            out.insert(name, donor.clone())?;
            from_donor.push(name.to_string());
        } else {
            out.insert(name, tensor.clone())?;
        }
    }
    Ok((out, from_donor))
}

// ---------------------------------------------------------------------------
// Vector container I/O
// ---------------------------------------------------------------------------

/// Write a time vector as a checkpoint container with chronovec metadata.
pub fn save_time_vector(
    v: &TimeVector,
    path: &Path,
    dtype_override: Option<Dtype>,
) -> Result<WriteStats> {
    let mut ckpt = v.delta.clone();
    ckpt.metadata
        .insert(META_BASE_FINGERPRINT.to_string(), v.base.to_hex());
    ckpt.metadata
        .insert(META_PERIOD_KIND.to_string(), v.period.kind().to_string());
    ckpt.metadata.insert(
        META_PERIOD_ORDINAL.to_string(),
        v.period.ordinal().to_string(),
    );
    ckpt.metadata
        .insert(META_ROLE.to_string(), ROLE_TIME_VECTOR.to_string());
    if v.provenance.is_empty() {
        ckpt.metadata.remove(META_PROVENANCE);
    } else {
        ckpt.metadata
            .insert(META_PROVENANCE.to_string(), v.provenance.clone());
    }
    Ok(tensorio::write_checkpoint(&ckpt, path, dtype_override)?)
}

/// Read a container written by [`save_time_vector`].
pub fn load_time_vector(path: &Path) -> Result<TimeVector> {
    let ckpt = tensorio::load_checkpoint(path)?;
    match ckpt.metadata.get(META_ROLE).map(String::as_str) {
        Some(ROLE_TIME_VECTOR) => {}
        Some(other) => {
            return Err(VecAlgError::BadVectorFile(format!(
                "role is {other:?}, expected \"time_vector\""
            )))
        }
        None => {
            return Err(VecAlgError::BadVectorFile(
                "missing chronovec.role".to_string(),
            ))
        }
    }
    let base = ckpt
        .metadata
        .get(META_BASE_FINGERPRINT)
        .ok_or_else(|| VecAlgError::BadVectorFile("missing chronovec.base_fingerprint".into()))?
        .parse::<Fingerprint>()?;
    let kind = ckpt
        .metadata
        .get(META_PERIOD_KIND)
        .ok_or_else(|| VecAlgError::BadVectorFile("missing chronovec.period_kind".into()))?;
    let ordinal: i64 = ckpt
        .metadata
        .get(META_PERIOD_ORDINAL)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| VecAlgError::BadVectorFile("missing chronovec.period_ordinal".into()))?;
    let period = TimePeriod::from_kind_ordinal(kind, ordinal)?;
    let provenance = ckpt
        .metadata
        .get(META_PROVENANCE)
        .cloned()
        .unwrap_or_default();
    let mut delta = Checkpoint::new();
    for (name, tensor) in ckpt.iter() {
        delta.insert(name, tensor.clone())?;
    }
    Ok(TimeVector {
        delta,
        base,
        period,
        provenance,
    })
}

/// Stamp model-role metadata onto a checkpoint before writing it.
pub fn stamp_model_metadata(ckpt: &mut Checkpoint, period: Option<TimePeriod>) {
    ckpt.metadata
        .insert(META_ROLE.to_string(), ROLE_MODEL.to_string());
    if let Some(p) = period {
        ckpt.metadata
            .insert(META_PERIOD_KIND.to_string(), p.kind().to_string());
        ckpt.metadata
            .insert(META_PERIOD_ORDINAL.to_string(), p.ordinal().to_string());
    }
}
