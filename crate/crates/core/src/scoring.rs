//! Cosine scoring against enrollment/test embeddings and cohort-based score
//! normalization (Z-, T-, S- and adaptive S-norm).
//!
//! Embedding store layout (little-endian):
//!
//! ```text
//! "SDEM" | version u16 | count u32
//!        | count × ( id_len u32 | id utf-8 | dim u32 | dim × f64 )
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{put_string, Reader};
use crate::error::{Error, Result};
use crate::metrics::ScoreSet;
use crate::numerics::{dot, norm};

pub const STORE_MAGIC: &[u8; 4] = b"SDEM";
pub const STORE_VERSION: u16 = 1;
/// Cohort standard deviations at or below this are rejected.
pub const EPS_SIGMA: f64 = 1e-9;
/// Top-K used when none is configured, capped by the cohort size.
pub const DEFAULT_TOP_K: usize = 300;

pub fn cosine_score(e: &[f64], t: &[f64]) -> Result<f64> {
    if e.len() != t.len() {
        return Err(Error::shape(format!(
            "cosine of {}-dim and {}-dim vectors",
            e.len(),
            t.len()
        )));
    }
    let (ne, nt) = (norm(e), norm(t));
    if ne == 0.0 || nt == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(e, t) / (ne * nt)).clamp(-1.0, 1.0))
}

/// Embeddings keyed by utterance id, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces an embedding.
    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let id = id.into();
        if let Some(dim) = self.dim() {
            if vector.len() != dim {
                return Err(Error::shape(format!(
                    "embedding `{id}` has dimension {}, store holds {dim}",
                    vector.len()
                )));
            }
        }
        if vector.is_empty() || !(norm(&vector) > 0.0) || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::ZeroVector);
        }
        match self.index.get(&id) {
            Some(&i) => self.vectors[i] = vector,
            None => {
                self.index.insert(id.clone(), self.ids.len());
                self.ids.push(id);
                self.vectors.push(vector);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.index
            .get(id)
            .map(|&i| self.vectors[i].as_slice())
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.vectors.first().map(Vec::len)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.vectors.iter().map(Vec::as_slice))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STORE_MAGIC);
        buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (id, v) in self.iter() {
            put_string(&mut buf, id);
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(STORE_MAGIC, STORE_VERSION)?;
        let count = r.u32("record count")?;
        let mut store = Self::new();
        for _ in 0..count {
            let at = r.offset();
            let id = r.string("embedding id")?;
            let dim = r.u32("embedding dimension")? as usize;
            let v = r.f64s(dim, "embedding values")?;
            if store.contains(&id) {
                return Err(Error::malformed(at, format!("duplicate id `{id}`")));
            }
            store
                .insert(id, v)
                .map_err(|e| Error::malformed(at, e.to_string()))?;
        }
        if !r.at_end() {
            return Err(Error::malformed(r.offset(), "trailing bytes"));
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Unknown,
}

impl TrialLabel {
    fn symbol(self) -> &'static str {
        match self {
            TrialLabel::Target => "1",
            TrialLabel::Nontarget => "0",
            TrialLabel::Unknown => "-",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: TrialLabel,
}

/// Trials in `label enroll_id test_id` form, label one of `1`, `0`, `-`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Every utterance id referenced by some trial.
    pub fn ids(&self) -> HashSet<&str> {
        self.trials
            .iter()
            .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len() as u64;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [label, enroll, test] = fields[..] else {
                return Err(Error::malformed(at, format!("expected 3 fields, got {}", fields.len())));
            };
            let label = match label {
                "1" => TrialLabel::Target,
                "0" => TrialLabel::Nontarget,
                "-" => TrialLabel::Unknown,
                other => return Err(Error::malformed(at, format!("bad trial label `{other}`"))),
            };
            trials.push(Trial {
                enroll: enroll.to_string(),
                test: test.to_string(),
                label,
            });
        }
        Ok(Self { trials })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.trials
            .iter()
            .map(|t| format!("{} {} {}\n", t.label.symbol(), t.enroll, t.test))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// What to do with cohort utterances that also occur in the trial list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapPolicy {
    #[default]
    Reject,
    WarnAndDrop,
}

/// Impostor cohort with unit-normalized embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    ids: Vec<String>,
    unit: Vec<Vec<f64>>,
}

impl Cohort {
    pub fn new(members: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "cohort needs at least 2 members, got {}",
                members.len()
            )));
        }
        let dim = members[0].1.len();
        let mut ids = Vec::with_capacity(members.len());
        let mut unit = Vec::with_capacity(members.len());
        for (id, v) in members {
            if v.len() != dim {
                return Err(Error::shape(format!("cohort member `{id}` has dimension {}", v.len())));
            }
            let n = norm(&v);
            if !(n > 0.0) {
                return Err(Error::ZeroVector);
            }
            unit.push(v.iter().map(|x| x / n).collect());
            ids.push(id);
        }
        Ok(Self { ids, unit })
    }

    /// Looks `ids` up in `store`, excluding anything referenced by `trials`.
    /// Returns the cohort and the ids dropped under [`OverlapPolicy::WarnAndDrop`].
    pub fn from_store(
        store: &EmbeddingStore,
        ids: &[String],
        trials: &TrialList,
        policy: OverlapPolicy,
    ) -> Result<(Self, Vec<String>)> {
        let used = trials.ids();
        let mut dropped = Vec::new();
        let mut members = Vec::with_capacity(ids.len());
        for id in ids {
            if used.contains(id.as_str()) {
                match policy {
                    OverlapPolicy::Reject => {
                        return Err(Error::InvalidConfig(format!(
                            "cohort utterance `{id}` also appears in the trial list"
                        )))
                    }
                    OverlapPolicy::WarnAndDrop => {
                        dropped.push(id.clone());
                        continue;
                    }
                }
            }
            members.push((id.clone(), store.get(id)?.to_vec()));
        }
        Ok((Self::new(members)?, dropped))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.unit[0].len()
    }
}

/// Cosine scores of `x` against every cohort member, in cohort order.
pub fn cohort_scores(x: &[f64], cohort: &Cohort) -> Result<Vec<f64>> {
    if x.len() != cohort.dim() {
        return Err(Error::shape(format!(
            "{}-dim embedding against {}-dim cohort",
            x.len(),
            cohort.dim()
        )));
    }
    let n = norm(x);
    if !(n > 0.0) {
        return Err(Error::ZeroVector);
    }
    Ok(cohort
        .unit
        .iter()
        .map(|c| (dot(x, c) / n).clamp(-1.0, 1.0))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub mu: f64,
    pub sigma: f64,
    pub k_used: usize,
}

impl CohortStats {
    /// Mean and standard deviation of all scores.
    pub fn full(scores: &[f64], sample_stddev: bool) -> Result<Self> {
        Self::top_k(scores, scores.len(), sample_stddev)
    }

    /// Mean and standard deviation of the `k` largest scores. Ties are
    /// broken by position, so the selection is deterministic.
    pub fn top_k(scores: &[f64], k: usize, sample_stddev: bool) -> Result<Self> {
        if k > scores.len() {
            return Err(Error::KTooLarge { k, n: scores.len() });
        }
        if k < 2 {
            return Err(Error::InvalidConfig(format!("top-k must be at least 2, got {k}")));
        }
        let selected: Vec<f64> = if k == scores.len() {
            scores.to_vec()
        } else {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            order[..k].iter().map(|&i| scores[i]).collect()
        };
        let mu = selected.iter().sum::<f64>() / k as f64;
        let ss: f64 = selected.iter().map(|s| (s - mu) * (s - mu)).sum();
        let dof = if sample_stddev { k - 1 } else { k };
        Ok(Self {
            mu,
            sigma: (ss / dof as f64).sqrt(),
            k_used: k,
        })
    }

    fn standardize(&self, raw: f64) -> Result<f64> {
        if !(self.sigma > EPS_SIGMA) {
            return Err(Error::DegenerateCohort { sigma: self.sigma });
        }
        Ok((raw - self.mu) / self.sigma)
    }
}

pub fn znorm(raw: f64, stats_e: &CohortStats) -> Result<f64> {
    stats_e.standardize(raw)
}

pub fn tnorm(raw: f64, stats_t: &CohortStats) -> Result<f64> {
    stats_t.standardize(raw)
}

pub fn snorm(raw: f64, stats_e: &CohortStats, stats_t: &CohortStats) -> Result<f64> {
    Ok(0.5 * (znorm(raw, stats_e)? + tnorm(raw, stats_t)?))
}

/// Adaptive S-norm with population standard deviations over the top-K
/// cohort scores of each side.
pub fn asnorm(raw: f64, e_scores: &[f64], t_scores: &[f64], top_k: usize) -> Result<f64> {
    asnorm_with(raw, e_scores, t_scores, top_k, false)
}

pub fn asnorm_with(
    raw: f64,
    e_scores: &[f64],
    t_scores: &[f64],
    top_k: usize,
    sample_stddev: bool,
) -> Result<f64> {
    let se = CohortStats::top_k(e_scores, top_k, sample_stddev)?;
    let st = CohortStats::top_k(t_scores, top_k, sample_stddev)?;
    snorm(raw, &se, &st)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMethod {
    #[default]
    Cosine,
    Z,
    T,
    S,
    As,
}

impl NormMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMethod::Cosine => "cosine",
            NormMethod::Z => "z",
            NormMethod::T => "t",
            NormMethod::S => "s",
            NormMethod::As => "as",
        }
    }

    fn needs_enroll_stats(self) -> bool {
        matches!(self, NormMethod::Z | NormMethod::S | NormMethod::As)
    }

    fn needs_test_stats(self) -> bool {
        matches!(self, NormMethod::T | NormMethod::S | NormMethod::As)
    }
}

impl fmt::Display for NormMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "cosine" | "raw" | "none" => NormMethod::Cosine,
            "z" | "znorm" | "z-norm" => NormMethod::Z,
            "t" | "tnorm" | "t-norm" => NormMethod::T,
            "s" | "snorm" | "s-norm" => NormMethod::S,
            "as" | "asnorm" | "as-norm" => NormMethod::As,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown scoring method `{other}` (expected cosine, z, t, s or as)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormConfig {
    pub method: NormMethod,
    /// Cohort size used by AS-norm; `None` means `min(300, N)`.
    pub top_k: Option<usize>,
    pub sample_stddev: bool,
}

impl NormConfig {
    /// Number of cohort scores each statistic is computed from.
    pub fn effective_k(&self, cohort_len: usize) -> Result<usize> {
        match self.method {
            NormMethod::As => {
                let k = self.top_k.unwrap_or(DEFAULT_TOP_K.min(cohort_len));
                if k > cohort_len {
                    return Err(Error::KTooLarge { k, n: cohort_len });
                }
                Ok(k)
            }
            _ => Ok(cohort_len),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub label: TrialLabel,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedScores {
    pub method: NormMethod,
    pub trials: Vec<ScoredTrial>,
    /// Utterances whose cohort statistics were computed.
    pub stats_computed: usize,
    /// Lookups served from the statistics cache.
    pub cache_hits: usize,
}

impl NormalizedScores {
    /// Normalized scores paired with labels; fails on unknown labels.
    pub fn score_set(&self) -> Result<ScoreSet> {
        let mut pairs = Vec::with_capacity(self.trials.len());
        for t in &self.trials {
            let target = match t.label {
                TrialLabel::Target => true,
                TrialLabel::Nontarget => false,
                TrialLabel::Unknown => {
                    return Err(Error::InvalidConfig(format!(
                        "trial {} {} has no label",
                        t.enroll, t.test
                    )))
                }
            };
            pairs.push((t.normalized, target));
        }
        ScoreSet::new(pairs)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# enroll\ttest\traw\t{}\n", self.method);
        for t in &self.trials {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\n",
                t.enroll, t.test, t.raw, t.normalized
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// One line of a scores file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub enroll: String,
    pub test: String,
    pub raw: f64,
    pub normalized: f64,
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreLine>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [enroll, test, raw, normalized] = fields[..] else {
            return Err(Error::malformed(at, format!("expected 4 tab-separated fields, got {}", fields.len())));
        };
        let number = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::malformed(at, format!("bad score `{s}`")))
        };
        out.push(ScoreLine {
            enroll: enroll.to_string(),
            test: test.to_string(),
            raw: number(raw)?,
            normalized: number(normalized)?,
        });
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    parse_scores(&fs::read_to_string(path)?)
}

/// Joins score lines with trial labels by `(enroll, test)` and returns the
/// normalized column as a labeled score set.
pub fn label_scores(lines: &[ScoreLine], trials: &TrialList) -> Result<ScoreSet> {
    let mut labels = HashMap::with_capacity(trials.len());
    for t in &trials.trials {
        labels.insert((t.enroll.as_str(), t.test.as_str()), t.label);
    }
    let mut pairs = Vec::with_capacity(lines.len());
    for l in lines {
        let key = (l.enroll.as_str(), l.test.as_str());
        let target = match labels.get(&key) {
            Some(TrialLabel::Target) => true,
            Some(TrialLabel::Nontarget) => false,
            Some(TrialLabel::Unknown) => {
                return Err(Error::InvalidConfig(format!(
                    "trial {} {} has no label",
                    l.enroll, l.test
                )))
            }
            None => {
                return Err(Error::InvalidConfig(format!(
                    "scored pair {} {} is not in the trial list",
                    l.enroll, l.test
                )))
            }
        };
        pairs.push((l.normalized, target));
    }
    ScoreSet::new(pairs)
}

/// Scores every trial and applies `cfg.method`.
///
/// Cohort statistics are computed once per distinct utterance before the
/// trials are scored in parallel; output order follows `trials`. `threads`
/// of `None` uses rayon's global pool.
pub fn normalize_trials(
    trials: &TrialList,
    store: &EmbeddingStore,
    cohort: Option<&Cohort>,
    cfg: &NormConfig,
    threads: Option<usize>,
) -> Result<NormalizedScores> {
    for t in &trials.trials {
        store.get(&t.enroll)?;
        store.get(&t.test)?;
    }
    let method = cfg.method;
    let mut stats: HashMap<&str, CohortStats> = HashMap::new();
    let mut lookups = 0usize;
    let mut order: Vec<&str> = Vec::new();
    if method != NormMethod::Cosine {
        let cohort = cohort.ok_or_else(|| {
            Error::InvalidConfig(format!("method `{method}` requires a cohort"))
        })?;
        let k = cfg.effective_k(cohort.len())?;
        let mut seen = HashSet::new();
        for t in &trials.trials {
            let sides = [
                (method.needs_enroll_stats(), t.enroll.as_str()),
                (method.needs_test_stats(), t.test.as_str()),
            ];
            for (needed, id) in sides {
                if needed {
                    lookups += 1;
                    if seen.insert(id) {
                        order.push(id);
                    }
                }
            }
        }
        let computed = order
            .iter()
            .map(|&id| {
                let scores = cohort_scores(store.get(id)?, cohort)?;
                Ok((id, CohortStats::top_k(&scores, k, cfg.sample_stddev)?))
            })
            .collect::<Result<Vec<_>>>()?;
        stats.extend(computed);
    }

    let score_one = |t: &Trial| -> Result<ScoredTrial> {
        let raw = cosine_score(store.get(&t.enroll)?, store.get(&t.test)?)?;
        let normalized = match method {
            NormMethod::Cosine => raw,
            NormMethod::Z => znorm(raw, &stats[t.enroll.as_str()])?,
            NormMethod::T => tnorm(raw, &stats[t.test.as_str()])?,
            NormMethod::S | NormMethod::As => {
                snorm(raw, &stats[t.enroll.as_str()], &stats[t.test.as_str()])?
            }
        };
        Ok(ScoredTrial {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
            label: t.label,
            raw,
            normalized,
        })
    };
    let run = || {
        trials
            .trials
            .par_iter()
            .map(score_one)
            .collect::<Result<Vec<_>>>()
    };
    let scored = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    Ok(NormalizedScores {
        method,
        trials: scored,
        stats_computed: order.len(),
        cache_hits: lookups - order.len(),
    })
}
