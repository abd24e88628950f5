//! Registry of oracle cases: finite-difference gradient checks, exhaustive
//! threshold enumeration for the metrics, numerical algebraic identities, and
//! paired training runs.
//!
//! Every case is a pure function of its seed and reports the largest
//! deviation it observed; a case passes when that deviation stays within its
//! tolerance.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::{generate_synthetic_corpus, CorpusConfig, CropConfig, MaskConfig, UnlabeledUtterance};
use crate::error::Result;
use crate::losses::{
    cross_entropy_loss, diversity_regularization, frobenius_regularization,
    frobenius_regularization_grad_wrt_c, off_diagonal_regularization, DiversityScaling,
    LossWeights, RegularizerKind,
};
use crate::metrics::{self, brute_force, DcfParams, ScoreSet};
use crate::model::{ModelConfig, TeacherStudentPair};
use crate::numerics::{
    finite_diff_gradient, normalized_covariance, relative_error, softmax_unchecked,
    CovarianceMatrix, CovarianceOptions, RealMatrix,
};
use crate::scoring::{asnorm, snorm, tnorm, znorm, CohortStats};
use crate::trainer::{
    encode_checkpoint, student_objective, teacher_targets, TrainConfig, Trainer,
};

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Nearest-neighbour distances closer than this to the runner-up are kinks.
pub const TIE_MARGIN: f64 = 1e-3;
/// Smallest positive tolerance: only an exact match passes.
pub const EXACT: f64 = f64::MIN_POSITIVE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    FiniteDifference,
    ExhaustiveThreshold,
    AlgebraicIdentity,
    PairedRun,
}

/// Knobs shared by all cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    /// Mixed into every case seed.
    pub seed: u64,
    /// Overrides each case's default instance count.
    pub instances: Option<usize>,
    /// Inclusive batch-size range for gradient checks.
    pub rows: (usize, usize),
    /// Inclusive embedding-dimension range for gradient checks.
    pub dims: (usize, usize),
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: None,
            rows: (4, 16),
            dims: (3, 8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseOutcome {
    pub instances: usize,
    pub max_deviation: f64,
}

type Runner = fn(&mut ChaCha8Rng, usize, &SuiteOptions) -> Result<CaseOutcome>;

#[derive(Clone, Copy)]
pub struct OracleCase {
    pub name: &'static str,
    pub seed: u64,
    pub tolerance: f64,
    pub kind: OracleKind,
    pub default_instances: usize,
    runner: Runner,
}

impl std::fmt::Debug for OracleCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleCase")
            .field("name", &self.name)
            .field("seed", &self.seed)
            .field("tolerance", &self.tolerance)
            .field("kind", &self.kind)
            .finish()
    }
}

impl OracleCase {
    pub fn run(&self, opts: &SuiteOptions) -> CaseReport {
        let seed = self.seed ^ opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let instances = opts.instances.unwrap_or(self.default_instances);
        let (outcome, error) = match (self.runner)(&mut rng, instances, opts) {
            Ok(o) => (o, None),
            Err(e) => (
                CaseOutcome {
                    instances: 0,
                    max_deviation: f64::INFINITY,
                },
                Some(e.to_string()),
            ),
        };
        let passed = error.is_none() && outcome.max_deviation <= self.tolerance;
        CaseReport {
            name: self.name.to_string(),
            kind: self.kind,
            seed,
            tolerance: self.tolerance,
            instances: outcome.instances,
            max_deviation: outcome.max_deviation,
            passed,
            error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub kind: OracleKind,
    pub seed: u64,
    pub tolerance: f64,
    pub instances: usize,
    pub max_deviation: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    /// One JSON object per line.
    pub fn write_json_lines<W: Write>(&self, mut out: W) -> Result<()> {
        for c in &self.cases {
            serde_json::to_writer(&mut out, c)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn registry() -> Vec<OracleCase> {
    use OracleKind::*;
    let case = |name, seed, tolerance, kind, default_instances, runner| OracleCase {
        name,
        seed,
        tolerance,
        kind,
        default_instances,
        runner,
    };
    vec![
        case("fd_ce", 101, 1e-4, FiniteDifference, 50, fd_cross_entropy as Runner),
        case("fd_re", 102, 1e-4, FiniteDifference, 50, fd_diversity),
        case("fd_odr", 103, 1e-4, FiniteDifference, 50, fd_off_diagonal),
        case("fd_fdr", 104, 1e-4, FiniteDifference, 50, fd_frobenius),
        case("fd_fdr_grad_wrt_c", 105, 1e-6, FiniteDifference, 100, fd_frobenius_wrt_c),
        case("fd_composite_odr", 106, 1e-4, FiniteDifference, 50, fd_composite_odr),
        case("fd_composite_fdr", 107, 1e-4, FiniteDifference, 50, fd_composite_fdr),
        case("metric_min_dcf_exhaustive", 201, EXACT, ExhaustiveThreshold, 200, metric_min_dcf),
        case("metric_eer_exhaustive", 202, 1e-12, ExhaustiveThreshold, 200, metric_eer),
        case("metric_monotone_invariance", 203, 1e-12, ExhaustiveThreshold, 200, metric_monotone),
        case("identity_asnorm_full_k_is_snorm", 301, 1e-12, AlgebraicIdentity, 200, identity_asnorm_snorm),
        case("identity_norm_affine_invariance", 302, 1e-10, AlgebraicIdentity, 200, identity_affine),
        case("identity_asnorm_hand_case", 303, 1e-12, AlgebraicIdentity, 1, identity_hand_case),
        case("identity_covariance_properties", 304, 1e-12, AlgebraicIdentity, 100, identity_covariance),
        case("paired_resume_equivalence", 401, EXACT, PairedRun, 1, paired_resume),
    ]
}

/// Runs every registered case whose name contains `filter`.
pub fn run_suite(filter: Option<&str>, opts: &SuiteOptions) -> SuiteReport {
    run_cases(|c| filter.map_or(true, |f| c.name.contains(f)), opts)
}

/// Runs every registered case accepted by `select`.
pub fn run_cases(select: impl Fn(&OracleCase) -> bool, opts: &SuiteOptions) -> SuiteReport {
    let cases = registry()
        .into_iter()
        .filter(|c| select(c))
        .map(|c| c.run(opts))
        .collect();
    SuiteReport { cases }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> RealMatrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    RealMatrix::from_vec(rows, cols, data).expect("positive shape")
}

fn shape(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> (usize, usize) {
    (
        rng.gen_range(opts.rows.0..=opts.rows.1),
        rng.gen_range(opts.dims.0..=opts.dims.1),
    )
}

/// Smallest gap between each row's nearest and second-nearest neighbour.
fn neighbour_margin(batch: &RealMatrix) -> f64 {
    let n = batch.rows();
    let mut margin = f64::INFINITY;
    for u in 0..n {
        let mut d: Vec<f64> = (0..n)
            .filter(|&v| v != u)
            .map(|v| crate::numerics::euclidean_distance(batch.row(u), batch.row(v)))
            .collect();
        d.sort_by(f64::total_cmp);
        if d.len() > 1 {
            margin = margin.min(d[1] - d[0]);
        }
    }
    margin
}

fn fold(max: &mut f64, value: f64) {
    if value > *max || value.is_nan() {
        *max = value;
    }
}

fn fd_cross_entropy(rng: &mut ChaCha8Rng, instances: usize, opts: &SuiteOptions) -> Result<CaseOutcome> {
    let mut worst = 0.0;
    for _ in 0..instances {
        let (locals, k) = shape(rng, opts);
        let globals = rng.gen_range(1..=2);
        let teacher: Vec<Vec<f64>> = (0..globals)
            .map(|_| softmax_unchecked(gaussian(rng, 1, k).as_slice(), 1.0))
            .collect();
        let logits = gaussian(rng, locals, k);
        let loss = |l: &RealMatrix| -> f64 {
            let p: Vec<Vec<f64>> = l.iter_rows().map(|r| softmax_unchecked(r, 1.0)).collect();
            cross_entropy_loss(&teacher, &p).expect("valid shapes").value
        };
        let p: Vec<Vec<f64>> = logits.iter_rows().map(|r| softmax_unchecked(r, 1.0)).collect();
        let analytic = cross_entropy_loss(&teacher, &p)?.gradient;
        let numeric = finite_diff_gradient(loss, &logits, FD_STEP);
        fold(&mut worst, relative_error(&analytic, &numeric));
    }
    Ok(CaseOutcome {
        instances,
        max_deviation: worst,
    })
}

fn fd_diversity(rng: &mut ChaCha8Rng, instances: usize, opts: &SuiteOptions) -> Result<CaseOutcome> {
    let mut worst = 0.0;
    let mut done = 0;
    while done < instances {
        let (n, d) = shape(rng, opts);
        let batch = gaussian(rng, n, d);
        if neighbour_margin(&batch) < TIE_MARGIN {
            continue;
        }
        let analytic = diversity_regularization(&batch, DiversityScaling::PerRow)?.gradient;
        let numeric = finite_diff_gradient(
            |b| {
                diversity_regularization(b, DiversityScaling::PerRow)
                    .expect("valid batch")
                    .value
            },
            &batch,
            FD_STEP,
        );
        fold(&mut worst, relative_error(&analytic, &numeric));
        done += 1;
    }
    Ok(CaseOutcome {
        instances,
        max_deviation: worst,
    })
}

type PairedLoss =
    fn(&RealMatrix, &RealMatrix, CovarianceOptions) -> Result<crate::losses::PairedLossValue>;

fn fd_paired(
    rng: &mut ChaCha8Rng,
    instances: usize,
    opts: &SuiteOptions,
    loss: PairedLoss,
) -> Result<CaseOutcome> {
    let mut worst = 0.0;
    for _ in 0..instances {
        let (n, d) = shape(rng, opts);
        let teacher = gaussian(rng, n, d);
        let student = gaussian(rng, n, d);
        let value = loss(&teacher, &student, CovarianceOptions::STRICT)?;
        let fd_t = finite_diff_gradient(
            |t| loss(t, &student, CovarianceOptions::STRICT).expect("valid").value,
            &teacher,
            FD_STEP,
        );
        let fd_s = finite_diff_gradient(
            |s| loss(&teacher, s, CovarianceOptions::STRICT).expect("valid").value,
            &student,
            FD_STEP,
        );
        fold(&mut worst, relative_error(&value.teacher_gradient, &fd_t));
        fold(&mut worst, relative_error(&value.student_gradient, &fd_s));
    }
    Ok(CaseOutcome {
        instances,
        max_deviation: worst,
    })
}

fn fd_off_diagonal(rng: &mut ChaCha8Rng, instances: usize, opts: &SuiteOptions) -> Result<CaseOutcome> {
    fd_paired(rng, instances, opts, off_diagonal_regularization)
}

fn fd_frobenius(rng: &mut ChaCha8Rng, instances: usize, opts: &SuiteOptions) -> Result<CaseOutcome> {
    fd_paired(rng, instances, opts, frobenius_regularization)
}

/// Differentiates `log ‖C‖_F` entry by entry over the off-diagonal of random
/// unit-diagonal symmetric matrices; deviation is absolute.
fn fd_frobenius_wrt_c(rng: &mut ChaCha8Rng, instances: usize, opts: &SuiteOptions) -> Result<CaseOutcome> {
    let mut worst = 0.0;
    for _ in 0..instances {
        let d = rng.gen_range(opts.dims.0.max(2)..=opts.dims.1.max(2));
        let mut c = RealMatrix::identity(d);
        for i in 0..d {
            for j in i + 1..d {
                let v = rng.gen_range(-1.0..1.0);
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        let analytic = frobenius_regularization_grad_wrt_c(&CovarianceMatrix::from_matrix(c.clone())?);
        let log_norm = |m: &RealMatrix| 0.5 * m.as_slice().iter().map(|x| x * x).sum::<f64>().ln();
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    continue;
                }
                let mut probe = c.clone();
                probe[(i, j)] += FD_STEP;
                let plus = log_norm(&probe);
                probe[(i, j)] -= 2.0 * FD_STEP;
                let minus = log_norm(&probe);
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                fold(&mut worst, (analytic[(i, j)] - numeric).abs());
            }
            fold(&mut worst, analytic[(i, i)].abs());
        }
    }
    Ok(CaseOutcome {
        instances,
        max_deviation: worst,
    })
}

fn composite_setup(
    rng: &mut ChaCha8Rng,
    opts: &SuiteOptions,
    kind: RegularizerKind,
) -> Result<(TeacherStudentPair, TrainConfig, Vec<UnlabeledUtterance>)> {
    let (n, d) = shape(rng, opts);
    let model = ModelConfig {
        feature_dim: 4,
        frame_hidden: vec![5],
        embedding_dim: 4,
        head_hidden: vec![6],
        projection_dim: d,
        num_prototypes: 6,
        ..ModelConfig::default()
    };
    let mut pair = TeacherStudentPair::new(model, rng)?;
    // Decouple the branches so teacher targets are not the student's own.
    for t in pair.teacher.tensors_mut() {
        for v in t.as_mut_slice() {
            let z: f64 = StandardNormal.sample(rng);
            *v += 0.1 * z;
        }
    }
    let corpus = generate_synthetic_corpus(&CorpusConfig {
        num_speakers: n,
        utts_per_speaker: 1,
        frames_per_utt: 10,
        feature_dim: 4,
        intra_speaker_spread: 0.5,
        seed: rng.gen(),
    })?
    .iter()
    .map(|u| u.without_label())
    .collect();
    let cfg = TrainConfig {
        batch_size: n,
        regularizer_kind: kind,
        weights: LossWeights { mu: 0.1, lambda: 0.05 },
        crops: CropConfig {
            num_global: 1,
            num_local: 2,
            global_frames: 8,
            local_frames: 4,
        },
        mask: Some(MaskConfig {
            max_time_masks: 1,
            max_freq_masks: 1,
            max_width: 2,
        }),
        seed: rng.gen(),
        ..TrainConfig::default()
    };
    Ok((pair, cfg, corpus))
}

/// Perturbs every student tensor and the prototype bank against frozen
/// teacher targets.
fn fd_composite(
    rng: &mut ChaCha8Rng,
    instances: usize,
    opts: &SuiteOptions,
    kind: RegularizerKind,
) -> Result<CaseOutcome> {
    let mut worst = 0.0;
    let mut done = 0;
    while done < instances {
        let (pair, cfg, corpus) = composite_setup(rng, opts, kind)?;
        let trainer = Trainer::with_pair(pair.clone(), cfg.clone(), corpus.len())?;
        let batch = trainer.epoch_batches(&corpus, 0)?.remove(0);
        let targets = teacher_targets(&pair, &batch)?;
        let base = student_objective(&pair, &batch, &targets, &cfg, true)?;
        if neighbour_margin(&base.student_global) < TIE_MARGIN {
            continue;
        }
        let grads = base.gradients.expect("gradients requested");
        let analytic: Vec<RealMatrix> = grads
            .network
            .tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .chain(std::iter::once(grads.prototypes))
            .collect();
        let tensor_count = analytic.len();
        for (idx, expected) in analytic.iter().enumerate() {
            let objective = |m: &RealMatrix| -> f64 {
                let mut probe = pair.clone();
                if idx + 1 == tensor_count {
                    probe.prototypes.weights = m.clone();
                } else {
                    *probe.student.tensors_mut().swap_remove(idx) = m.clone();
                }
                student_objective(&probe, &batch, &targets, &cfg, false)
                    .map(|o| o.terms.total)
                    .unwrap_or(f64::NAN)
            };
            let at = if idx + 1 == tensor_count {
                pair.prototypes.weights.clone()
            } else {
                pair.student.tensors()[idx].1.clone()
            };
            let numeric = finite_diff_gradient(objective, &at, FD_STEP);
            fold(&mut worst, relative_error(expected, &numeric));
        }
        done += 1;
    }
    Ok(CaseOutcome {
        instances,
        max_deviation: worst,
    })
}

fn fd_composite_odr(rng: &mut ChaCha8Rng, instances: usize, opts: &SuiteOptions) -> Result<CaseOutcome> {
    fd_composite(rng, instances, opts, RegularizerKind::OffDiagonal)
}

fn fd_composite_fdr(rng: &mut ChaCha8Rng, instances: usize, opts: &SuiteOptions) -> Result<CaseOutcome> {
    fd_composite(rng, instances, opts, RegularizerKind::Frobenius)
}

/// Random labeled scores on a coarse grid so that ties are frequent.
fn random_score_set(rng: &mut ChaCha8Rng) -> ScoreSet {
    loop {
        let n = rng.gen_range(2..=60);
        let grid = rng.gen_range(3..40);
        let pairs = (0..n)
            .map(|_| (rng.gen_range(0..grid) as f64 / grid as f64, rng.gen_bool(0.3)))
            .collect();
        if let Ok(s) = ScoreSet::new(pairs) {
            return s;
        }
    }
}

fn metric_min_dcf(rng: &mut ChaCha8Rng, instances: usize, _: &SuiteOptions) -> Result<CaseOutcome> {
    let params = DcfParams::default();
    let mut worst = 0.0;
    for _ in 0..instances {
        let s = random_score_set(rng);
        let (fast, _) = metrics::min_dcf(&s, &params)?;
        fold(&mut worst, (fast - brute_force::min_dcf(&s, &params)).abs());
    }
    Ok(CaseOutcome {
        instances,
        max_deviation: worst,
    })
}

fn metric_eer(rng: &mut ChaCha8Rng, instances: usize, _: &SuiteOptions) -> Result<CaseOutcome> {
    let mut worst = 0.0;
    for _ in 0..instances {
        let s = random_score_set(rng);
        fold(&mut worst, (metrics::eer(&s).0 - brute_force::eer(&s)).abs());
    }
    Ok(CaseOutcome {
        instances,
        max_deviation: worst,
    })
}

fn metric_monotone(rng: &mut ChaCha8Rng, instances: usize, _: &SuiteOptions) -> Result<CaseOutcome> {
    let params = DcfParams::default();
    let mut worst = 0.0;
    for _ in 0..instances {
        let s = random_score_set(rng);
        let base = (metrics::eer(&s).0, metrics::min_dcf(&s, &params)?.0);
        for mapped in [s.map_scores(f64::exp)?, s.map_scores(|v| 2.0 * v + 3.0)?] {
            fold(&mut worst, (metrics::eer(&mapped).0 - base.0).abs());
            fold(&mut worst, (metrics::min_dcf(&mapped, &params)?.0 - base.1).abs());
        }
    }
    Ok(CaseOutcome {
        instances,
        max_deviation: worst,
    })
}

fn cohort_lists(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, f64) {
    let n = rng.gen_range(2..=50);
    let mut side = || (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (e, t) = (side(), side());
    (e, t, rng.gen_range(-1.0..1.0))
}

fn identity_asnorm_snorm(rng: &mut ChaCha8Rng, instances: usize, _: &SuiteOptions) -> Result<CaseOutcome> {
    let mut worst = 0.0;
    for _ in 0..instances {
        let (e, t, raw) = cohort_lists(rng);
        let a = asnorm(raw, &e, &t, e.len())?;
        let s = snorm(raw, &CohortStats::full(&e, false)?, &CohortStats::full(&t, false)?)?;
        fold(&mut worst, (a - s).abs());
    }
    Ok(CaseOutcome {
        instances,
        max_deviation: worst,
    })
}

/// Cases whose top-K or full cohort has σ < 0.01 are resampled: rounding of
/// `a·s + b` divided by a tiny σ would swamp the comparison.
fn identity_affine(rng: &mut ChaCha8Rng, instances: usize, _: &SuiteOptions) -> Result<CaseOutcome> {
    let mut worst = 0.0;
    let mut done = 0;
    while done < instances {
        let (e, t, raw) = cohort_lists(rng);
        let k = rng.gen_range(2..=e.len());
        let full = |v: &[f64]| CohortStats::full(v, false);
        let top = |v: &[f64]| CohortStats::top_k(v, k, false);
        if [full(&e)?, full(&t)?, top(&e)?, top(&t)?]
            .iter()
            .any(|s| s.sigma < 0.01)
        {
            continue;
        }
        let outputs = |e: &[f64], t: &[f64], raw: f64| -> Result<[f64; 4]> {
            let (se, st) = (CohortStats::full(e, false)?, CohortStats::full(t, false)?);
            Ok([
                znorm(raw, &se)?,
                tnorm(raw, &st)?,
                snorm(raw, &se, &st)?,
                asnorm(raw, e, t, k)?,
            ])
        };
        let base = outputs(&e, &t, raw)?;
        for a in [0.5, 3.0] {
            for b in [-1.0, 2.0] {
                let map = |v: &[f64]| v.iter().map(|x| a * x + b).collect::<Vec<f64>>();
                let mapped = outputs(&map(&e), &map(&t), a * raw + b)?;
                for (x, y) in base.iter().zip(&mapped) {
                    fold(&mut worst, (x - y).abs());
                }
            }
        }
        done += 1;
    }
    Ok(CaseOutcome {
        instances,
        max_deviation: worst,
    })
}

fn identity_hand_case(_: &mut ChaCha8Rng, _: usize, _: &SuiteOptions) -> Result<CaseOutcome> {
    let v = asnorm(0.8, &[0.9, 0.5, 0.1], &[0.7, 0.6, 0.2], 2)?;
    Ok(CaseOutcome {
        instances: 1,
        max_deviation: (v - 1.75).abs(),
    })
}

/// Symmetry, unit diagonal, `|C_ij| ≤ 1`, and invariance under positive
/// column rescaling.
fn identity_covariance(rng: &mut ChaCha8Rng, instances: usize, opts: &SuiteOptions) -> Result<CaseOutcome> {
    let mut worst = 0.0;
    for _ in 0..instances {
        let (n, d) = shape(rng, opts);
        let batch = gaussian(rng, n, d);
        let c = normalized_covariance(&batch)?;
        let mut scaled = batch.clone();
        let factors: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.gen_range(-2.0..2.0))).collect();
        for r in 0..n {
            for (j, f) in factors.iter().enumerate() {
                scaled[(r, j)] *= f;
            }
        }
        let cs = normalized_covariance(&scaled)?;
        for i in 0..d {
            fold(&mut worst, (c.get(i, i) - 1.0).abs());
            for j in 0..d {
                fold(&mut worst, (c.get(i, j) - c.get(j, i)).abs());
                fold(&mut worst, (c.get(i, j).abs() - 1.0).max(0.0));
                fold(&mut worst, (c.get(i, j) - cs.get(i, j)).abs());
            }
        }
    }
    Ok(CaseOutcome {
        instances,
        max_deviation: worst,
    })
}

/// Trains a tiny model straight through and again with a checkpoint
/// round trip after the first epoch; deviation is the number of differing
/// checkpoint bytes.
fn paired_resume(rng: &mut ChaCha8Rng, _: usize, _: &SuiteOptions) -> Result<CaseOutcome> {
    let corpus: Vec<UnlabeledUtterance> = generate_synthetic_corpus(&CorpusConfig {
        num_speakers: 4,
        utts_per_speaker: 3,
        frames_per_utt: 20,
        feature_dim: 4,
        intra_speaker_spread: 0.5,
        seed: rng.gen(),
    })?
    .iter()
    .map(|u| u.without_label())
    .collect();
    let model = ModelConfig {
        feature_dim: 4,
        frame_hidden: vec![6],
        embedding_dim: 6,
        head_hidden: vec![8],
        projection_dim: 4,
        num_prototypes: 5,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        warmup_epochs: 1,
        regularizer_kind: RegularizerKind::Frobenius,
        crops: CropConfig {
            num_global: 1,
            num_local: 2,
            global_frames: 12,
            local_frames: 6,
        },
        mask: Some(MaskConfig {
            max_time_masks: 1,
            max_freq_masks: 1,
            max_width: 2,
        }),
        seed: rng.gen(),
        ..TrainConfig::default()
    };
    let mut straight = Trainer::new(model.clone(), cfg.clone(), corpus.len())?;
    straight.run(&corpus, |_, _| Ok(()))?;
    let mut first = Trainer::new(model, cfg, corpus.len())?;
    first.run_epoch(&corpus)?;
    let mut resumed = crate::trainer::decode_checkpoint(&encode_checkpoint(&first))?;
    resumed.run(&corpus, |_, _| Ok(()))?;
    let (a, b) = (encode_checkpoint(&straight), encode_checkpoint(&resumed));
    let differing = a.len().abs_diff(b.len()) + a.iter().zip(&b).filter(|(x, y)| x != y).count();
    Ok(CaseOutcome {
        instances: 1,
        max_deviation: differing as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SuiteOptions {
        SuiteOptions {
            instances: Some(3),
            ..SuiteOptions::default()
        }
    }

    #[test]
    fn names_are_unique_and_tolerances_positive() {
        let cases = registry();
        let mut names: Vec<_> = cases.iter().map(|c| c.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), cases.len());
        assert!(cases.iter().all(|c| c.tolerance > 0.0));
    }

    #[test]
    fn filter_selects_by_substring() {
        let report = run_suite(Some("fd_fdr"), &quick());
        let names: Vec<_> = report.cases.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["fd_fdr", "fd_fdr_grad_wrt_c"]);
    }

    #[test]
    fn quick_suite_passes_and_is_deterministic() {
        let a = run_suite(None, &quick());
        for c in &a.cases {
            assert!(c.passed, "{c:?}");
        }
        let b = run_suite(None, &quick());
        assert_eq!(a, b);
    }

    #[test]
    fn report_is_json_lines() {
        let report = run_suite(Some("identity_asnorm_hand"), &SuiteOptions::default());
        let mut buf = Vec::new();
        report.write_json_lines(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["kind"], "algebraic_identity");
        assert_eq!(v["passed"], true);
    }

    #[test]
    fn failing_case_is_reported_not_raised() {
        let mut case = registry().into_iter().find(|c| c.name == "identity_asnorm_hand_case").unwrap();
        case.runner = |_, _, _| {
            Ok(CaseOutcome {
                instances: 1,
                max_deviation: 1.0,
            })
        };
        let r = case.run(&SuiteOptions::default());
        assert!(!r.passed);
    }
}
