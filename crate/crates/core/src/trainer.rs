//! Desk-scale training loop.
//!
//! Each step draws multi-crop views, evaluates
//! `L = L_CE + μ·L_RE + λ·L_DR` on the student, applies SGD with momentum to
//! the student and the prototype bank, then moves the teacher by EMA. The
//! teacher path never receives gradients.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    centre_crop, put_string, sample_crops, spec_mask, CropConfig, CropSet, MaskConfig, Reader,
    UnlabeledUtterance,
};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy_loss, dimension_regularization, diversity_regularization, DiversityScaling,
    LossWeights, RegularizerKind,
};
use crate::model::{
    ema_momentum_at, ema_update, prototype_distribution, ModelConfig, Network, PrototypeBank,
    TeacherStudentPair,
};
use crate::numerics::{
    axpy, normalized_covariance_with, CovarianceOptions, RealMatrix,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weights: LossWeights,
    pub regularizer_kind: RegularizerKind,
    pub diversity_scaling: DiversityScaling,
    pub covariance: CovarianceOptions,
    pub crops: CropConfig,
    /// Spectrogram-style masking of every view; `None` disables it.
    pub mask: Option<MaskConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr_peak: 0.05,
            lr_final: 1e-5,
            warmup_epochs: 5,
            momentum: 0.9,
            weights: LossWeights::default(),
            regularizer_kind: RegularizerKind::None,
            diversity_scaling: DiversityScaling::PerRow,
            covariance: CovarianceOptions::TRAINING,
            crops: CropConfig::default(),
            mask: Some(MaskConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_peak) {
            return fail(format!(
                "need 0 <= lr_final <= lr_peak, got {} and {}",
                self.lr_final, self.lr_peak
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        self.weights.validate()?;
        self.crops.validate()
    }
}

/// Linear warm-up from 0 to `lr_peak`, then cosine decay to `lr_final`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 || cfg.epochs == 0 {
        return cfg.lr_peak;
    }
    let warmup = warmup_steps(total_steps, cfg);
    if step < warmup {
        return cfg.lr_peak * step as f64 / warmup as f64;
    }
    let span = (total_steps - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    cfg.lr_final
        + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    (total_steps * cfg.warmup_epochs) / cfg.epochs.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnostics {
    /// Mean |C_ij|, i≠j, of the student global covariance.
    pub mean_abs_offdiag: f64,
    /// Mean per-dimension standard deviation of the student global outputs.
    pub embedding_std: f64,
    /// Entropy of the batch-mean teacher distribution.
    pub prototype_usage_entropy: f64,
}

pub fn diagnostics(
    student_global: &RealMatrix,
    teacher_distributions: &[Vec<f64>],
) -> Result<CollapseDiagnostics> {
    let (n, d) = student_global.shape();
    if n < 2 {
        return Err(Error::BatchTooSmall { rows: n });
    }
    let cov = normalized_covariance_with(student_global, CovarianceOptions::TRAINING)?;
    let mut std_sum = 0.0;
    for j in 0..d {
        let col = student_global.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        std_sum += var.sqrt();
    }
    let mut entropy = 0.0;
    if let Some(first) = teacher_distributions.first() {
        let mut usage = vec![0.0; first.len()];
        for p in teacher_distributions {
            axpy(1.0 / teacher_distributions.len() as f64, p, &mut usage);
        }
        entropy = usage
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum::<f64>()
            .max(0.0);
    }
    Ok(CollapseDiagnostics {
        mean_abs_offdiag: cov.mean_abs_off_diagonal(),
        embedding_std: std_sum / d as f64,
        prototype_usage_entropy: entropy,
    })
}

/// Teacher outputs for a batch; constants as far as gradients go.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    /// Per utterance, one distribution per global view.
    pub distributions: Vec<Vec<Vec<f64>>>,
    /// Raw prototype scores, one row per global view (for the center).
    pub scores: Vec<Vec<f64>>,
    /// Stacked teacher projections of every global view.
    pub global: RealMatrix,
}

pub fn teacher_targets(pair: &TeacherStudentPair, batch: &[CropSet]) -> Result<TeacherTargets> {
    let tau = pair.config.teacher_temperature;
    let mut distributions = Vec::with_capacity(batch.len());
    let mut scores = Vec::new();
    let mut rows = Vec::new();
    for crops in batch {
        let mut per_utt = Vec::with_capacity(crops.global_views.len());
        for view in &crops.global_views {
            let trace = pair.teacher.forward(view)?;
            let z = trace.projected();
            per_utt.push(prototype_distribution(z, &pair.prototypes, tau, Some(&pair.center))?);
            scores.push(pair.prototypes.scores(z));
            rows.push(z.to_vec());
        }
        distributions.push(per_utt);
    }
    Ok(TeacherTargets {
        distributions,
        scores,
        global: RealMatrix::from_rows(&rows)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub re: f64,
    pub dr: f64,
}

/// Gradients of the student objective.
#[derive(Debug, Clone)]
pub struct StudentGradients {
    pub network: Network,
    pub prototypes: RealMatrix,
}

#[derive(Debug, Clone)]
pub struct StudentObjective {
    pub terms: LossTerms,
    /// Stacked student projections of every global view.
    pub student_global: RealMatrix,
    pub gradients: Option<StudentGradients>,
}

/// Evaluates the student loss against fixed teacher targets. The batch-level
/// cross-entropy is the mean of the per-utterance sums over view pairs.
pub fn student_objective(
    pair: &TeacherStudentPair,
    batch: &[CropSet],
    targets: &TeacherTargets,
    cfg: &TrainConfig,
    with_gradients: bool,
) -> Result<StudentObjective> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall { rows: n });
    }
    let tau = pair.config.student_temperature;
    let inv_n = 1.0 / n as f64;
    let mut grads = with_gradients.then(|| StudentGradients {
        network: pair.student.zeros_like(),
        prototypes: RealMatrix::zeros(pair.prototypes.len(), pair.prototypes.dim()),
    });

    let mut ce = 0.0;
    for (crops, p_teacher) in batch.iter().zip(&targets.distributions) {
        let traces = crops
            .local_views
            .iter()
            .map(|v| pair.student.forward(v))
            .collect::<Result<Vec<_>>>()?;
        let p_student = traces
            .iter()
            .map(|t| prototype_distribution(t.projected(), &pair.prototypes, tau, None))
            .collect::<Result<Vec<_>>>()?;
        let loss = cross_entropy_loss(p_teacher, &p_student)?;
        ce += loss.value * inv_n;
        if let Some(g) = grads.as_mut() {
            for (l, trace) in traces.iter().enumerate() {
                let z = trace.projected();
                let mut grad_z = vec![0.0; z.len()];
                for (k, &gl) in loss.gradient.row(l).iter().enumerate() {
                    let scaled = gl * inv_n / tau;
                    axpy(scaled, pair.prototypes.weights.row(k), &mut grad_z);
                    axpy(scaled, z, g.prototypes.row_mut(k));
                }
                pair.student.backward(trace, &grad_z, None, &mut g.network);
            }
        }
    }

    let global_traces = batch
        .iter()
        .flat_map(|c| c.global_views.iter())
        .map(|v| pair.student.forward(v))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<&[f64]> = global_traces.iter().map(|t| t.projected()).collect();
    let student_global = RealMatrix::from_rows(&rows)?;

    let w = cfg.weights;
    let re = diversity_regularization(&student_global, cfg.diversity_scaling)?;
    let dr = dimension_regularization(
        cfg.regularizer_kind,
        &targets.global,
        &student_global,
        cfg.covariance,
    )?;
    if let Some(g) = grads.as_mut() {
        for (row, trace) in global_traces.iter().enumerate() {
            let mut grad_z = vec![0.0; student_global.cols()];
            axpy(w.mu, re.gradient.row(row), &mut grad_z);
            axpy(w.lambda, dr.student_gradient.row(row), &mut grad_z);
            pair.student.backward(trace, &grad_z, None, &mut g.network);
        }
    }
    let total = ce + w.mu * re.value + w.lambda * dr.value;
    Ok(StudentObjective {
        terms: LossTerms {
            total,
            ce,
            re: re.value,
            dr: dr.value,
        },
        student_global,
        gradients: grads,
    })
}

/// What one optimizer step saw and produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub terms: LossTerms,
    pub lr: f64,
    pub diagnostics: CollapseDiagnostics,
    pub teacher_global: RealMatrix,
    pub student_global: RealMatrix,
}

/// Per-epoch averages, one JSON line each in the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub re: f64,
    pub dr: f64,
    pub mean_abs_offdiag: f64,
    pub embedding_std: f64,
    pub prototype_usage_entropy: f64,
}

/// Mutable training state: model, optimizer velocity and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub pair: TeacherStudentPair,
    velocity: Network,
    prototype_velocity: RealMatrix,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    total_steps: usize,
}

/// Number of batches with at least two utterances.
pub fn steps_per_epoch(corpus_len: usize, batch_size: usize) -> usize {
    corpus_len / batch_size + usize::from(corpus_len % batch_size >= 2)
}

impl Trainer {
    /// Fresh model initialised from `cfg.seed`.
    pub fn new(model: ModelConfig, cfg: TrainConfig, corpus_len: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pair = TeacherStudentPair::new(model, &mut rng)?;
        Self::with_pair(pair, cfg, corpus_len)
    }

    pub fn with_pair(pair: TeacherStudentPair, cfg: TrainConfig, corpus_len: usize) -> Result<Self> {
        cfg.validate()?;
        pair.config.validate()?;
        if corpus_len < 2 {
            return Err(Error::InvalidConfig(format!(
                "corpus needs at least 2 utterances, got {corpus_len}"
            )));
        }
        let total_steps = cfg.epochs * steps_per_epoch(corpus_len, cfg.batch_size);
        Ok(Self {
            velocity: pair.student.zeros_like(),
            prototype_velocity: RealMatrix::zeros(pair.prototypes.len(), pair.prototypes.dim()),
            pair,
            cfg,
            epoch: 0,
            step: 0,
            total_steps,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// Crop batches for `epoch`; a pure function of seed and epoch.
    pub fn epoch_batches(
        &self,
        corpus: &[UnlabeledUtterance],
        epoch: usize,
    ) -> Result<Vec<Vec<CropSet>>> {
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut crops = sample_crops(&corpus[i], &self.cfg.crops, &mut rng)?;
                if let Some(mask) = &self.cfg.mask {
                    for view in crops.global_views.iter_mut().chain(crops.local_views.iter_mut()) {
                        *view = spec_mask(view, mask, &mut rng)?;
                    }
                }
                batch.push(crops);
            }
            batches.push(batch);
        }
        Ok(batches)
    }

    /// One optimizer step. A non-finite loss leaves the state untouched.
    pub fn step(&mut self, batch: &[CropSet]) -> Result<StepOutcome> {
        let targets = teacher_targets(&self.pair, batch)?;
        let objective = student_objective(&self.pair, batch, &targets, &self.cfg, true)?;
        let terms = objective.terms;
        let grads = objective.gradients.expect("gradients requested");
        let finite = terms.total.is_finite()
            && grads.prototypes.is_finite()
            && grads.network.tensors().iter().all(|(_, t)| t.is_finite());
        if !finite {
            return Err(Error::DivergedLoss {
                epoch: self.epoch,
                step: self.step,
                value: terms.total,
            });
        }
        let flat_targets: Vec<Vec<f64>> = targets.distributions.iter().flatten().cloned().collect();
        let diagnostics = diagnostics(&objective.student_global, &flat_targets)?;

        let lr = lr_at(self.step, self.total_steps, &self.cfg);
        let mom = self.cfg.momentum;
        let params = self.pair.student.tensors_mut();
        let velocity = self.velocity.tensors_mut();
        let gradients = grads.network.tensors();
        for ((p, v), (_, g)) in params.into_iter().zip(velocity).zip(gradients) {
            sgd_update(p, v, g, lr, mom);
        }
        sgd_update(
            &mut self.pair.prototypes.weights,
            &mut self.prototype_velocity,
            &grads.prototypes,
            lr,
            mom,
        );
        if lr != 0.0 {
            self.pair.prototypes.normalize_rows();
        }
        let m = ema_momentum_at(self.pair.config.ema_momentum, self.step, self.total_steps);
        ema_update(&mut self.pair, m)?;
        self.pair.update_center(&targets.scores);
        self.step += 1;
        Ok(StepOutcome {
            terms,
            lr,
            diagnostics,
            teacher_global: targets.global,
            student_global: objective.student_global,
        })
    }

    /// Collapse diagnostics over the whole corpus, one centred unmasked
    /// global crop per utterance.
    pub fn corpus_diagnostics(&self, corpus: &[UnlabeledUtterance]) -> Result<CollapseDiagnostics> {
        let len = self.cfg.crops.global_frames;
        let tau = self.pair.config.teacher_temperature;
        let mut rows = Vec::with_capacity(corpus.len());
        let mut distributions = Vec::with_capacity(corpus.len());
        for utt in corpus {
            let view = centre_crop(&utt.frames, len);
            rows.push(self.pair.student.forward(&view)?.projected().to_vec());
            let z = self.pair.teacher.forward(&view)?;
            distributions.push(prototype_distribution(
                z.projected(),
                &self.pair.prototypes,
                tau,
                Some(&self.pair.center),
            )?);
        }
        diagnostics(&RealMatrix::from_rows(&rows)?, &distributions)
    }

    pub fn run_epoch(&mut self, corpus: &[UnlabeledUtterance]) -> Result<EpochRecord> {
        let batches = self.epoch_batches(corpus, self.epoch)?;
        let mut acc = EpochRecord {
            epoch: self.epoch + 1,
            steps: 0,
            lr: 0.0,
            loss: 0.0,
            ce: 0.0,
            re: 0.0,
            dr: 0.0,
            mean_abs_offdiag: 0.0,
            embedding_std: 0.0,
            prototype_usage_entropy: 0.0,
        };
        for batch in &batches {
            let out = self.step(batch)?;
            acc.steps += 1;
            acc.lr = out.lr;
            acc.loss += out.terms.total;
            acc.ce += out.terms.ce;
            acc.re += out.terms.re;
            acc.dr += out.terms.dr;
        }
        let k = acc.steps.max(1) as f64;
        for v in [
            &mut acc.loss,
            &mut acc.ce,
            &mut acc.re,
            &mut acc.dr,
        ] {
            *v /= k;
        }
        let diag = self.corpus_diagnostics(corpus)?;
        acc.mean_abs_offdiag = diag.mean_abs_offdiag;
        acc.embedding_std = diag.embedding_std;
        acc.prototype_usage_entropy = diag.prototype_usage_entropy;
        self.epoch += 1;
        Ok(acc)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run<F>(&mut self, corpus: &[UnlabeledUtterance], mut on_epoch: F) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        let mut log = Vec::new();
        while !self.is_finished() {
            let record = self.run_epoch(corpus)?;
            on_epoch(self, &record)?;
            log.push(record);
        }
        Ok(log)
    }
}

fn sgd_update(param: &mut RealMatrix, velocity: &mut RealMatrix, grad: &RealMatrix, lr: f64, mom: f64) {
    for ((p, v), g) in param
        .as_mut_slice()
        .iter_mut()
        .zip(velocity.as_mut_slice())
        .zip(grad.as_slice())
    {
        *v = mom * *v + g;
        if lr != 0.0 {
            *p -= lr * *v;
        }
    }
}

/// Trains `pair` on `corpus` for `cfg.epochs` epochs.
pub fn train(
    corpus: &[UnlabeledUtterance],
    pair: TeacherStudentPair,
    cfg: TrainConfig,
) -> Result<(TeacherStudentPair, Vec<EpochRecord>)> {
    let mut trainer = Trainer::with_pair(pair, cfg, corpus.len())?;
    let log = trainer.run(corpus, |_, _| Ok(()))?;
    Ok((trainer.pair, log))
}

pub fn write_metrics_log(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Configuration stored inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl CheckpointConfig {
    /// First 8 bytes of the SHA-256 of the JSON encoding.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Serializes the full trainer state.
///
/// ```text
/// "SDCK" | version u16 | fingerprint u64 | config_len u32 | config JSON
///        | epoch u64 | step u64 | total_steps u64 | tensor_count u32
///        | tensor_count × ( name_len u32 | name | rows u32 | cols u32 | rows·cols f64 )
/// ```
pub fn encode_checkpoint(trainer: &Trainer) -> Vec<u8> {
    let config = CheckpointConfig {
        model: trainer.pair.config.clone(),
        train: trainer.cfg.clone(),
    };
    let json = serde_json::to_string(&config).expect("config serializes");
    let center = RealMatrix::from_vec(1, trainer.pair.center.len(), trainer.pair.center.clone())
        .expect("non-empty center");
    let mut tensors: Vec<(String, &RealMatrix)> = Vec::new();
    tensors.extend(trainer.pair.student.tensors().into_iter().map(|(n, t)| (format!("student.{n}"), t)));
    tensors.extend(trainer.pair.teacher.tensors().into_iter().map(|(n, t)| (format!("teacher.{n}"), t)));
    tensors.push(("prototypes".into(), &trainer.pair.prototypes.weights));
    tensors.push(("center".into(), &center));
    tensors.extend(trainer.velocity.tensors().into_iter().map(|(n, t)| (format!("velocity.{n}"), t)));
    tensors.push(("velocity.prototypes".into(), &trainer.prototype_velocity));

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&config.fingerprint().to_le_bytes());
    put_string(&mut buf, &json);
    for v in [trainer.epoch, trainer.step, trainer.total_steps] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_string(&mut buf, &name);
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let fingerprint = r.u64("fingerprint")?;
    let json_offset = r.offset();
    let json = r.string("config")?;
    let config: CheckpointConfig = serde_json::from_str(&json)
        .map_err(|e| Error::malformed(json_offset, format!("bad config JSON: {e}")))?;
    if config.fingerprint() != fingerprint {
        return Err(Error::malformed(6, "config fingerprint mismatch"));
    }
    let epoch = r.u64("epoch")? as usize;
    let step = r.u64("step")? as usize;
    let total_steps = r.u64("total steps")? as usize;
    let count = r.u32("tensor count")? as usize;
    let mut named = std::collections::BTreeMap::new();
    for _ in 0..count {
        let at = r.offset();
        let name = r.string("tensor name")?;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let data = r.f64s(rows * cols, "tensor data")?;
        let t = RealMatrix::from_vec(rows, cols, data)
            .map_err(|e| Error::malformed(at, format!("tensor `{name}`: {e}")))?;
        named.insert(name, t);
    }
    if !r.at_end() {
        return Err(Error::malformed(r.offset(), "trailing bytes"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let template = Network::new(&config.model, &mut rng);
    let mut take = |name: String, like: &RealMatrix| -> Result<RealMatrix> {
        let t = named
            .remove(&name)
            .ok_or_else(|| Error::malformed(r.offset(), format!("missing tensor `{name}`")))?;
        if t.shape() != like.shape() {
            return Err(Error::malformed(
                r.offset(),
                format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), like.shape()),
            ));
        }
        Ok(t)
    };
    let mut load = |prefix: &str| -> Result<Network> {
        let mut net = template.clone();
        let names: Vec<String> = template.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.into_iter().zip(net.tensors_mut()) {
            *slot = take(format!("{prefix}.{name}"), slot)?;
        }
        Ok(net)
    };
    let student = load("student")?;
    let teacher = load("teacher")?;
    let velocity = load("velocity")?;
    let proto_like = RealMatrix::zeros(config.model.num_prototypes, config.model.projection_dim);
    let prototypes = take("prototypes".into(), &proto_like)?;
    let prototype_velocity = take("velocity.prototypes".into(), &proto_like)?;
    let center = take("center".into(), &RealMatrix::zeros(1, config.model.num_prototypes))?;
    Ok(Trainer {
        pair: TeacherStudentPair {
            config: config.model,
            student,
            teacher,
            prototypes: PrototypeBank::from_matrix(prototypes),
            center: center.into_vec(),
        },
        cfg: config.train,
        velocity,
        prototype_velocity,
        epoch,
        step,
        total_steps,
    })
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_checkpoint(trainer))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Trainer> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, CorpusConfig};
    use crate::losses::{frobenius_regularization, off_diagonal_regularization};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            frame_hidden: vec![8],
            embedding_dim: 8,
            head_hidden: vec![12, 12],
            projection_dim: 5,
            num_prototypes: 7,
            ..ModelConfig::default()
        }
    }

    fn tiny_train(kind: RegularizerKind) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 6,
            warmup_epochs: 1,
            regularizer_kind: kind,
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
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus() -> Vec<UnlabeledUtterance> {
        generate_synthetic_corpus(&CorpusConfig {
            num_speakers: 4,
            utts_per_speaker: 4,
            frames_per_utt: 20,
            feature_dim: 6,
            intra_speaker_spread: 0.5,
            seed: 5,
        })
        .unwrap()
        .iter()
        .map(|u| u.without_label())
        .collect()
    }

    #[test]
    fn lr_schedule_endpoints_and_continuity() {
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            lr_peak: 0.5,
            lr_final: 1e-5,
            ..TrainConfig::default()
        };
        let total = 100;
        assert_eq!(lr_at(0, total, &cfg), 0.0);
        assert_eq!(lr_at(20, total, &cfg), 0.5);
        assert!((lr_at(total, total, &cfg) - 1e-5).abs() < 1e-12);
        assert!((lr_at(10, total, &cfg) - 0.25).abs() < 1e-15);
        // Left limit of the warm-up ramp meets the cosine start.
        let left = cfg.lr_peak * (20.0 - 1e-9) / 20.0;
        assert!((left - lr_at(20, total, &cfg)).abs() < 1e-9);
        let eps = 1e-12;
        assert!((cfg.lr_peak * (1.0 - eps) - lr_at(20, total, &cfg)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_epochs: 60,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_final: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn diagnostics_cases() {
        let same = RealMatrix::filled(4, 3, 0.7);
        let d = diagnostics(&same, &[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(d.embedding_std, 0.0);
        assert_eq!(d.prototype_usage_entropy, 0.0);
        let ortho = RealMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let d = diagnostics(&ortho, &[vec![0.5, 0.5]]).unwrap();
        assert_eq!(d.mean_abs_offdiag, 0.0);
        assert!((d.prototype_usage_entropy - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            lr_peak: 0.0,
            lr_final: 0.0,
            ..tiny_train(RegularizerKind::Frobenius)
        };
        let mut trainer = Trainer::new(tiny_model(), cfg, corpus.len()).unwrap();
        let before = trainer.pair.clone();
        trainer.run(&corpus, |_, _| Ok(())).unwrap();
        assert_eq!(trainer.pair.student, before.student);
        assert_eq!(trainer.pair.teacher, before.teacher);
        assert_eq!(trainer.pair.prototypes, before.prototypes);
    }

    #[test]
    fn student_step_never_touches_teacher_directly() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            warmup_epochs: 0,
            ..tiny_train(RegularizerKind::OffDiagonal)
        };
        let mut trainer = Trainer::new(tiny_model(), cfg, corpus.len()).unwrap();
        let batch = &trainer.epoch_batches(&corpus, 0).unwrap()[0];
        let teacher_before = trainer.pair.teacher.clone();
        let student_before = trainer.pair.student.clone();
        trainer.step(batch).unwrap();
        let m = ema_momentum_at(trainer.pair.config.ema_momentum, 0, trainer.total_steps());
        let mut expected = TeacherStudentPair {
            teacher: teacher_before,
            ..trainer.pair.clone()
        };
        ema_update(&mut expected, m).unwrap();
        assert_eq!(expected.teacher, trainer.pair.teacher);
        assert_ne!(student_before, trainer.pair.student);
        for row in trainer.pair.prototypes.weights.iter_rows() {
            assert!((crate::numerics::norm(row) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn trainer_inputs_carry_no_speaker_labels() {
        let labelled = generate_synthetic_corpus(&CorpusConfig {
            num_speakers: 3,
            utts_per_speaker: 2,
            frames_per_utt: 20,
            feature_dim: 6,
            intra_speaker_spread: 0.5,
            seed: 9,
        })
        .unwrap();
        let corpus: Vec<UnlabeledUtterance> = labelled
            .into_iter()
            .enumerate()
            .map(|(i, mut u)| {
                u.speaker_id = Some(format!("LABEL-SENTINEL-{}", i / 2));
                u.without_label()
            })
            .collect();
        let trainer = Trainer::new(tiny_model(), tiny_train(RegularizerKind::None), corpus.len()).unwrap();
        let text = serde_json::to_string(&corpus).unwrap()
            + &serde_json::to_string(&trainer.epoch_batches(&corpus, 0).unwrap()).unwrap();
        assert!(!text.contains("LABEL-SENTINEL"));
    }

    #[test]
    fn single_step_descends_cross_entropy() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            weights: LossWeights { mu: 0.0, lambda: 0.0 },
            momentum: 0.0,
            ..tiny_train(RegularizerKind::None)
        };
        let mut trainer = Trainer::new(tiny_model(), cfg, corpus.len()).unwrap();
        let batch = trainer.epoch_batches(&corpus, 0).unwrap().remove(0);
        let targets = teacher_targets(&trainer.pair, &batch).unwrap();
        let before = student_objective(&trainer.pair, &batch, &targets, &trainer.cfg, true).unwrap();
        let grads = before.gradients.unwrap();
        let lr = 1e-3;
        let mut probe = trainer.pair.clone();
        for (p, (_, g)) in probe.student.tensors_mut().into_iter().zip(grads.network.tensors()) {
            p.add_scaled(-lr, g).unwrap();
        }
        probe.prototypes.weights.add_scaled(-lr, &grads.prototypes).unwrap();
        let after = student_objective(&probe, &batch, &targets, &trainer.cfg, false).unwrap();
        assert!(after.terms.ce < before.terms.ce);
        // The trainer's own step on this batch also runs.
        trainer.step(&batch).unwrap();
    }

    #[test]
    fn logged_regularizer_matches_recomputation() {
        let corpus = tiny_corpus();
        for kind in [RegularizerKind::OffDiagonal, RegularizerKind::Frobenius] {
            let mut trainer = Trainer::new(tiny_model(), tiny_train(kind), corpus.len()).unwrap();
            let batch = trainer.epoch_batches(&corpus, 0).unwrap().remove(0);
            let out = trainer.step(&batch).unwrap();
            let opts = trainer.cfg.covariance;
            let recomputed = match kind {
                RegularizerKind::OffDiagonal => {
                    off_diagonal_regularization(&out.teacher_global, &out.student_global, opts)
                }
                _ => frobenius_regularization(&out.teacher_global, &out.student_global, opts),
            }
            .unwrap();
            assert!((recomputed.value - out.terms.dr).abs() < 1e-10);
            assert!(out.terms.total.is_finite());
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let corpus = tiny_corpus();
        let cfg = tiny_train(RegularizerKind::Frobenius);
        let mut a = Trainer::new(tiny_model(), cfg.clone(), corpus.len()).unwrap();
        let mut snapshots = Vec::new();
        a.run(&corpus, |t, _| {
            snapshots.push(encode_checkpoint(t));
            Ok(())
        })
        .unwrap();
        let mut b = Trainer::new(tiny_model(), cfg, corpus.len()).unwrap();
        let mut again = Vec::new();
        b.run(&corpus, |t, _| {
            again.push(encode_checkpoint(t));
            Ok(())
        })
        .unwrap();
        assert_eq!(snapshots, again);

        let mut resumed = decode_checkpoint(&snapshots[0]).unwrap();
        assert_eq!(resumed.epoch, 1);
        resumed.run(&corpus, |_, _| Ok(())).unwrap();
        assert_eq!(encode_checkpoint(&resumed), *snapshots.last().unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let corpus = tiny_corpus();
        let trainer = Trainer::new(tiny_model(), tiny_train(RegularizerKind::None), corpus.len()).unwrap();
        let bytes = encode_checkpoint(&trainer);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), trainer);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(Error::MalformedFile { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[7] ^= 1;
        assert!(decode_checkpoint(&flipped).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&trainer, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), trainer);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn divergence_is_reported_without_mutation() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            weights: LossWeights {
                mu: f64::MAX,
                lambda: f64::MAX,
            },
            regularizer_kind: RegularizerKind::OffDiagonal,
            ..tiny_train(RegularizerKind::OffDiagonal)
        };
        let mut trainer = Trainer::new(tiny_model(), cfg, corpus.len()).unwrap();
        let before = trainer.clone();
        let batch = trainer.epoch_batches(&corpus, 0).unwrap().remove(0);
        let err = trainer.step(&batch).unwrap_err();
        assert!(matches!(err, Error::DivergedLoss { .. }));
        assert_eq!(trainer, before);
    }
}
