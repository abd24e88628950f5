//! Toy teacher–student network: a frame-level encoder with mean/std temporal
//! pooling, a projection head ending in L2 normalization, and a prototype bank
//! shared by both branches.
//!
//! Gradients are hand-derived; [`Network::backward`] consumes the trace left
//! by [`Network::forward`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm, softmax, RealMatrix};

/// Added to the pooled variance before the square root.
const STD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub frame_hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub head_hidden: Vec<usize>,
    pub projection_dim: usize,
    pub num_prototypes: usize,
    pub student_temperature: f64,
    pub teacher_temperature: f64,
    /// EMA rate of the teacher logit center.
    pub center_momentum: f64,
    /// Teacher EMA momentum at step 0; it rises to 1 on a cosine schedule.
    pub ema_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 24,
            frame_hidden: vec![64],
            embedding_dim: 64,
            head_hidden: vec![128, 128],
            projection_dim: 32,
            num_prototypes: 64,
            student_temperature: 0.1,
            teacher_temperature: 0.04,
            center_momentum: 0.9,
            ema_momentum: 0.996,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_dim,
            self.embedding_dim,
            self.projection_dim,
            self.num_prototypes,
        ];
        if dims.contains(&0)
            || self.frame_hidden.contains(&0)
            || self.head_hidden.contains(&0)
            || self.frame_hidden.is_empty()
        {
            return Err(Error::InvalidConfig(
                "model dimensions must be positive and at least one frame layer is required".into(),
            ));
        }
        for t in [self.student_temperature, self.teacher_temperature] {
            if !(t > 0.0) {
                return Err(Error::NonPositiveTemperature(t));
            }
        }
        for (name, m) in [
            ("center_momentum", self.center_momentum),
            ("ema_momentum", self.ema_momentum),
        ] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {m}")));
            }
        }
        Ok(())
    }
}

/// Fully connected layer, `y = W x + b` with `W` stored out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: RealMatrix,
    pub bias: RealMatrix,
}

impl Dense {
    fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weight: RealMatrix::from_vec(outputs, inputs, data).expect("non-empty layer"),
            bias: RealMatrix::zeros(1, outputs),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: RealMatrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: RealMatrix::zeros(1, self.bias.cols()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .iter_rows()
            .zip(self.bias.as_slice())
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }

    /// Accumulates parameter gradients and returns `∂L/∂x`.
    fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Dense) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.inputs()];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, x, grads.weight.row_mut(o));
            grads.bias.as_mut_slice()[o] += g;
            axpy(g, self.weight.row(o), &mut grad_in);
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// tanh layers applied to every frame.
    pub frame_layers: Vec<Dense>,
    /// Linear map from pooled `[mean, std]` statistics to the embedding.
    pub embedding: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// tanh hidden layers followed by one linear output layer.
    pub layers: Vec<Dense>,
}

/// One branch (teacher or student): backbone plus projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: EncoderParams,
    pub head: ProjectionParams,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    /// Input frames followed by each frame layer's output.
    frame_acts: Vec<RealMatrix>,
    mean: Vec<f64>,
    /// `√(var + ε)` per pooled dimension.
    root_var: Vec<f64>,
    pooled: Vec<f64>,
    /// Inputs of each head layer; the first is the embedding.
    head_inputs: Vec<Vec<f64>>,
    out_norm: f64,
    projected: Vec<f64>,
}

impl EmbedTrace {
    pub fn embedding(&self) -> &[f64] {
        &self.head_inputs[0]
    }

    pub fn projected(&self) -> &[f64] {
        &self.projected
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }
}

impl Network {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut frame_layers = Vec::new();
        let mut width = cfg.feature_dim;
        for &h in &cfg.frame_hidden {
            frame_layers.push(Dense::init(width, h, rng));
            width = h;
        }
        let embedding = Dense::init(2 * width, cfg.embedding_dim, rng);
        let mut layers = Vec::new();
        let mut width = cfg.embedding_dim;
        for &h in &cfg.head_hidden {
            layers.push(Dense::init(width, h, rng));
            width = h;
        }
        layers.push(Dense::init(width, cfg.projection_dim, rng));
        Self {
            encoder: EncoderParams {
                frame_layers,
                embedding,
            },
            head: ProjectionParams { layers },
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: EncoderParams {
                frame_layers: self.encoder.frame_layers.iter().map(Dense::zeros_like).collect(),
                embedding: self.encoder.embedding.zeros_like(),
            },
            head: ProjectionParams {
                layers: self.head.layers.iter().map(Dense::zeros_like).collect(),
            },
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.frame_layers[0].inputs()
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.embedding.outputs()
    }

    pub fn projection_dim(&self) -> usize {
        self.head.layers.last().map(Dense::outputs).unwrap_or(0)
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Dense)> {
        let frames = self.encoder.frame_layers.iter().enumerate();
        frames
            .map(|(i, l)| (format!("encoder.frame.{i}"), l))
            .chain(std::iter::once(("encoder.embedding".to_string(), &self.encoder.embedding)))
            .chain(
                self.head
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (format!("head.{i}"), l)),
            )
    }

    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &RealMatrix)> {
        self.layers()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), &l.weight),
                    (format!("{name}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    /// Mutable tensors in the order of [`Network::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut RealMatrix> {
        let mut out = Vec::new();
        for l in self
            .encoder
            .frame_layers
            .iter_mut()
            .chain(std::iter::once(&mut self.encoder.embedding))
            .chain(self.head.layers.iter_mut())
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    /// Runs frames (T×F) through the backbone and head.
    pub fn forward(&self, frames: &RealMatrix) -> Result<EmbedTrace> {
        if frames.cols() != self.feature_dim() {
            return Err(Error::shape(format!(
                "frames have {} features, encoder expects {}",
                frames.cols(),
                self.feature_dim()
            )));
        }
        let t = frames.rows();
        let mut frame_acts = vec![frames.clone()];
        for layer in &self.encoder.frame_layers {
            let mut h = frame_acts
                .last()
                .expect("input present")
                .matmul_transposed(&layer.weight)?;
            for row in 0..t {
                for (x, b) in h.row_mut(row).iter_mut().zip(layer.bias.as_slice()) {
                    *x = (*x + b).tanh();
                }
            }
            frame_acts.push(h);
        }
        let h = frame_acts.last().expect("input present");
        let width = h.cols();
        let mut mean = vec![0.0; width];
        for row in h.iter_rows() {
            axpy(1.0, row, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; width];
        for row in h.iter_rows() {
            for j in 0..width {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        let root_var: Vec<f64> = var.iter().map(|v| (v / t as f64 + STD_EPS).sqrt()).collect();
        let mut pooled = mean.clone();
        pooled.extend(root_var.iter().map(|r| r - STD_EPS.sqrt()));

        let embedding = self.encoder.embedding.apply(&pooled);
        let mut head_inputs = vec![embedding];
        let n_head = self.head.layers.len();
        let mut out = Vec::new();
        for (i, layer) in self.head.layers.iter().enumerate() {
            let mut y = layer.apply(head_inputs.last().expect("embedding present"));
            if i + 1 < n_head {
                y.iter_mut().for_each(|v| *v = v.tanh());
                head_inputs.push(y);
            } else {
                out = y;
            }
        }
        let out_norm = norm(&out);
        if !(out_norm > 0.0) || !out_norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        let projected = out.iter().map(|v| v / out_norm).collect();
        Ok(EmbedTrace {
            frame_acts,
            mean,
            root_var,
            pooled,
            head_inputs,
            out_norm,
            projected,
        })
    }

    /// Backpropagates `∂L/∂projected` (and optionally `∂L/∂embedding`) into
    /// `grads`, which must have this network's shape.
    pub fn backward(
        &self,
        trace: &EmbedTrace,
        grad_projected: &[f64],
        grad_embedding: Option<&[f64]>,
        grads: &mut Network,
    ) {
        let z = &trace.projected;
        let zg = dot(z, grad_projected);
        let mut grad: Vec<f64> = grad_projected
            .iter()
            .zip(z)
            .map(|(g, zi)| (g - zi * zg) / trace.out_norm)
            .collect();
        for i in (0..self.head.layers.len()).rev() {
            let input = &trace.head_inputs[i];
            grad = self.head.layers[i].backward(input, &grad, &mut grads.head.layers[i]);
            if i > 0 {
                for (g, a) in grad.iter_mut().zip(input) {
                    *g *= 1.0 - a * a;
                }
            }
        }
        if let Some(extra) = grad_embedding {
            axpy(1.0, extra, &mut grad);
        }
        let grad_pooled =
            self.encoder
                .embedding
                .backward(&trace.pooled, &grad, &mut grads.encoder.embedding);

        let h = trace.frame_acts.last().expect("input present");
        let (t, width) = h.shape();
        let inv_t = 1.0 / t as f64;
        let mut grad_h = RealMatrix::zeros(t, width);
        for row in 0..t {
            let out = grad_h.row_mut(row);
            for j in 0..width {
                let centered = h[(row, j)] - trace.mean[j];
                out[j] = grad_pooled[j] * inv_t
                    + grad_pooled[width + j] * centered * inv_t / trace.root_var[j];
            }
        }
        for li in (0..self.encoder.frame_layers.len()).rev() {
            let layer = &self.encoder.frame_layers[li];
            let act = &trace.frame_acts[li + 1];
            let input = &trace.frame_acts[li];
            let g = &mut grads.encoder.frame_layers[li];
            let mut grad_in = RealMatrix::zeros(t, layer.inputs());
            for row in 0..t {
                let pre: Vec<f64> = grad_h
                    .row(row)
                    .iter()
                    .zip(act.row(row))
                    .map(|(gh, a)| gh * (1.0 - a * a))
                    .collect();
                let dx = layer.backward(input.row(row), &pre, g);
                grad_in.row_mut(row).copy_from_slice(&dx);
            }
            grad_h = grad_in;
        }
    }
}

/// Backbone embedding and unit-norm projection for one utterance or crop.
pub fn forward_embed(net: &Network, frames: &RealMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let trace = net.forward(frames)?;
    Ok((trace.embedding().to_vec(), trace.projected))
}

/// K learnable prototype vectors, rows kept at unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub weights: RealMatrix,
}

impl PrototypeBank {
    pub fn new<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Self {
        let data = (0..count * dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let mut bank = Self {
            weights: RealMatrix::from_vec(count, dim, data).expect("non-empty bank"),
        };
        bank.normalize_rows();
        bank
    }

    pub fn from_matrix(weights: RealMatrix) -> Self {
        Self { weights }
    }

    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Dot product of `projected` with every prototype.
    pub fn scores(&self, projected: &[f64]) -> Vec<f64> {
        self.weights.iter_rows().map(|c| dot(c, projected)).collect()
    }

    pub fn normalize_rows(&mut self) {
        for i in 0..self.weights.rows() {
            let row = self.weights.row_mut(i);
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }
}

/// `softmax((projected · C_k − center_k) / τ)` over the prototypes.
pub fn prototype_distribution(
    projected: &[f64],
    bank: &PrototypeBank,
    temperature: f64,
    center: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if projected.len() != bank.dim() {
        return Err(Error::shape(format!(
            "projection has dimension {}, prototypes {}",
            projected.len(),
            bank.dim()
        )));
    }
    let mut scores = bank.scores(projected);
    if let Some(c) = center {
        if c.len() != scores.len() {
            return Err(Error::shape("center length differs from prototype count"));
        }
        axpy(-1.0, c, &mut scores);
    }
    softmax(&scores, temperature)
}

/// Marks teacher-side values that must not receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Detached<T>(T);

impl<T> Detached<T> {
    pub fn new(value: T) -> Self {
        Self(value)
    }

    pub fn get(&self) -> &T {
        &self.0
    }

    pub fn into_inner(self) -> T {
        self.0
    }
}

/// Student and teacher branches sharing one prototype bank.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudentPair {
    pub config: ModelConfig,
    pub student: Network,
    pub teacher: Network,
    pub prototypes: PrototypeBank,
    /// Running center subtracted from teacher prototype scores.
    pub center: Vec<f64>,
}

impl TeacherStudentPair {
    /// Random student; the teacher starts as an exact copy.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let student = Network::new(&config, rng);
        let prototypes = PrototypeBank::new(config.num_prototypes, config.projection_dim, rng);
        Ok(Self {
            teacher: student.clone(),
            student,
            prototypes,
            center: vec![0.0; config.num_prototypes],
            config,
        })
    }

    /// Blends the teacher center toward the batch mean of teacher scores.
    pub fn update_center(&mut self, teacher_scores: &[Vec<f64>]) {
        if teacher_scores.is_empty() {
            return;
        }
        let m = self.config.center_momentum;
        let inv = 1.0 / teacher_scores.len() as f64;
        for (k, c) in self.center.iter_mut().enumerate() {
            let mean: f64 = teacher_scores.iter().map(|s| s[k]).sum::<f64>() * inv;
            *c = m * *c + (1.0 - m) * mean;
        }
    }
}

/// `teacher ← m·teacher + (1−m)·student` for every parameter.
pub fn ema_update(pair: &mut TeacherStudentPair, momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidConfig(format!(
            "EMA momentum must lie in [0, 1), got {momentum}"
        )));
    }
    let student = pair.student.tensors();
    for (t, (_, s)) in pair.teacher.tensors_mut().into_iter().zip(student) {
        for (tv, sv) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}

/// Teacher EMA momentum rising from `base` to 1 along a half cosine.
pub fn ema_momentum_at(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    1.0 - (1.0 - base) * ((std::f64::consts::PI * progress).cos() + 1.0) / 2.0
}

/// Outputs of one utterance's multi-view pass.
#[derive(Debug, Clone)]
pub struct MultiViewOutput {
    /// Teacher distributions over the global views.
    pub p_teacher: Detached<Vec<Vec<f64>>>,
    /// Raw teacher prototype scores, used for the center update.
    pub teacher_scores: Detached<Vec<Vec<f64>>>,
    /// Teacher projections of the global views.
    pub teacher_global: Detached<Vec<Vec<f64>>>,
    /// Student distributions over the local views.
    pub p_student: Vec<Vec<f64>>,
    pub student_local: Vec<EmbedTrace>,
    /// Student traces of the global views, feeding the covariance path.
    pub student_global: Vec<EmbedTrace>,
}

/// Teacher sees global views; student sees local views for the prototype
/// loss and global views for the covariance path.
pub fn multi_view_forward(
    pair: &TeacherStudentPair,
    global_views: &[RealMatrix],
    local_views: &[RealMatrix],
) -> Result<MultiViewOutput> {
    if global_views.is_empty() || local_views.is_empty() {
        return Err(Error::shape("need at least one global and one local view"));
    }
    let cfg = &pair.config;
    let mut p_teacher = Vec::with_capacity(global_views.len());
    let mut teacher_scores = Vec::with_capacity(global_views.len());
    let mut teacher_global = Vec::with_capacity(global_views.len());
    for view in global_views {
        let (_, z) = forward_embed(&pair.teacher, view)?;
        let scores = pair.prototypes.scores(&z);
        p_teacher.push(prototype_distribution(
            &z,
            &pair.prototypes,
            cfg.teacher_temperature,
            Some(&pair.center),
        )?);
        teacher_scores.push(scores);
        teacher_global.push(z);
    }
    let mut p_student = Vec::with_capacity(local_views.len());
    let mut student_local = Vec::with_capacity(local_views.len());
    for view in local_views {
        let trace = pair.student.forward(view)?;
        p_student.push(prototype_distribution(
            trace.projected(),
            &pair.prototypes,
            cfg.student_temperature,
            None,
        )?);
        student_local.push(trace);
    }
    let student_global = global_views
        .iter()
        .map(|v| pair.student.forward(v))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiViewOutput {
        p_teacher: Detached::new(p_teacher),
        teacher_scores: Detached::new(teacher_scores),
        teacher_global: Detached::new(teacher_global),
        p_student,
        student_local,
        student_global,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use super::*;
    use crate::losses::cross_entropy_loss;
    use crate::numerics::{finite_diff_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            frame_hidden: vec![4, 5],
            embedding_dim: 4,
            head_hidden: vec![6, 5],
            projection_dim: 3,
            num_prototypes: 5,
            ..ModelConfig::default()
        }
    }

    fn random_frames(rng: &mut ChaCha8Rng, t: usize, f: usize) -> RealMatrix {
        let data = (0..t * f).map(|_| StandardNormal.sample(rng)).collect();
        RealMatrix::from_vec(t, f, data).unwrap()
    }

    #[test]
    fn zero_input_with_zero_biases_pools_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::new(&ModelConfig::default(), &mut rng);
        // The head output is zero too, so normalization must refuse it.
        let err = net.forward(&RealMatrix::zeros(7, 24)).unwrap_err();
        assert!(matches!(err, Error::ZeroVector));

        let mut net = Network::new(&small_config(), &mut rng);
        net.head.layers.last_mut().unwrap().bias = RealMatrix::filled(1, 3, 0.5);
        let trace = net.forward(&RealMatrix::zeros(4, 3)).unwrap();
        assert!(trace.pooled().iter().all(|&p| p == 0.0));
        assert!(trace.embedding().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn repeating_frames_keeps_mean_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(&small_config(), &mut rng);
        let x = random_frames(&mut rng, 6, 3);
        let mut doubled: Vec<Vec<f64>> = x.iter_rows().map(<[f64]>::to_vec).collect();
        doubled.extend(x.iter_rows().map(<[f64]>::to_vec));
        let a = net.forward(&x).unwrap();
        let b = net.forward(&RealMatrix::from_rows(&doubled).unwrap()).unwrap();
        let width = a.pooled().len() / 2;
        for j in 0..width {
            assert!((a.pooled()[j] - b.pooled()[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::new(&ModelConfig::default(), &mut rng);
        for t in [1, 3, 50] {
            let x = random_frames(&mut rng, t, 24);
            let (_, z) = forward_embed(&net, &x).unwrap();
            assert!((norm(&z) - 1.0).abs() < 1e-9);
        }
        assert!(matches!(
            net.forward(&RealMatrix::zeros(3, 5)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::new(&small_config(), &mut rng);
        let x = random_frames(&mut rng, 5, 3);
        let w_proj = [0.3, -1.1, 0.7];
        let w_emb = [0.2, 0.5, -0.4, 0.9];
        let objective = |n: &Network| {
            let tr = n.forward(&x).unwrap();
            dot(tr.projected(), &w_proj) + dot(tr.embedding(), &w_emb)
        };
        let trace = net.forward(&x).unwrap();
        let mut grads = net.zeros_like();
        net.backward(&trace, &w_proj, Some(&w_emb), &mut grads);
        let names: Vec<String> = net.tensors().into_iter().map(|(n, _)| n).collect();
        for (idx, name) in names.iter().enumerate() {
            let at = net.tensors()[idx].1.clone();
            let numeric = finite_diff_gradient(
                |p| {
                    let mut probe = net.clone();
                    *probe.tensors_mut()[idx] = p.clone();
                    objective(&probe)
                },
                &at,
                1e-5,
            );
            let analytic = grads.tensors()[idx].1;
            let err = relative_error(analytic, &numeric);
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn prototype_distribution_cases() {
        let bank = PrototypeBank::from_matrix(RealMatrix::identity(3));
        let p = prototype_distribution(&[0.0, 1.0, 0.0], &bank, 0.01, None).unwrap();
        assert!(p[1] > 0.99);

        let same = PrototypeBank::from_matrix(RealMatrix::filled(4, 2, 0.5f64.sqrt()));
        let p = prototype_distribution(&[0.6, 0.8], &same, 0.1, None).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));

        let bank = PrototypeBank::from_matrix(RealMatrix::identity(2));
        let p = prototype_distribution(&[1.0, 0.0], &bank, 1.0, None).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-15);

        let centered = prototype_distribution(&[1.0, 0.0], &bank, 1.0, Some(&[1.0, 0.0])).unwrap();
        assert!((centered[0] - 0.5).abs() < 1e-15);
        assert!(prototype_distribution(&[1.0, 0.0], &bank, 0.0, None).is_err());
    }

    #[test]
    fn ema_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pair = TeacherStudentPair::new(small_config(), &mut rng).unwrap();
        pair.student = Network::new(&small_config(), &mut rng);
        let before = pair.clone();

        let mut zero = pair.clone();
        ema_update(&mut zero, 0.0).unwrap();
        assert_eq!(zero.teacher, zero.student);

        let mut slow = pair.clone();
        ema_update(&mut slow, 0.999).unwrap();
        for ((_, t1), ((_, t0), (_, s))) in slow
            .teacher
            .tensors()
            .into_iter()
            .zip(before.teacher.tensors().into_iter().zip(before.student.tensors()))
        {
            for ((a, b), c) in t1.as_slice().iter().zip(t0.as_slice()).zip(s.as_slice()) {
                assert!((a - (b + 0.001 * (c - b))).abs() < 1e-15);
                assert!(*a >= b.min(*c) - 1e-15 && *a <= b.max(*c) + 1e-15);
            }
        }

        let m = 0.8;
        let mut twice = pair.clone();
        ema_update(&mut twice, m).unwrap();
        ema_update(&mut twice, m).unwrap();
        for ((_, t2), ((_, t0), (_, s))) in twice
            .teacher
            .tensors()
            .into_iter()
            .zip(before.teacher.tensors().into_iter().zip(before.student.tensors()))
        {
            for ((a, b), c) in t2.as_slice().iter().zip(t0.as_slice()).zip(s.as_slice()) {
                assert!(((a - c) - m * m * (b - c)).abs() < 1e-14);
            }
        }
        assert!(ema_update(&mut pair, 1.0).is_err());
    }

    #[test]
    fn momentum_schedule_endpoints() {
        assert_eq!(ema_momentum_at(0.996, 0, 100), 0.996);
        assert!((ema_momentum_at(0.996, 100, 100) - 1.0).abs() < 1e-15);
        assert!((ema_momentum_at(0.996, 50, 100) - 0.998).abs() < 1e-12);
    }

    #[test]
    fn identical_branches_give_teacher_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig {
            teacher_temperature: 0.1,
            student_temperature: 0.1,
            ..small_config()
        };
        let pair = TeacherStudentPair::new(cfg, &mut rng).unwrap();
        let view = random_frames(&mut rng, 6, 3);
        let out = multi_view_forward(&pair, &[view.clone()], &[view]).unwrap();
        assert_eq!(out.p_teacher.get()[0], out.p_student[0]);
        let ce = cross_entropy_loss(out.p_teacher.get(), &out.p_student).unwrap();
        let entropy: f64 = out.p_teacher.get()[0].iter().map(|p| -p * p.ln()).sum();
        assert!((ce.value - entropy).abs() < 1e-12);
    }

    #[test]
    fn one_global_four_locals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pair = TeacherStudentPair::new(small_config(), &mut rng).unwrap();
        let g = random_frames(&mut rng, 8, 3);
        let locals: Vec<RealMatrix> = (0..4).map(|_| random_frames(&mut rng, 4, 3)).collect();
        let out = multi_view_forward(&pair, &[g], &locals).unwrap();
        assert_eq!(out.p_teacher.get().len(), 1);
        assert_eq!(out.p_student.len(), 4);
        let ce = cross_entropy_loss(out.p_teacher.get(), &out.p_student).unwrap();
        let parts: f64 = out
            .p_student
            .iter()
            .map(|s| cross_entropy_loss(out.p_teacher.get(), &[s.clone()]).unwrap().value)
            .sum();
        assert!((ce.value - parts).abs() < 1e-12);
        assert_eq!(out.student_global.len(), 1);
        assert_eq!(out.teacher_global.get()[0].len(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn projection_stays_unit_norm(seed in any::<u64>(), t in 1usize..30, scale in 0.01..100.0f64) {
            let cfg = small_config();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Network::new(&cfg, &mut rng);
            let data = (0..t * cfg.feature_dim).map(|i| scale * ((i as f64 * 0.37 + seed as f64 % 7.0).sin())).collect();
            let frames = RealMatrix::from_vec(t, cfg.feature_dim, data).unwrap();
            let (_, z) = forward_embed(&net, &frames).unwrap();
            prop_assert!((crate::numerics::norm(&z) - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn ema_is_a_convex_combination(seed in any::<u64>(), m in 0.0..0.9999f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pair = TeacherStudentPair::new(small_config(), &mut rng).unwrap();
            pair.student = Network::new(&small_config(), &mut rng);
            let before = pair.clone();
            ema_update(&mut pair, m).unwrap();
            for ((_, t1), ((_, t0), (_, s))) in pair
                .teacher
                .tensors()
                .into_iter()
                .zip(before.teacher.tensors().into_iter().zip(before.student.tensors()))
            {
                for ((a, b), c) in t1.as_slice().iter().zip(t0.as_slice()).zip(s.as_slice()) {
                    prop_assert!(*a >= b.min(*c) - 1e-15 && *a <= b.max(*c) + 1e-15);
                }
            }
        }
    }
}
