//! Continual-learning strategies and the per-task training loop: plain
//! fine-tuning, density-map LwF, feature distillation, EWC, MAS, and
//! density-map distillation with or without cross-task adaptors.

use incount_tensor::{Adam, AdamConfig, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Sample, TaskDataset};
use crate::error::CoreError;
use crate::loss::{bin_points, dmcount_loss_on_graph, LossWeights};
use crate::network::{
    adapt_chain, extract_features, Adaptor, CounterHead, FeatureExtractor, ModelState,
};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Ft,
    Lwf,
    Fd,
    Ewc,
    Mas,
    DmdNoAdapt,
    Dmd,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Ft,
        MethodKind::Lwf,
        MethodKind::Fd,
        MethodKind::Ewc,
        MethodKind::Mas,
        MethodKind::DmdNoAdapt,
        MethodKind::Dmd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Ft => "ft",
            MethodKind::Lwf => "lwf",
            MethodKind::Fd => "fd",
            MethodKind::Ewc => "ewc",
            MethodKind::Mas => "mas",
            MethodKind::DmdNoAdapt => "dmd_no_adapt",
            MethodKind::Dmd => "dmd",
        }
    }

    pub fn uses_adaptors(self) -> bool {
        self == MethodKind::Dmd
    }

    pub fn is_weight_regularized(self) -> bool {
        matches!(self, MethodKind::Ewc | MethodKind::Mas)
    }
}

/// Method choice plus its hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MethodConfig {
    pub kind: MethodKind,
    /// Regularizer weight in `L = L_train + lambda * L_reg`.
    pub lambda: f64,
    /// Multiplier applied to the stored EWC/MAS importances before a new
    /// task's importances are added (1.0 keeps plain accumulation).
    pub importance_damping: f64,
}

impl MethodConfig {
    pub fn new(kind: MethodKind, lambda: f64) -> Self {
        MethodConfig {
            kind,
            lambda,
            importance_damping: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        // desk-scale learning rate; the from-scratch trunk cannot move at
        // the paper's 1e-5 within 50 epochs
        OptimizerConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn to_adam(self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub crop: usize,
    pub flip_prob: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 50,
            batch_size: 10,
            optimizer: OptimizerConfig::default(),
            seed: 1,
            crop: 48,
            flip_prob: 0.5,
        }
    }
}

impl TrainSchedule {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub counting: f64,
    pub ot: f64,
    pub tv: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TaskLog {
    pub steps: Vec<StepRecord>,
    /// Samples whose OT/TV terms were skipped for lack of mass.
    pub degenerate_samples: usize,
}

/// Deterministic per-task RNG stream.
pub fn task_rng(seed: u64, task: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(task as u64))
}

fn zero_scalar() -> Tensor<f64> {
    Tensor::scalar(0.0)
}

fn stack_batch(samples: &[Sample]) -> Result<Tensor<f64>> {
    let (h, w) = (samples[0].image.height, samples[0].image.width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if s.image.height != h || s.image.width != w {
            return Err(CoreError::Shape(
                "batch samples must share one image size".into(),
            ));
        }
        data.extend_from_slice(&s.image.pixels);
    }
    Ok(Tensor::from_vec(vec![samples.len(), 3, h, w], data, false)?)
}

/// Feature-distillation penalty, summed over the batch:
/// sum_b ||f_t(x_b) - f_{t-1}(x_b)||_2^2.
pub fn reg_fd(
    graph: &Graph<f64>,
    current: &FeatureExtractor,
    previous: &FeatureExtractor,
    x: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let new_feats = extract_features(graph, current, x)?;
    let old_feats = extract_features(graph, previous, x)?;
    Ok(graph.sq_l2_norm(&graph.sub(&new_feats, &old_feats)?)?)
}

/// Density-map distillation without adaptors, summed over the batch:
/// sum_b sum_{tau<t} ||h^tau(f_t(x_b)) - h^tau(f_{t-1}(x_b))||_2^2.
///
/// `new_feats` are the current trunk's features (shared with the task
/// loss); gradients flow only into the trunk, the frozen heads pass them
/// through.
pub fn reg_dmd_no_adapt(
    graph: &Graph<f64>,
    state: &ModelState,
    new_feats: &Tensor<f64>,
    x: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let t = state.heads.len();
    if t < 2 {
        return Ok(zero_scalar());
    }
    let previous = state
        .prev_extractor
        .as_ref()
        .expect("tasks completed implies a stored extractor");
    let old_feats = extract_features(graph, previous, x)?;
    let mut total = zero_scalar();
    for tau in 1..t {
        let head = &state.heads[tau - 1];
        let new_map = head.forward(graph, new_feats)?;
        let old_map = head.forward(graph, &old_feats)?;
        let term = graph.sq_l2_norm(&graph.sub(&new_map, &old_map)?)?;
        total = graph.add(&total, &term)?;
    }
    Ok(total)
}

/// Density-map distillation with cross-task adaptors, summed over batch:
/// the new branch runs h^tau . phi_tau ... phi_{t-1} . f_t, the frozen
/// target branch h^tau . phi_tau ... phi_{t-2} . f_{t-1}. Only the newest
/// adaptor and the trunk receive gradients.
pub fn reg_dmd(
    graph: &Graph<f64>,
    state: &ModelState,
    new_feats: &Tensor<f64>,
    x: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let t = state.heads.len();
    if t < 2 {
        return Ok(zero_scalar());
    }
    let previous = state
        .prev_extractor
        .as_ref()
        .expect("tasks completed implies a stored extractor");
    let old_feats = extract_features(graph, previous, x)?;
    let mut total = zero_scalar();
    for tau in 1..t {
        // adaptors phi_tau .. phi_{t-1} live at indices tau-1 .. t-2
        let new_chain: Vec<&Adaptor> = state.adaptors[tau - 1..t - 1].iter().collect();
        let old_chain: Vec<&Adaptor> = state.adaptors[tau - 1..t.saturating_sub(2)].iter().collect();
        let head = &state.heads[tau - 1];
        let new_map = head.forward(graph, &adapt_chain(graph, new_feats, &new_chain)?)?;
        let old_map = head.forward(graph, &adapt_chain(graph, &old_feats, &old_chain)?)?;
        let term = graph.sq_l2_norm(&graph.sub(&new_map, &old_map)?)?;
        total = graph.add(&total, &term)?;
    }
    Ok(total)
}

/// LwF on density maps, summed over the batch: the trainable copies
/// `h_t^tau` follow the frozen targets `h_{t-1}^tau . f_{t-1}`.
pub fn reg_lwf(
    graph: &Graph<f64>,
    state: &ModelState,
    targets: &[CounterHead],
    new_feats: &Tensor<f64>,
    x: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let t = state.heads.len();
    if t < 2 {
        return Ok(zero_scalar());
    }
    debug_assert_eq!(state.aux.lwf_heads.len(), t - 1);
    debug_assert_eq!(targets.len(), t - 1);
    let previous = state
        .prev_extractor
        .as_ref()
        .expect("tasks completed implies a stored extractor");
    let old_feats = extract_features(graph, previous, x)?;
    let mut total = zero_scalar();
    for tau in 1..t {
        let new_map = state.aux.lwf_heads[tau - 1].forward(graph, new_feats)?;
        let old_map = targets[tau - 1].forward(graph, &old_feats)?;
        let term = graph.sq_l2_norm(&graph.sub(&new_map, &old_map)?)?;
        total = graph.add(&total, &term)?;
    }
    Ok(total)
}

/// Weight-regularization penalty `0.5 * sum_i Omega_i (theta_i - theta*_i)^2`
/// over the trunk parameters.
pub fn reg_weight(graph: &Graph<f64>, state: &ModelState) -> Result<Tensor<f64>> {
    let (omega, anchor) = match (&state.aux.importance, &state.aux.anchor) {
        (Some(o), Some(a)) => (o, a),
        _ => return Err(CoreError::MissingImportance),
    };
    let params = state.extractor.params();
    let mut total = zero_scalar();
    for ((p, om), an) in params.iter().zip(omega).zip(anchor) {
        let anchor_t = Tensor::from_vec(p.shape(), an.clone(), false)?;
        let omega_t = Tensor::from_vec(p.shape(), om.clone(), false)?;
        let diff = graph.sub(p, &anchor_t)?;
        let sq = graph.mul(&diff, &diff)?;
        let weighted = graph.mul(&omega_t, &sq)?;
        total = graph.add(&total, &graph.sum(&weighted)?)?;
    }
    Ok(graph.scale(&total, 0.5)?)
}

/// What the per-parameter importance measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportanceMode {
    /// EWC: mean squared gradient of the training loss (diagonal Fisher).
    SquaredGrad,
    /// MAS: mean absolute gradient of the squared output norm.
    AbsGrad,
}

/// Mean per-parameter importance over `n_samples` forwards of `loss_of`.
///
/// `loss_of(graph, sample_index)` must rebuild the scalar objective; the
/// gradients land in `params` and are consumed here.
pub fn accumulate_importance<F>(
    params: &[Tensor<f64>],
    n_samples: usize,
    mode: ImportanceMode,
    mut loss_of: F,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&Graph<f64>, usize) -> Result<Tensor<f64>>,
{
    if n_samples == 0 {
        return Err(CoreError::EmptyDataset { task: 0 });
    }
    let mut acc: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    for i in 0..n_samples {
        for p in params {
            p.zero_grad();
        }
        let graph = Graph::new();
        let loss = loss_of(&graph, i)?;
        graph.backward(&loss)?;
        for (p, a) in params.iter().zip(acc.iter_mut()) {
            if let Some(g) = p.grad() {
                match mode {
                    ImportanceMode::SquaredGrad => {
                        for (ai, gi) in a.iter_mut().zip(&g) {
                            *ai += gi * gi;
                        }
                    }
                    ImportanceMode::AbsGrad => {
                        for (ai, gi) in a.iter_mut().zip(&g) {
                            *ai += gi.abs();
                        }
                    }
                }
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    let inv = 1.0 / n_samples as f64;
    for a in acc.iter_mut() {
        for v in a.iter_mut() {
            *v *= inv;
        }
    }
    Ok(acc)
}

fn merge_importance(
    state: &mut ModelState,
    fresh: Vec<Vec<f64>>,
    damping: f64,
) {
    let anchors: Vec<Vec<f64>> = state.extractor.params().iter().map(|p| p.to_vec()).collect();
    match state.aux.importance.as_mut() {
        Some(existing) => {
            for (e, f) in existing.iter_mut().zip(fresh) {
                for (ev, fv) in e.iter_mut().zip(f) {
                    *ev = *ev * damping + fv;
                }
            }
        }
        None => state.aux.importance = Some(fresh),
    }
    state.aux.anchor = Some(anchors);
}

/// EWC: importance is the mean squared gradient of the task loss over the
/// (un-augmented) training samples; anchors are the post-task parameters.
pub fn accumulate_ewc(
    state: &mut ModelState,
    dataset: &TaskDataset,
    loss_cfg: &LossWeights,
    damping: f64,
) -> Result<()> {
    if dataset.train.is_empty() {
        return Err(CoreError::EmptyDataset {
            task: state.heads.len(),
        });
    }
    let params = state.extractor.params();
    let head = state.heads.last().expect("task trained");
    let stride = state.total_stride();
    let fresh = accumulate_importance(&params, dataset.train.len(), ImportanceMode::SquaredGrad, |graph, i| {
        let sample = &dataset.train[i];
        let x = stack_batch(std::slice::from_ref(sample))?;
        let feats = extract_features(graph, &state.extractor, &x)?;
        let dhat = head.forward(graph, &feats)?;
        let gt = bin_points(
            &sample.points,
            sample.image.width,
            sample.image.height,
            stride,
        )?;
        let (loss, _) = dmcount_loss_on_graph(graph, &dhat, &gt, loss_cfg.lambda1, loss_cfg.lambda2, &loss_cfg.ot)?;
        Ok(loss)
    })?;
    merge_importance(state, fresh, damping);
    Ok(())
}

/// MAS: importance is the mean absolute gradient of `||d_hat(x)||_2^2`.
pub fn accumulate_mas(
    state: &mut ModelState,
    dataset: &TaskDataset,
    damping: f64,
) -> Result<()> {
    if dataset.train.is_empty() {
        return Err(CoreError::EmptyDataset {
            task: state.heads.len(),
        });
    }
    let params = state.extractor.params();
    let head = state.heads.last().expect("task trained");
    let fresh = accumulate_importance(&params, dataset.train.len(), ImportanceMode::AbsGrad, |graph, i| {
        let sample = &dataset.train[i];
        let x = stack_batch(std::slice::from_ref(sample))?;
        let feats = extract_features(graph, &state.extractor, &x)?;
        let dhat = head.forward(graph, &feats)?;
        Ok(graph.sq_l2_norm(&dhat)?)
    })?;
    merge_importance(state, fresh, damping);
    Ok(())
}

/// Train task `t` (1-based): creates the task head (and, for DMD, an
/// identity adaptor), runs the epochs, then freezes the head, accumulates
/// EWC/MAS importances when applicable, and snapshots the trunk.
pub fn train_task(
    state: &mut ModelState,
    t: usize,
    dataset: &TaskDataset,
    method: &MethodConfig,
    schedule: &TrainSchedule,
    loss_cfg: &LossWeights,
) -> Result<TaskLog> {
    schedule.validate()?;
    if method.kind != state.method {
        return Err(CoreError::InvalidConfig(format!(
            "method {} does not match the model state's {}",
            method.kind.name(),
            state.method.name()
        )));
    }
    if t != state.completed_tasks + 1 {
        return Err(CoreError::TaskOrder {
            expected: state.completed_tasks + 1,
            got: t,
        });
    }
    if dataset.train.is_empty() {
        return Err(CoreError::EmptyDataset { task: t });
    }

    let mut rng = task_rng(schedule.seed, t);
    let d = state.extractor.out_channels();
    let head_cfg = state.network.resolve()?.head;
    state.heads.push(CounterHead::new(d, &head_cfg, &mut rng));
    state.task_registry.push(dataset.class_name.clone());

    if method.kind.uses_adaptors() && t >= 2 {
        state.adaptors.push(Adaptor::identity(d));
    }

    // LwF: extend the trainable copies and snapshot this task's targets.
    let lwf_targets: Vec<CounterHead> = if method.kind == MethodKind::Lwf && t >= 2 {
        state
            .aux
            .lwf_heads
            .push(state.heads[t - 2].trainable_copy());
        state.aux.lwf_heads.iter().map(|h| h.frozen_copy()).collect()
    } else {
        Vec::new()
    };

    let mut decayed: Vec<Tensor<f64>> = state.extractor.params();
    decayed.extend(state.heads[t - 1].params());
    if method.kind == MethodKind::Lwf {
        for h in &state.aux.lwf_heads {
            decayed.extend(h.params());
        }
    }
    let mut opt = Adam::new(decayed, schedule.optimizer.to_adam());
    // weight decay would erode the identity initialization of an adaptor
    // that currently sees no distillation gradient, so adaptors train
    // decay-free
    let mut adaptor_opt = if method.kind.uses_adaptors() && t >= 2 {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..schedule.optimizer.to_adam()
        };
        Some(Adam::new(state.adaptors.last().unwrap().params(), cfg))
    } else {
        None
    };

    let stride = state.total_stride();
    let mut log = TaskLog::default();
    let n = dataset.train.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=schedule.epochs {
        shuffle(&mut order, &mut rng);
        let mut step = 0;
        for chunk in order.chunks(schedule.batch_size) {
            step += 1;
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                batch.push(augment(
                    &dataset.train[idx],
                    schedule.crop.min(dataset.train[idx].image.width).min(dataset.train[idx].image.height),
                    schedule.flip_prob,
                    &mut rng,
                )?);
            }
            let graph = Graph::new();
            let x = stack_batch(&batch)?;
            let feats = extract_features(&graph, &state.extractor, &x)?;
            let dhat_all = state.heads[t - 1].forward(&graph, &feats)?;

            let mut train_total: Option<Tensor<f64>> = None;
            let (mut counting, mut ot, mut tv) = (0.0, 0.0, 0.0);
            for (i, sample) in batch.iter().enumerate() {
                let dhat = graph.batch_select(&dhat_all, i)?;
                let gt = bin_points(
                    &sample.points,
                    sample.image.width,
                    sample.image.height,
                    stride,
                )?;
                let (loss_i, bd) = dmcount_loss_on_graph(
                    &graph,
                    &dhat,
                    &gt,
                    loss_cfg.lambda1,
                    loss_cfg.lambda2,
                    &loss_cfg.ot,
                )?;
                if bd.degenerate {
                    log.degenerate_samples += 1;
                }
                counting += bd.counting;
                ot += bd.ot;
                tv += bd.tv;
                train_total = Some(match train_total {
                    Some(acc) => graph.add(&acc, &loss_i)?,
                    None => loss_i,
                });
            }
            let inv_b = 1.0 / batch.len() as f64;
            let train_mean = graph.scale(&train_total.expect("nonempty batch"), inv_b)?;

            let reg_sum = if t >= 2 {
                match method.kind {
                    MethodKind::Ft => zero_scalar(),
                    MethodKind::Fd => {
                        let prev = state.prev_extractor.as_ref().expect("snapshot exists");
                        reg_fd(&graph, &state.extractor, prev, &x)?
                    }
                    MethodKind::DmdNoAdapt => reg_dmd_no_adapt(&graph, state, &feats, &x)?,
                    MethodKind::Dmd => reg_dmd(&graph, state, &feats, &x)?,
                    MethodKind::Lwf => reg_lwf(&graph, state, &lwf_targets, &feats, &x)?,
                    MethodKind::Ewc | MethodKind::Mas => reg_weight(&graph, state)?,
                }
            } else {
                zero_scalar()
            };
            let reg_mean = if method.kind.is_weight_regularized() {
                // parameter penalty has no per-sample structure
                reg_sum
            } else {
                graph.scale(&reg_sum, inv_b)?
            };
            let reg_value = reg_mean.item()?;
            let total = graph.add(&train_mean, &graph.scale(&reg_mean, method.lambda)?)?;
            let total_value = total.item()?;
            graph.backward(&total)?;
            opt.step()?;
            opt.zero_grads();
            if let Some(aopt) = adaptor_opt.as_mut() {
                aopt.step()?;
                aopt.zero_grads();
            }

            log.steps.push(StepRecord {
                task: t,
                epoch,
                step,
                counting: counting * inv_b,
                ot: ot * inv_b,
                tv: tv * inv_b,
                reg: reg_value,
                total: total_value,
            });
        }
    }

    state.freeze_head(t)?;
    if let Some(adaptor) = state.adaptors.last_mut() {
        adaptor.freeze();
    }
    match method.kind {
        MethodKind::Ewc => accumulate_ewc(state, dataset, loss_cfg, method.importance_damping)?,
        MethodKind::Mas => accumulate_mas(state, dataset, method.importance_damping)?,
        _ => {}
    }
    state.snapshot_extractor();
    state.completed_tasks = t;
    Ok(log)
}

/// Fisher-Yates over the index order, driven by the task RNG.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
