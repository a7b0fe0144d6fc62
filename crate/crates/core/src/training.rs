//! Joint training of both branches with per-branch cross-entropy plus a
//! symmetric-KL consistency term, optimized by Adam with step decay.

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureDataset;
use crate::dynamic_branch::DynamicForward;
use crate::error::{Error, Result};
use crate::exemplars::ExemplarBank;
use crate::model::{ModelHyper, ModelParams};
use crate::numeric::{log_sum_exp, softmax_backward, softmax_unchecked, Rng, Tensor};
use crate::par::Exec;
use crate::static_branch::{BankProjection, StaticForward};

/// Probabilities are clamped here before taking logs in the KL terms.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub cls_dynamic: f64,
    pub cls_static: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, other: &LossParts) {
        self.cls_dynamic += other.cls_dynamic;
        self.cls_static += other.cls_static;
        self.consistency += other.consistency;
        self.total += other.total;
    }

    fn scaled(mut self, alpha: f64) -> Self {
        self.cls_dynamic *= alpha;
        self.cls_static *= alpha;
        self.consistency *= alpha;
        self.total *= alpha;
        self
    }
}

/// Index of the single 1 in a one-hot vector.
pub fn one_hot_index(y: &[f64]) -> Result<usize> {
    let ones: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1.0).collect();
    if ones.len() != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!("target {y:?} is not one-hot")));
    }
    Ok(ones[0])
}

/// Cross-entropy of both branches plus `λ·(KL(p_d‖p_s) + KL(p_s‖p_d))`.
pub fn loss(dynamic_logits: &[f64], static_logits: &[f64], y: &[f64], lambda: f64) -> Result<LossParts> {
    if dynamic_logits.len() != y.len() || static_logits.len() != y.len() {
        return Err(Error::Dimension("logits and target lengths differ".into()));
    }
    if dynamic_logits.iter().chain(static_logits).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let target = one_hot_index(y)?;
    Ok(loss_and_grad(dynamic_logits, static_logits, target, lambda).0)
}

/// Loss parts and gradients with respect to both logit vectors.
pub fn loss_and_grad(
    dynamic_logits: &[f64],
    static_logits: &[f64],
    target: usize,
    lambda: f64,
) -> (LossParts, Vec<f64>, Vec<f64>) {
    let p = softmax_unchecked(dynamic_logits);
    let q = softmax_unchecked(static_logits);
    let cls_dynamic = log_sum_exp(dynamic_logits) - dynamic_logits[target];
    let cls_static = log_sum_exp(static_logits) - static_logits[target];

    let log_p: Vec<f64> = p.iter().map(|v| v.max(PROB_CLAMP).ln()).collect();
    let log_q: Vec<f64> = q.iter().map(|v| v.max(PROB_CLAMP).ln()).collect();
    // KL(p‖q) + KL(q‖p) = Σ (p − q)(log p − log q)
    let consistency: f64 = (0..p.len()).map(|j| (p[j] - q[j]) * (log_p[j] - log_q[j])).sum();

    let mut d_dynamic = p.clone();
    d_dynamic[target] -= 1.0;
    let mut d_static = q.clone();
    d_static[target] -= 1.0;
    if lambda != 0.0 {
        // ∂/∂p_j = (log p_j − log q_j) + (p_j − q_j)·[p_j ≥ clamp]/p_j, symmetric for q.
        let dp: Vec<f64> = (0..p.len())
            .map(|j| log_p[j] - log_q[j] + if p[j] >= PROB_CLAMP { (p[j] - q[j]) / p[j] } else { 0.0 })
            .collect();
        let dq: Vec<f64> = (0..q.len())
            .map(|j| log_q[j] - log_p[j] + if q[j] >= PROB_CLAMP { (q[j] - p[j]) / q[j] } else { 0.0 })
            .collect();
        for (d, g) in d_dynamic.iter_mut().zip(softmax_backward(&p, &dp)) {
            *d += lambda * g;
        }
        for (d, g) in d_static.iter_mut().zip(softmax_backward(&q, &dq)) {
            *d += lambda * g;
        }
    }
    let parts = LossParts {
        cls_dynamic,
        cls_static,
        consistency,
        total: cls_dynamic + cls_static + lambda * consistency,
    };
    (parts, d_dynamic, d_static)
}

/// Which branches receive training signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    #[default]
    Both,
    /// Only the dynamic cross-entropy is optimized.
    DynamicOnly,
    /// Only the static cross-entropy is optimized.
    StaticOnly,
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub branches: BranchMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: 5,
            batch_size: 16,
            epochs: 30,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            branches: BranchMode::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Parameter(format!("lr must be ≥ 0, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Parameter(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("lr_decay_every and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Parameter("Adam needs β1, β2 in [0, 1) and ε > 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| t.zeros_like()).collect();
        Adam {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let p = p.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for (i, &gi) in g.as_slice().iter().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Loss, gradients and fused prediction for one supervised frame.
pub struct SampleGrad {
    pub loss: LossParts,
    pub grads: ModelParams,
}

/// Forward and backward for the window ending at the supervised frame.
pub fn sample_loss_and_grad(
    params: &ModelParams,
    bank: &ExemplarBank,
    projection: &BankProjection,
    window: &Tensor,
    target: usize,
    mode: BranchMode,
) -> Result<SampleGrad> {
    let mut grads = params.zeros_like();
    let frame = window.row(window.rows() - 1);
    let lambda = params.hyper.lambda;
    let loss = match mode {
        BranchMode::Both => {
            let dynamic = DynamicForward::run(window, &params.dynamic)?;
            let stat = StaticForward::run(frame, projection, &params.static_)?;
            let (parts, d_dyn, d_stat) = loss_and_grad(&dynamic.output.logits, &stat.output.logits, target, lambda);
            grads.dynamic = dynamic.backward(&params.dynamic, &d_dyn).params;
            grads.static_ = stat.backward(bank, projection, &params.static_, &d_stat).params;
            parts
        }
        BranchMode::DynamicOnly => {
            let dynamic = DynamicForward::run(window, &params.dynamic)?;
            let z = &dynamic.output.logits;
            let mut d = softmax_unchecked(z);
            d[target] -= 1.0;
            grads.dynamic = dynamic.backward(&params.dynamic, &d).params;
            let cls = log_sum_exp(z) - z[target];
            LossParts { cls_dynamic: cls, total: cls, ..Default::default() }
        }
        BranchMode::StaticOnly => {
            let stat = StaticForward::run(frame, projection, &params.static_)?;
            let z = &stat.output.logits;
            let mut d = softmax_unchecked(z);
            d[target] -= 1.0;
            grads.static_ = stat.backward(bank, projection, &params.static_, &d).params;
            let cls = log_sum_exp(z) - z[target];
            LossParts { cls_static: cls, total: cls, ..Default::default() }
        }
    };
    if !loss.total.is_finite() {
        return Err(Error::Numeric("training loss is not finite".into()));
    }
    Ok(SampleGrad { loss, grads })
}

/// Mean losses over one epoch plus the learning rate used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_cls_d")]
    pub cls_dynamic: f64,
    #[serde(rename = "L_cls_s")]
    pub cls_static: f64,
    #[serde(rename = "L_cons")]
    pub consistency: f64,
    pub total: f64,
    pub lr: f64,
}

/// Per-batch loss, exposed so callers can audit training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLog {
    pub epoch: usize,
    pub loss: LossParts,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<EpochLog>,
    pub batches: Vec<BatchLog>,
}

/// Trains from a fresh initialization drawn from `config.seed`.
pub fn train(dataset: &FeatureDataset, bank: &ExemplarBank, hyper: ModelHyper, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, bank, hyper, config, Exec::default())
}

pub fn train_with(
    dataset: &FeatureDataset,
    bank: &ExemplarBank,
    hyper: ModelHyper,
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    let hyper = ModelHyper {
        exemplars: bank.per_class,
        ..hyper
    };
    let params = ModelParams::init(hyper, dataset.num_classes, dataset.dim, &mut Rng::with_stream(config.seed, 0))?;
    train_from(params, dataset, bank, config, exec)
}

/// Continues training `params`.
pub fn train_from(
    mut params: ModelParams,
    dataset: &FeatureDataset,
    bank: &ExemplarBank,
    config: &TrainConfig,
    exec: Exec,
) -> Result<TrainOutcome> {
    config.validate()?;
    params.hyper.validate()?;
    if dataset.total_frames() == 0 {
        return Err(Error::Data("training set has no frames".into()));
    }
    if bank.num_classes != dataset.num_classes || bank.dim != dataset.dim {
        return Err(Error::Dimension(format!(
            "bank (C = {}, D = {}) does not match dataset (C = {}, D = {})",
            bank.num_classes, bank.dim, dataset.num_classes, dataset.dim
        )));
    }
    if params.num_classes != dataset.num_classes || params.dim != dataset.dim {
        return Err(Error::Dimension("model does not match dataset".into()));
    }
    if params.hyper.exemplars != bank.per_class {
        return Err(Error::Dimension(format!(
            "model expects M = {}, bank has M = {}",
            params.hyper.exemplars, bank.per_class
        )));
    }

    let samples: Vec<(usize, usize)> = dataset
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(v, seq)| (0..seq.len()).map(move |t| (v, t)))
        .collect();
    let history = params.hyper.window;
    let mut shuffle_rng = Rng::with_stream(config.seed, 1);
    let mut adam = Adam::new(&params, config);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut batches = Vec::new();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut order = samples.clone();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = LossParts::default();
        for batch in order.chunks(config.batch_size) {
            let projection = BankProjection::new(bank, &params.static_)?;
            let results = exec.map(batch, |&(v, t)| {
                let seq = &dataset.sequences[v];
                let window = seq.window(t, history);
                sample_loss_and_grad(&params, bank, &projection, &window, seq.labels[t], config.branches)
            });
            let mut grads = params.zeros_like();
            let mut batch_loss = LossParts::default();
            for result in results {
                let sample = result?;
                grads.add_assign(&sample.grads);
                batch_loss.add(&sample.loss);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(inv);
            adam.step(&mut params, &grads, lr);
            epoch_loss.add(&batch_loss);
            batches.push(BatchLog {
                epoch,
                loss: batch_loss.scaled(inv),
            });
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("parameters diverged in epoch {epoch}")));
        }
        let mean = epoch_loss.scaled(1.0 / samples.len() as f64);
        curve.push(EpochLog {
            epoch,
            cls_dynamic: mean.cls_dynamic,
            cls_static: mean.cls_static,
            consistency: mean.consistency,
            total: mean.total,
            lr,
        });
    }
    Ok(TrainOutcome { params, curve, batches })
}
