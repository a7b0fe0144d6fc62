//! Static branch: the current frame consults every category's exemplars.
//!
//! Exemplars are projected into key/value spaces, the frame into its own
//! key/value spaces. Per category, cosine similarities between the frame key
//! and exemplar keys are softmaxed over that category's exemplars and used to
//! pool exemplar values into a category feature. A shared `H → 1` map scores
//! each category feature; softmax over categories gives the weights that pool
//! the category features into one exemplary feature, which is summed with the
//! frame's value feature and classified.

use crate::error::{Error, Result};
use crate::exemplars::ExemplarBank;
use crate::numeric::{axpy, cosine_backward, cosine_unchecked, dot, softmax_backward, softmax_unchecked, Linear, Rng, Tensor};

/// Learnable weights of the static branch.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticParams {
    /// Exemplar key projection `D → H`.
    pub exemplar_key: Linear,
    /// Exemplar value projection `D → H`.
    pub exemplar_value: Linear,
    /// Frame key projection `D → H`.
    pub frame_key: Linear,
    /// Frame value projection `D → H`.
    pub frame_value: Linear,
    /// Shared `H → 1` scorer applied to each category feature.
    pub category_attention: Linear,
    /// `H → C+1`.
    pub classifier: Linear,
}

impl StaticParams {
    pub fn init(dim: usize, hidden: usize, num_classes: usize, rng: &mut Rng) -> Self {
        StaticParams {
            exemplar_key: Linear::init(dim, hidden, rng),
            exemplar_value: Linear::init(dim, hidden, rng),
            frame_key: Linear::init(dim, hidden, rng),
            frame_value: Linear::init(dim, hidden, rng),
            category_attention: Linear::init(hidden, 1, rng),
            classifier: Linear::init(hidden, num_classes + 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear| Linear::zeros(l.input_dim(), l.output_dim());
        StaticParams {
            exemplar_key: z(&self.exemplar_key),
            exemplar_value: z(&self.exemplar_value),
            frame_key: z(&self.frame_key),
            frame_value: z(&self.frame_value),
            category_attention: z(&self.category_attention),
            classifier: z(&self.classifier),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.frame_key.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    pub fn num_categories(&self) -> usize {
        self.classifier.output_dim()
    }

    /// Field order as declared; weights before biases.
    pub fn tensors(&self) -> Vec<&Tensor> {
        [
            &self.exemplar_key,
            &self.exemplar_value,
            &self.frame_key,
            &self.frame_value,
            &self.category_attention,
            &self.classifier,
        ]
        .into_iter()
        .flat_map(Linear::tensors)
        .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let StaticParams {
            exemplar_key,
            exemplar_value,
            frame_key,
            frame_value,
            category_attention,
            classifier,
        } = self;
        [exemplar_key, exemplar_value, frame_key, frame_value, category_attention, classifier]
            .into_iter()
            .flat_map(Linear::tensors_mut)
            .collect()
    }

    fn check(&self, bank: &ExemplarBank) -> Result<()> {
        let (d, h) = (self.input_dim(), self.hidden_dim());
        let layers_ok = [&self.exemplar_key, &self.exemplar_value, &self.frame_key, &self.frame_value]
            .iter()
            .all(|l| l.input_dim() == d && l.output_dim() == h)
            && self.category_attention.input_dim() == h
            && self.category_attention.output_dim() == 1;
        if !layers_ok {
            return Err(Error::Dimension("static branch layers do not chain".into()));
        }
        if bank.dim != d || bank.num_categories() != self.num_categories() {
            return Err(Error::Dimension(format!(
                "bank has D = {}, C+1 = {}; static branch expects D = {d}, C+1 = {}",
                bank.dim,
                bank.num_categories(),
                self.num_categories()
            )));
        }
        Ok(())
    }
}

/// Exemplar keys and values under fixed parameters; reusable across frames.
#[derive(Debug, Clone)]
pub struct BankProjection {
    pub per_class: usize,
    /// `(C+1)·M × H`.
    pub keys: Tensor,
    /// `(C+1)·M × H`.
    pub values: Tensor,
}

impl BankProjection {
    pub fn new(bank: &ExemplarBank, params: &StaticParams) -> Result<Self> {
        params.check(bank)?;
        Ok(BankProjection {
            per_class: bank.per_class,
            keys: params.exemplar_key.forward_rows(&bank.exemplars),
            values: params.exemplar_value.forward_rows(&bank.exemplars),
        })
    }

    fn categories(&self) -> usize {
        self.keys.rows() / self.per_class
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticOutput {
    /// Unnormalized class scores `s_s`, length `C+1`.
    pub logits: Vec<f64>,
    /// `(C+1) × M`; row `c` is the attention over class `c`'s exemplars.
    pub exemplar_attention: Tensor,
    /// `(C+1) × H` per-category pooled features.
    pub category_features: Tensor,
    /// Softmax weights over categories.
    pub category_weights: Vec<f64>,
    /// Category-weighted feature.
    pub aggregated: Vec<f64>,
    /// Value feature of the frame.
    pub value_feature: Vec<f64>,
}

pub struct StaticForward {
    pub output: StaticOutput,
    frame: Vec<f64>,
    frame_key: Vec<f64>,
    joint: Vec<f64>,
}

pub struct StaticGrads {
    pub params: StaticParams,
    pub frame: Vec<f64>,
}

/// Scores frame `f0` against `bank`.
pub fn forward_static(f0: &[f64], bank: &ExemplarBank, params: &StaticParams) -> Result<StaticOutput> {
    let proj = BankProjection::new(bank, params)?;
    StaticForward::run(f0, &proj, params).map(|f| f.output)
}

impl StaticForward {
    pub fn run(f0: &[f64], proj: &BankProjection, params: &StaticParams) -> Result<Self> {
        if f0.len() != params.input_dim() {
            return Err(Error::Dimension(format!(
                "static branch expects {}-dim frames, got {}",
                params.input_dim(),
                f0.len()
            )));
        }
        let (cats, m, h) = (proj.categories(), proj.per_class, params.hidden_dim());
        if cats != params.num_categories() || proj.keys.cols() != h {
            return Err(Error::Dimension("bank projection does not match parameters".into()));
        }
        let frame_key = params.frame_key.forward(f0);
        let value_feature = params.frame_value.forward(f0);

        let mut exemplar_attention = Tensor::zeros(cats, m);
        let mut category_features = Tensor::zeros(cats, h);
        let mut scores = Vec::with_capacity(cats);
        for c in 0..cats {
            let sims: Vec<f64> = (0..m)
                .map(|i| cosine_unchecked(&frame_key, proj.keys.row(c * m + i)))
                .collect();
            let weights = softmax_unchecked(&sims);
            let feature = category_features.row_mut(c);
            for (i, w) in weights.iter().enumerate() {
                axpy(*w, proj.values.row(c * m + i), feature);
            }
            exemplar_attention.row_mut(c).copy_from_slice(&weights);
            scores.push(params.category_attention.forward(category_features.row(c))[0]);
        }
        let category_weights = softmax_unchecked(&scores);
        let mut aggregated = vec![0.0; h];
        for (a, e) in category_weights.iter().zip(category_features.iter_rows()) {
            axpy(*a, e, &mut aggregated);
        }
        let joint: Vec<f64> = value_feature.iter().zip(&aggregated).map(|(a, b)| a + b).collect();
        let logits = params.classifier.forward(&joint);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("static branch produced non-finite logits".into()));
        }
        Ok(StaticForward {
            output: StaticOutput {
                logits,
                exemplar_attention,
                category_features,
                category_weights,
                aggregated,
                value_feature,
            },
            frame: f0.to_vec(),
            frame_key,
            joint,
        })
    }

    /// Backpropagates `∂loss/∂logits`. Exemplars are constants.
    pub fn backward(&self, bank: &ExemplarBank, proj: &BankProjection, params: &StaticParams, d_logits: &[f64]) -> StaticGrads {
        let out = &self.output;
        let (cats, m, h) = (proj.categories(), proj.per_class, params.hidden_dim());
        let mut grads = params.zeros_like();
        let d_joint = params.classifier.backward(&self.joint, d_logits, &mut grads.classifier);

        let d_value_feature = d_joint.clone();
        let d_aggregated = &d_joint;
        let d_weights: Vec<f64> = out.category_features.iter_rows().map(|e| dot(d_aggregated, e)).collect();
        let d_scores = softmax_backward(&out.category_weights, &d_weights);

        let mut d_features = Tensor::zeros(cats, h);
        for c in 0..cats {
            let row = d_features.row_mut(c);
            axpy(out.category_weights[c], d_aggregated, row);
            let back = params
                .category_attention
                .backward(out.category_features.row(c), &[d_scores[c]], &mut grads.category_attention);
            axpy(1.0, &back, row);
        }

        let mut d_keys = Tensor::zeros(cats * m, h);
        let mut d_values = Tensor::zeros(cats * m, h);
        let mut d_frame_key = vec![0.0; h];
        for c in 0..cats {
            let d_feature = d_features.row(c);
            let weights = out.exemplar_attention.row(c);
            let d_attn: Vec<f64> = (0..m).map(|i| dot(d_feature, proj.values.row(c * m + i))).collect();
            for (i, w) in weights.iter().enumerate() {
                axpy(*w, d_feature, d_values.row_mut(c * m + i));
            }
            let d_sims = softmax_backward(weights, &d_attn);
            for i in 0..m {
                let r = c * m + i;
                cosine_backward(&self.frame_key, proj.keys.row(r), d_sims[i], &mut d_frame_key, d_keys.row_mut(r));
            }
        }
        params.exemplar_key.backward_rows_params(&bank.exemplars, &d_keys, &mut grads.exemplar_key);
        params.exemplar_value.backward_rows_params(&bank.exemplars, &d_values, &mut grads.exemplar_value);
        let mut d_frame = params.frame_key.backward(&self.frame, &d_frame_key, &mut grads.frame_key);
        let d_frame_v = params.frame_value.backward(&self.frame, &d_value_feature, &mut grads.frame_value);
        axpy(1.0, &d_frame_v, &mut d_frame);
        StaticGrads {
            params: grads,
            frame: d_frame,
        }
    }
}

/// Forward then backward with upstream gradient `d_logits`.
pub fn backward_static(f0: &[f64], bank: &ExemplarBank, params: &StaticParams, d_logits: &[f64]) -> Result<StaticGrads> {
    let proj = BankProjection::new(bank, params)?;
    Ok(StaticForward::run(f0, &proj, params)?.backward(bank, &proj, params, d_logits))
}
