//! Dynamic branch: the current frame consults its own history window.
//!
//! Key and value features come from two stacks of kernel-3 temporal
//! convolutions run over the window. The current frame's key is compared with
//! every key in the window by cosine similarity, the similarities are
//! softmax-normalized into an attention mask, and the mask aggregates the
//! value features into a historical feature. The classifier sees the sum of
//! the current value feature and the historical feature.

use crate::error::{Error, Result};
use crate::numeric::{axpy, cosine_backward, cosine_unchecked, softmax_backward, softmax_unchecked, Conv1d, Linear, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Two temporal convolutions with an activation between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub first: Conv1d,
    pub second: Conv1d,
    pub activation: Activation,
}

pub(crate) struct ConvStackCache {
    hidden_pre: Tensor,
    hidden: Tensor,
}

impl ConvStack {
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        ConvStack {
            first: Conv1d::init(input, hidden, rng),
            second: Conv1d::init(hidden, hidden, rng),
            activation: Activation::Relu,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvStack {
            first: Conv1d::zeros(self.first.input_dim(), self.first.output_dim()),
            second: Conv1d::zeros(self.second.input_dim(), self.second.output_dim()),
            activation: self.activation,
        }
    }

    pub(crate) fn forward(&self, window: &Tensor) -> (Tensor, ConvStackCache) {
        let hidden_pre = self.first.forward_unchecked(window);
        let mut hidden = hidden_pre.clone();
        if self.activation == Activation::Relu {
            hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let out = self.second.forward_unchecked(&hidden);
        (out, ConvStackCache { hidden_pre, hidden })
    }

    pub(crate) fn backward(&self, window: &Tensor, cache: &ConvStackCache, upstream: &Tensor, grad: &mut ConvStack) -> Tensor {
        let mut d_hidden = self.second.backward(&cache.hidden, upstream, &mut grad.second);
        if self.activation == Activation::Relu {
            for (d, pre) in d_hidden.as_mut_slice().iter_mut().zip(cache.hidden_pre.as_slice()) {
                if *pre <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        self.first.backward(window, &d_hidden, &mut grad.first)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.first.tensors().into_iter().chain(self.second.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let ConvStack { first, second, .. } = self;
        first.tensors_mut().into_iter().chain(second.tensors_mut()).collect()
    }
}

/// Learnable weights of the dynamic branch.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicParams {
    pub key: ConvStack,
    pub value: ConvStack,
    /// `H → C+1`.
    pub classifier: Linear,
}

impl DynamicParams {
    pub fn init(dim: usize, hidden: usize, num_classes: usize, rng: &mut Rng) -> Self {
        DynamicParams {
            key: ConvStack::init(dim, hidden, rng),
            value: ConvStack::init(dim, hidden, rng),
            classifier: Linear::init(hidden, num_classes + 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        DynamicParams {
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            classifier: Linear::zeros(self.classifier.input_dim(), self.classifier.output_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.key.first.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    /// Key stack, value stack, classifier; weights before biases.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.key.tensors();
        out.extend(self.value.tensors());
        out.extend(self.classifier.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let DynamicParams { key, value, classifier } = self;
        let mut out = key.tensors_mut();
        out.extend(value.tensors_mut());
        out.extend(classifier.tensors_mut());
        out
    }

    fn check(&self, window: &Tensor) -> Result<()> {
        let h = self.hidden_dim();
        let consistent = self.key.second.output_dim() == h
            && self.value.second.output_dim() == h
            && self.value.first.input_dim() == self.input_dim()
            && self.key.first.output_dim() == self.key.second.input_dim()
            && self.value.first.output_dim() == self.value.second.input_dim();
        if !consistent {
            return Err(Error::Dimension("dynamic branch layers do not chain".into()));
        }
        if window.rows() == 0 {
            return Err(Error::Dimension("dynamic window needs at least one frame".into()));
        }
        if window.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "dynamic branch expects {}-dim frames, got {}",
                self.input_dim(),
                window.cols()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicOutput {
    /// Unnormalized class scores `s_d`, length `C+1`.
    pub logits: Vec<f64>,
    /// Softmaxed similarities over the window, oldest frame first.
    pub attention: Vec<f64>,
    /// Attention-weighted sum of value features.
    pub historical: Vec<f64>,
    /// Value feature of the current frame.
    pub value_feature: Vec<f64>,
}

/// Forward output plus the intermediates needed for backpropagation.
pub struct DynamicForward {
    pub output: DynamicOutput,
    window: Tensor,
    keys: Tensor,
    values: Tensor,
    key_cache: ConvStackCache,
    value_cache: ConvStackCache,
    joint: Vec<f64>,
}

/// Gradients of the dynamic branch.
pub struct DynamicGrads {
    pub params: DynamicParams,
    /// Gradient with respect to every window frame.
    pub window: Tensor,
}

/// Runs the branch on `window` (`n × D`, oldest first, current frame last).
pub fn forward_dynamic(window: &Tensor, params: &DynamicParams) -> Result<DynamicOutput> {
    DynamicForward::run(window, params).map(|f| f.output)
}

impl DynamicForward {
    pub fn run(window: &Tensor, params: &DynamicParams) -> Result<Self> {
        params.check(window)?;
        let (keys, key_cache) = params.key.forward(window);
        let (values, value_cache) = params.value.forward(window);
        let last = window.rows() - 1;
        let query = keys.row(last);
        let similarity: Vec<f64> = keys.iter_rows().map(|k| cosine_unchecked(query, k)).collect();
        let attention = softmax_unchecked(&similarity);
        let mut historical = vec![0.0; params.hidden_dim()];
        for (w, v) in attention.iter().zip(values.iter_rows()) {
            axpy(*w, v, &mut historical);
        }
        let value_feature = values.row(last).to_vec();
        let joint: Vec<f64> = value_feature.iter().zip(&historical).map(|(a, b)| a + b).collect();
        let logits = params.classifier.forward(&joint);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dynamic branch produced non-finite logits".into()));
        }
        Ok(DynamicForward {
            output: DynamicOutput {
                logits,
                attention,
                historical,
                value_feature,
            },
            window: window.clone(),
            keys,
            values,
            key_cache,
            value_cache,
            joint,
        })
    }

    /// Backpropagates `∂loss/∂logits` through the branch.
    pub fn backward(&self, params: &DynamicParams, d_logits: &[f64]) -> DynamicGrads {
        let mut grads = params.zeros_like();
        let d_joint = params.classifier.backward(&self.joint, d_logits, &mut grads.classifier);
        let n = self.window.rows();
        let last = n - 1;
        let attention = &self.output.attention;

        let mut d_values = Tensor::zeros(n, params.hidden_dim());
        axpy(1.0, &d_joint, d_values.row_mut(last));
        let mut d_attention = vec![0.0; n];
        for t in 0..n {
            axpy(attention[t], &d_joint, d_values.row_mut(t));
            d_attention[t] = crate::numeric::dot(&d_joint, self.values.row(t));
        }
        let d_similarity = softmax_backward(attention, &d_attention);

        let mut d_keys = Tensor::zeros(n, params.hidden_dim());
        let mut d_query = vec![0.0; params.hidden_dim()];
        let query = self.keys.row(last);
        for t in 0..n {
            let mut d_key = vec![0.0; params.hidden_dim()];
            cosine_backward(query, self.keys.row(t), d_similarity[t], &mut d_query, &mut d_key);
            axpy(1.0, &d_key, d_keys.row_mut(t));
        }
        axpy(1.0, &d_query, d_keys.row_mut(last));

        let mut d_window = params.key.backward(&self.window, &self.key_cache, &d_keys, &mut grads.key);
        let d_window_v = params.value.backward(&self.window, &self.value_cache, &d_values, &mut grads.value);
        d_window.add_assign(&d_window_v);
        DynamicGrads {
            params: grads,
            window: d_window,
        }
    }
}

/// Forward then backward with upstream gradient `d_logits`.
pub fn backward_dynamic(window: &Tensor, params: &DynamicParams, d_logits: &[f64]) -> Result<DynamicGrads> {
    Ok(DynamicForward::run(window, params)?.backward(params, d_logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, log_sum_exp, softmax, DEFAULT_STEP};

    fn random_window(n: usize, d: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identical_frames_give_uniform_attention() {
        let mut rng = Rng::new(1);
        let params = DynamicParams::init(3, 5, 2, &mut rng);
        let frame: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let window = Tensor::from_rows(&vec![frame; 5]).unwrap();
        let out = forward_dynamic(&window, &params).unwrap();
        // Zero padding makes boundary keys differ; with identity-only convs
        // every key is the same frame.
        let mut linear = params.clone();
        for stack in [&mut linear.key, &mut linear.value] {
            stack.first = Conv1d::zeros(3, 5);
            stack.first.taps[1] = Tensor::from_vec(5, 3, (0..15).map(|_| rng.normal()).collect()).unwrap();
            stack.second = Conv1d::identity(5);
        }
        let out_linear = forward_dynamic(&window, &linear).unwrap();
        for a in &out_linear.attention {
            assert!((a - 0.2).abs() < 1e-12);
        }
        assert!((out.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_frame_window() {
        let mut rng = Rng::new(2);
        let params = DynamicParams::init(4, 6, 3, &mut rng);
        let window = random_window(1, 4, &mut rng);
        let out = forward_dynamic(&window, &params).unwrap();
        assert_eq!(out.attention, vec![1.0]);
        assert_eq!(out.historical, out.value_feature);
        let doubled: Vec<f64> = out.value_feature.iter().map(|v| 2.0 * v).collect();
        assert_eq!(out.logits, params.classifier.forward(&doubled));
    }

    #[test]
    fn dimension_errors() {
        let mut rng = Rng::new(3);
        let params = DynamicParams::init(4, 6, 3, &mut rng);
        assert!(matches!(forward_dynamic(&Tensor::zeros(3, 5), &params), Err(Error::Dimension(_))));
        assert!(matches!(forward_dynamic(&Tensor::zeros(0, 4), &params), Err(Error::Dimension(_))));
    }

    fn flatten(p: &DynamicParams) -> Vec<f64> {
        p.tensors().iter().flat_map(|t| t.as_slice().to_vec()).collect()
    }

    fn unflatten(p: &mut DynamicParams, theta: &[f64]) {
        let mut offset = 0;
        for t in p.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(100 + seed);
            let params = DynamicParams::init(3, 4, 2, &mut rng);
            let window = random_window(4, 3, &mut rng);
            let target = rng.index(3);
            let theta = flatten(&params);
            let f = |th: &[f64]| {
                let mut p = params.clone();
                unflatten(&mut p, th);
                let fwd = DynamicForward::run(&window, &p).unwrap();
                let z = &fwd.output.logits;
                let loss = log_sum_exp(z) - z[target];
                let mut dz = softmax(z).unwrap();
                dz[target] -= 1.0;
                (loss, flatten(&fwd.backward(&p, &dz).params))
            };
            let check = grad_check(f, &theta, DEFAULT_STEP).unwrap();
            assert!(check.max_rel_error < 1e-6, "seed {seed}: {}", check.max_rel_error);

            // Input-window gradient.
            let g = |w: &[f64]| {
                let win = Tensor::from_vec(4, 3, w.to_vec()).unwrap();
                let fwd = DynamicForward::run(&win, &params).unwrap();
                let z = &fwd.output.logits;
                let mut dz = softmax(z).unwrap();
                dz[target] -= 1.0;
                (log_sum_exp(z) - z[target], fwd.backward(&params, &dz).window.into_vec())
            };
            let check = grad_check(g, window.as_slice(), DEFAULT_STEP).unwrap();
            assert!(check.max_rel_error < 1e-6, "seed {seed} window: {}", check.max_rel_error);
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let mut rng = Rng::new(5);
        let params = DynamicParams::init(3, 4, 2, &mut rng);
        let window = random_window(5, 3, &mut rng);
        let fwd = DynamicForward::run(&window, &params).unwrap();
        let zero = fwd.backward(&params, &[0.0; 3]);
        assert!(flatten(&zero.params).iter().all(|v| *v == 0.0));
        assert!(zero.window.as_slice().iter().all(|v| *v == 0.0));
        let up = [0.3, -1.2, 0.5];
        let base = flatten(&fwd.backward(&params, &up).params);
        let scaled = flatten(&fwd.backward(&params, &up.map(|u| 2.5 * u)).params);
        for (b, s) in base.iter().zip(&scaled) {
            assert!((2.5 * b - s).abs() <= 1e-12 * s.abs().max(1.0));
        }
    }
}
