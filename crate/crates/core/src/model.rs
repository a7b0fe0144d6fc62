//! Full two-branch model parameters and the checkpoint format.
//!
//! Checkpoint (`.clrc`, little-endian): magic `CLRC`, version `u32 = 1`, then
//! `C, D, T, H, M, activation` as `u32` (activation 0 = ReLU, 1 = identity),
//! `λ, β` as `f64`, the tensor count as `u32`, and finally every tensor as
//! `rows: u32, cols: u32` followed by `rows·cols` `f64` values, in the order
//! of [`ModelParams::tensors`]:
//!
//! 1. dynamic key stack: layer 1 taps (prev, current, next), bias; layer 2 taps, bias
//! 2. dynamic value stack: same layout
//! 3. dynamic classifier weight, bias
//! 4. static exemplar-key, exemplar-value, frame-key, frame-value,
//!    category-attention and classifier layers, each weight then bias

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamic_branch::{Activation, DynamicParams};
use crate::error::{Error, Result};
use crate::io::{read_file, to_u32, write_atomic, Decoder, Encoder};
use crate::numeric::{Rng, Tensor};
use crate::static_branch::StaticParams;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLRC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture and fusion hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyper {
    /// History length `T`; windows hold up to `T + 1` frames.
    pub window: usize,
    /// Channel width `H`.
    pub hidden: usize,
    /// Exemplars per class `M`.
    pub exemplars: usize,
    /// Consistency-loss weight `λ`.
    pub lambda: f64,
    /// Static-branch share `β` of the fused score.
    pub beta: f64,
    #[serde(skip)]
    pub activation: Activation,
}

impl Default for ModelHyper {
    fn default() -> Self {
        ModelHyper {
            window: 64,
            hidden: 1024,
            exemplars: 8,
            lambda: 1.0,
            beta: 0.3,
            activation: Activation::Relu,
        }
    }
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.hidden == 0 || self.exemplars == 0 {
            return Err(Error::Parameter(format!(
                "T, H and M must be positive (T = {}, H = {}, M = {})",
                self.window, self.hidden, self.exemplars
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Parameter(format!("λ must be ≥ 0, got {}", self.lambda)));
        }
        check_beta(self.beta)
    }
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("β must lie in [0, 1], got {beta}")))
    }
}

/// Every learnable tensor of both branches. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: ModelHyper,
    pub num_classes: usize,
    pub dim: usize,
    pub dynamic: DynamicParams,
    pub static_: StaticParams,
}

impl ModelParams {
    /// Kaiming-uniform weights and zero biases; the dynamic branch is drawn
    /// first, then the static branch.
    pub fn init(hyper: ModelHyper, num_classes: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        hyper.validate()?;
        if num_classes == 0 || dim == 0 {
            return Err(Error::Parameter("C and D must be positive".into()));
        }
        let mut dynamic = DynamicParams::init(dim, hyper.hidden, num_classes, rng);
        dynamic.key.activation = hyper.activation;
        dynamic.value.activation = hyper.activation;
        let static_ = StaticParams::init(dim, hyper.hidden, num_classes, rng);
        Ok(ModelParams {
            hyper,
            num_classes,
            dim,
            dynamic,
            static_,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            hyper: self.hyper,
            num_classes: self.num_classes,
            dim: self.dim,
            dynamic: self.dynamic.zeros_like(),
            static_: self.static_.zeros_like(),
        }
    }

    /// All tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.dynamic.tensors();
        out.extend(self.static_.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let ModelParams { dynamic, static_, .. } = self;
        let mut out = dynamic.tensors_mut();
        out.extend(static_.tensors_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.as_slice().iter().copied()).collect()
    }

    /// Overwrites all parameters from a vector in [`ModelParams::flatten`] order.
    pub fn assign_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_parameters() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                theta.len(),
                self.num_parameters()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.hyper;
        let mut enc = Encoder::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        for (v, what) in [
            (self.num_classes, "C"),
            (self.dim, "D"),
            (h.window, "T"),
            (h.hidden, "H"),
            (h.exemplars, "M"),
        ] {
            enc.u32(to_u32(v, what)?);
        }
        enc.u32(h.activation.code());
        enc.f64(h.lambda);
        enc.f64(h.beta);
        let tensors = self.tensors();
        enc.u32(to_u32(tensors.len(), "tensor count")?);
        for t in tensors {
            enc.u32(to_u32(t.rows(), "rows")?);
            enc.u32(to_u32(t.cols(), "cols")?);
            for &v in t.as_slice() {
                enc.f64(v);
            }
        }
        Ok(enc.finish())
    }

    pub fn from_bytes(what: &str, bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(what, bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let num_classes = dec.u32()? as usize;
        let dim = dec.u32()? as usize;
        let window = dec.u32()? as usize;
        let hidden = dec.u32()? as usize;
        let exemplars = dec.u32()? as usize;
        let code = dec.u32()?;
        let activation = Activation::from_code(code)
            .ok_or_else(|| Error::Format(format!("{what}: unknown activation code {code}")))?;
        let lambda = dec.f64()?;
        let beta = dec.f64()?;
        let hyper = ModelHyper {
            window,
            hidden,
            exemplars,
            lambda,
            beta,
            activation,
        };
        hyper
            .validate()
            .map_err(|e| Error::Format(format!("{what}: {e}")))?;
        // Shapes come from a zero-initialized skeleton.
        let mut params = ModelParams::init(hyper, num_classes, dim, &mut Rng::new(0))
            .map_err(|e| Error::Format(format!("{what}: {e}")))?;
        let count = dec.u32()? as usize;
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(Error::Format(format!(
                "{what}: {count} tensors, expected {}",
                slots.len()
            )));
        }
        for (i, slot) in slots.iter_mut().enumerate() {
            let rows = dec.u32()? as usize;
            let cols = dec.u32()? as usize;
            if (rows, cols) != slot.shape() {
                return Err(Error::Format(format!(
                    "{what}: tensor {i} is {rows}x{cols}, expected {:?}",
                    slot.shape()
                )));
            }
            for v in slot.as_mut_slice() {
                *v = dec.f64()?;
            }
        }
        dec.expect_end()?;
        if !params.is_finite() {
            return Err(Error::Numeric(format!("{what}: non-finite parameter")));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&path.display().to_string(), &read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelHyper {
        ModelHyper {
            window: 3,
            hidden: 4,
            exemplars: 2,
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = ModelParams::init(small(), 2, 3, &mut Rng::new(5)).unwrap();
        let bytes = params.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CLRC");
        assert_eq!(ModelParams::from_bytes("c", &bytes).unwrap(), params);
        assert!(matches!(ModelParams::from_bytes("c", &bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(ModelParams::from_bytes("c", &bad), Err(Error::Format(_))));
    }

    #[test]
    fn hyper_validation() {
        assert!(ModelHyper { beta: 1.5, ..small() }.validate().is_err());
        assert!(ModelHyper { lambda: -1.0, ..small() }.validate().is_err());
        assert!(ModelHyper { window: 0, ..small() }.validate().is_err());
        assert!(ModelHyper { beta: 0.0, lambda: 0.0, ..small() }.validate().is_ok());
    }

    #[test]
    fn flatten_round_trip() {
        let params = ModelParams::init(small(), 2, 3, &mut Rng::new(1)).unwrap();
        let mut other = params.zeros_like();
        other.assign_flat(&params.flatten()).unwrap();
        assert_eq!(other, params);
        assert!(other.assign_flat(&[0.0]).is_err());
    }
}
