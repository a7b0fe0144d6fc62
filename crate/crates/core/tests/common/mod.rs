#![allow(dead_code)]

use oad_core::dataset::{gen_synthetic, FeatureDataset, Split, SyntheticConfig};
use oad_core::exemplars::ExemplarBank;
use oad_core::model::{ModelHyper, ModelParams};
use oad_core::numeric::{grad_check, Rng, Tensor, DEFAULT_STEP};
use oad_core::static_branch::BankProjection;
use oad_core::training::{sample_loss_and_grad, BranchMode};

/// A tiny model with a random bank, window and target.
pub struct Micro {
    pub params: ModelParams,
    pub bank: ExemplarBank,
    pub window: Tensor,
    pub target: usize,
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// D = 3, H = 4, T = 3, C = 2, M = 2.
pub fn micro(seed: u64) -> Micro {
    let mut rng = Rng::new(seed);
    let hyper = ModelHyper {
        window: 3,
        hidden: 4,
        exemplars: 2,
        lambda: rng.uniform_range(0.5, 2.0),
        ..Default::default()
    };
    let mut params = ModelParams::init(hyper, 2, 3, &mut rng).unwrap();
    // Generic biases keep every conv feature away from the zero vector, where
    // the regularized cosine bends on the scale of its epsilon.
    for t in params.tensors_mut() {
        if t.rows() == 1 {
            for v in t.as_mut_slice() {
                *v = 0.5 * rng.normal();
            }
        }
    }
    let bank = ExemplarBank::new(2, 2, random_tensor(6, 3, &mut rng)).unwrap();
    let window = random_tensor(4, 3, &mut rng);
    let target = rng.index(3);
    Micro {
        params,
        bank,
        window,
        target,
    }
}

/// Total loss and its analytic gradient as functions of the flattened
/// parameters, including the path through the projected bank.
pub fn total_loss_and_grad(m: &Micro, theta: &[f64]) -> (f64, Vec<f64>) {
    let mut params = m.params.clone();
    params.assign_flat(theta).unwrap();
    let proj = BankProjection::new(&m.bank, &params.static_).unwrap();
    match sample_loss_and_grad(&params, &m.bank, &proj, &m.window, m.target, BranchMode::Both) {
        Ok(s) => (s.loss.total, s.grads.flatten()),
        Err(_) => (f64::NAN, vec![0.0; theta.len()]),
    }
}

pub fn end_to_end_error(seed: u64) -> f64 {
    let m = micro(seed);
    let theta = m.params.flatten();
    grad_check(|t| total_loss_and_grad(&m, t), &theta, DEFAULT_STEP)
        .unwrap()
        .max_rel_error
}

/// Fraction of test frames whose nearest training class mean has the right label.
pub fn nearest_class_mean_accuracy(train: &FeatureDataset, test: &FeatureDataset) -> f64 {
    let means: Vec<Vec<f64>> = (0..=train.num_classes)
        .map(|c| {
            let frames = train.frames_of_class(c);
            let mut mean = vec![0.0; train.dim];
            for row in frames.iter_rows() {
                for (m, x) in mean.iter_mut().zip(row) {
                    *m += x / frames.rows() as f64;
                }
            }
            mean
        })
        .collect();
    let mut hits = 0;
    let mut total = 0;
    for seq in &test.sequences {
        for t in 0..seq.len() {
            let f = seq.frame(t);
            let best = (0..means.len())
                .min_by(|&a, &b| dist(f, &means[a]).total_cmp(&dist(f, &means[b])))
                .unwrap();
            hits += usize::from(best == seq.labels[t]);
            total += 1;
        }
    }
    hits as f64 / total as f64
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub const BENCH_TRAIN_SEED: u64 = 7;
pub const BENCH_TEST_SEED: u64 = 8;

pub fn bench_config() -> SyntheticConfig {
    SyntheticConfig {
        num_classes: 3,
        dim: 16,
        videos: 20,
        frames_per_video: 200,
        separation: 10.0,
    }
}

pub fn bench_data() -> (FeatureDataset, FeatureDataset) {
    let cfg = bench_config();
    let train = gen_synthetic(&cfg, Split::Train, &mut Rng::new(BENCH_TRAIN_SEED)).unwrap();
    let test = gen_synthetic(&cfg, Split::Test, &mut Rng::new(BENCH_TEST_SEED)).unwrap();
    (train, test)
}

pub fn bench_hyper() -> ModelHyper {
    ModelHyper {
        window: 16,
        hidden: 64,
        exemplars: 8,
        ..Default::default()
    }
}
