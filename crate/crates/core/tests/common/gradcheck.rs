//! Central-difference gradient oracle.
//!
//! Every case is evaluated as `sum(op(inputs) * R)` for a fixed random `R`.
//! Inputs are rounded to f32 first so the f32 and f64 graphs see identical
//! values; the f64 finite differences serve as the oracle for both.

use predcomp::model::{LanguageModel, ModelConfig};
use predcomp::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Matmul,
    MatmulBatched,
    MatmulNt,
    Add,
    AddBroadcast,
    Sub,
    Mul,
    MulBroadcast,
    Scale,
    Reshape,
    Permute,
    Transpose,
    Narrow,
    Concat,
    Embedding,
    LayerNorm,
    Gelu,
    Softmax,
    MaskedSoftmax,
    Sum,
    Mean,
    CrossEntropy,
}

pub const ALL_OPS: [Op; 22] = [
    Op::Matmul,
    Op::MatmulBatched,
    Op::MatmulNt,
    Op::Add,
    Op::AddBroadcast,
    Op::Sub,
    Op::Mul,
    Op::MulBroadcast,
    Op::Scale,
    Op::Reshape,
    Op::Permute,
    Op::Transpose,
    Op::Narrow,
    Op::Concat,
    Op::Embedding,
    Op::LayerNorm,
    Op::Gelu,
    Op::Softmax,
    Op::MaskedSoftmax,
    Op::Sum,
    Op::Mean,
    Op::CrossEntropy,
];

#[derive(Debug, Clone)]
pub struct Case {
    pub op: Op,
    pub shapes: Vec<Vec<usize>>,
    pub inputs: Vec<Vec<f64>>,
    /// Integer side data: ids, targets, permutation, axis/start/len.
    pub ints: Vec<usize>,
    pub factor: f64,
    pub weights: Vec<f64>,
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| round32(rng.sample::<f64, _>(StandardNormal))).collect()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

pub fn make_case(op: Op, rng: &mut ChaCha8Rng) -> Case {
    let (a, b, c) = (dim(rng), dim(rng), dim(rng));
    let mut ints = Vec::new();
    let mut factor = 1.0;
    let shapes: Vec<Vec<usize>> = match op {
        Op::Matmul => vec![vec![a, b], vec![b, c]],
        Op::MatmulBatched => vec![vec![2, a, b], vec![2, b, c]],
        Op::MatmulNt => vec![vec![a, b], vec![c, b]],
        Op::Add | Op::Sub | Op::Mul => vec![vec![a, b], vec![a, b]],
        Op::AddBroadcast | Op::MulBroadcast => vec![vec![a, b, c], vec![b, c]],
        Op::Scale => {
            factor = round32(rng.gen_range(-2.0..2.0));
            vec![vec![a, b]]
        }
        Op::Reshape => vec![vec![a, b, c]],
        Op::Permute => {
            let mut p = vec![0, 1, 2];
            p.shuffle(rng);
            ints = p;
            vec![vec![a, b, c]]
        }
        Op::Transpose => vec![vec![a, b]],
        Op::Narrow => {
            let shape = vec![a + 1, b + 1, c + 1];
            let axis = rng.gen_range(0..3);
            let start = rng.gen_range(0..shape[axis]);
            let len = rng.gen_range(1..=shape[axis] - start);
            ints = vec![axis, start, len];
            vec![shape]
        }
        Op::Concat => {
            let axis = rng.gen_range(0..2);
            ints = vec![axis];
            let mut s2 = vec![a, b];
            s2[axis] = dim(rng);
            vec![vec![a, b], s2]
        }
        Op::Embedding => {
            let (vocab, n) = (a + 2, rng.gen_range(1..8));
            ints = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
            vec![vec![vocab, b + 1]]
        }
        Op::LayerNorm => {
            // With two features the output is ±1 whatever the input, leaving
            // only an eps-sized gradient that no difference quotient resolves.
            let d = b + 2;
            vec![vec![a, d], vec![d], vec![d]]
        }
        Op::Gelu | Op::Softmax | Op::Sum | Op::Mean => vec![vec![a, b + 1]],
        Op::MaskedSoftmax => vec![vec![a, b + 1, b + 1]],
        Op::CrossEntropy => {
            let classes = b + 1;
            ints = (0..a).map(|_| rng.gen_range(0..classes)).collect();
            vec![vec![a, classes]]
        }
    };
    let inputs = shapes.iter().map(|s| randn(rng, s.iter().product())).collect();
    let mut case = Case { op, shapes, inputs, ints, factor, weights: Vec::new() };
    let out = case.forward::<f64>(&case.tensors(false));
    case.weights = randn(rng, out.numel());
    case
}

impl Case {
    fn tensors<T: Scalar>(&self, grad: bool) -> Vec<Tensor<T>> {
        self.shapes
            .iter()
            .zip(&self.inputs)
            .map(|(s, d)| {
                let data = d.iter().map(|&v| T::from_f64(v)).collect();
                if grad {
                    Tensor::parameter(s, data).unwrap()
                } else {
                    Tensor::new(s, data).unwrap()
                }
            })
            .collect()
    }

    fn forward<T: Scalar>(&self, x: &[Tensor<T>]) -> Tensor<T> {
        let r = match self.op {
            Op::Matmul | Op::MatmulBatched => x[0].matmul(&x[1]),
            Op::MatmulNt => x[0].matmul_nt(&x[1]),
            Op::Add | Op::AddBroadcast => x[0].add(&x[1]),
            Op::Sub => x[0].sub(&x[1]),
            Op::Mul | Op::MulBroadcast => x[0].mul(&x[1]),
            Op::Scale => Ok(x[0].scale(self.factor)),
            Op::Reshape => {
                let s = &self.shapes[0];
                x[0].reshape(&[s[0] * s[1], s[2]])
            }
            Op::Permute => x[0].permute(&self.ints),
            Op::Transpose => x[0].transpose(),
            Op::Narrow => x[0].narrow(self.ints[0], self.ints[1], self.ints[2]),
            Op::Concat => Tensor::concat(x, self.ints[0]),
            Op::Embedding => Tensor::embedding(&x[0], &self.ints),
            Op::LayerNorm => x[0].layer_norm(&x[1], &x[2], 1e-5),
            Op::Gelu => Ok(x[0].gelu()),
            Op::Softmax => x[0].softmax_rows(),
            Op::MaskedSoftmax => x[0].causal_mask().and_then(|m| m.softmax_rows()),
            Op::Sum => Ok(x[0].sum()),
            Op::Mean => Ok(x[0].mean()),
            Op::CrossEntropy => x[0].cross_entropy_mean(&self.ints),
        };
        r.unwrap()
    }

    fn objective<T: Scalar>(&self, x: &[Tensor<T>]) -> Tensor<T> {
        let out = self.forward(x);
        if self.weights.is_empty() {
            return out;
        }
        let w = Tensor::new(out.shape(), self.weights.iter().map(|&v| T::from_f64(v)).collect()).unwrap();
        out.mul(&w).unwrap().sum()
    }

    /// Gradient of the objective for each input, via backward in precision `T`.
    pub fn analytic<T: Scalar>(&self) -> Vec<Vec<f64>> {
        let x = self.tensors::<T>(true);
        self.objective(&x).backward().unwrap();
        x.iter().map(|t| t.grad().iter().map(|v| v.as_f64()).collect()).collect()
    }

    /// Central differences of the f64 objective.
    pub fn numeric(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for k in 0..self.inputs.len() {
            let mut g = Vec::with_capacity(self.inputs[k].len());
            for e in 0..self.inputs[k].len() {
                let eval = |delta: f64| {
                    let mut c = self.clone();
                    c.inputs[k][e] += delta;
                    c.objective::<f64>(&c.tensors(false)).item()
                };
                g.push((eval(H) - eval(-H)) / (2.0 * H));
            }
            out.push(g);
        }
        out
    }
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over one gradient vector; zero when both vanish.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn worst(a: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    a.iter().zip(n).map(|(x, y)| rel_error(x, y)).fold(0.0, f64::max)
}

/// Worst f64 and f32 relative errors of `op` over `instances` random cases.
pub fn check_op(op: Op, instances: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut e64, mut e32) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let case = make_case(op, &mut rng);
        let num = case.numeric();
        e64 = e64.max(worst(&case.analytic::<f64>(), &num));
        e32 = e32.max(worst(&case.analytic::<f32>(), &num));
    }
    (e64, e32)
}

pub fn block_config() -> ModelConfig {
    ModelConfig { context_window: 6, d_model: 16, n_layers: 2, n_heads: 2, vocab_size: 13 }
}

/// Sets every parameter of `m` to `values` (one vector per parameter).
fn set_params<T: Scalar>(m: &LanguageModel<T>, values: &[Vec<f64>]) {
    for (p, v) in m.parameters().iter().zip(values) {
        let mut d = p.data_mut();
        for (x, &y) in d.iter_mut().zip(v) {
            *x = T::from_f64(y);
        }
    }
}

/// Full 2-layer, d=16, 2-head model: worst relative error of the batch loss
/// gradient, checked on up to `per_tensor` random coordinates of every
/// parameter tensor.
pub fn check_block(instance: u64, per_tensor: usize) -> (f64, f64) {
    let cfg = block_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
    let m64 = LanguageModel::<f64>::init(cfg, instance).unwrap();
    // Larger weights than the 0.02 init keep every gradient well above rounding.
    let values: Vec<Vec<f64>> = m64.parameters().iter().map(|p| randn(&mut rng, p.numel()).iter().map(|v| round32(0.3 * v)).collect()).collect();
    set_params(&m64, &values);
    let m32 = LanguageModel::<f32>::init(cfg, instance).unwrap();
    set_params(&m32, &values);
    let batch = 2;
    let ids: Vec<u32> = (0..batch * cfg.context_window).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();

    m64.zero_grad();
    m64.batch_loss(&ids, batch).unwrap().backward().unwrap();
    m32.zero_grad();
    m32.batch_loss(&ids, batch).unwrap().backward().unwrap();
    let (mut a64, mut a32, mut num) = (Vec::new(), Vec::new(), Vec::new());
    for (p64, p32) in m64.parameters().iter().zip(m32.parameters()) {
        let (g64, g32) = (p64.grad(), p32.grad());
        let mut coords: Vec<usize> = (0..p64.numel()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(per_tensor);
        for e in coords {
            let orig = p64.data()[e];
            let eval = |v: f64| {
                p64.data_mut()[e] = v;
                predcomp::tensor::no_grad(|| m64.batch_loss(&ids, batch).unwrap().item())
            };
            let d = (eval(orig + H) - eval(orig - H)) / (2.0 * H);
            p64.data_mut()[e] = orig;
            num.push(d);
            a64.push(g64[e]);
            a32.push(g32[e] as f64);
        }
    }
    (rel_error(&a64, &num), rel_error(&a32, &num))
}
