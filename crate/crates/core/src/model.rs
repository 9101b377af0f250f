//! GPT-2 shaped decoder-only transformer.
//!
//! Pre-norm residual blocks, learned positional embeddings, tanh-GELU MLP and
//! an output head tied to the token embedding. No dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    cross_entropy_rows, no_grad, AdamW, AdamWState, Checkpoint, CheckpointTensor, Scalar, Tensor, TensorError,
    TensorRole,
};

pub type TokenId = u32;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds context window {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("need at least {needed} tokens, got {len}")]
    SequenceTooShort { len: usize, needed: usize },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context_window: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// 1024-token context, 128-wide embeddings, 8 layers of 8 heads.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            context_window: 1024,
            d_model: 128,
            n_layers: 8,
            n_heads: 8,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.context_window < 2 {
            return bad(format!("context window {} < 2", self.context_window));
        }
        if self.vocab_size == 0 {
            return bad("empty vocabulary".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Trainable scalars; the output head shares the token embedding.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        self.vocab_size * d + self.context_window * d + self.n_layers * per_layer + 2 * d
    }
}

struct Block<T: Scalar> {
    ln1_g: Tensor<T>,
    ln1_b: Tensor<T>,
    attn_w: Tensor<T>,
    attn_b: Tensor<T>,
    proj_w: Tensor<T>,
    proj_b: Tensor<T>,
    ln2_g: Tensor<T>,
    ln2_b: Tensor<T>,
    fc_w: Tensor<T>,
    fc_b: Tensor<T>,
    fc2_w: Tensor<T>,
    fc2_b: Tensor<T>,
}

pub struct LanguageModel<T: Scalar = f32> {
    config: ModelConfig,
    wte: Tensor<T>,
    wpe: Tensor<T>,
    blocks: Vec<Block<T>>,
    ln_f_g: Tensor<T>,
    ln_f_b: Tensor<T>,
}

fn normal_param<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::parameter(shape, data).expect("shape matches data")
}

fn const_param<T: Scalar>(shape: &[usize], v: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::parameter(shape, vec![T::from_f64(v); n]).expect("shape matches data")
}

impl<T: Scalar> LanguageModel<T> {
    /// Weights ~ N(0, 0.02), residual output projections scaled by
    /// 1/sqrt(2 n_layers), biases zero, layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let resid_std = INIT_STD / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let wte = normal_param(&mut rng, &[config.vocab_size, d], INIT_STD);
        let wpe = normal_param(&mut rng, &[config.context_window, d], INIT_STD);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_g: const_param(&[d], 1.0),
                ln1_b: const_param(&[d], 0.0),
                attn_w: normal_param(&mut rng, &[d, 3 * d], INIT_STD),
                attn_b: const_param(&[3 * d], 0.0),
                proj_w: normal_param(&mut rng, &[d, d], resid_std),
                proj_b: const_param(&[d], 0.0),
                ln2_g: const_param(&[d], 1.0),
                ln2_b: const_param(&[d], 0.0),
                fc_w: normal_param(&mut rng, &[d, 4 * d], INIT_STD),
                fc_b: const_param(&[4 * d], 0.0),
                fc2_w: normal_param(&mut rng, &[4 * d, d], resid_std),
                fc2_b: const_param(&[d], 0.0),
            })
            .collect();
        Ok(Self {
            config,
            wte,
            wpe,
            blocks,
            ln_f_g: const_param(&[d], 1.0),
            ln_f_b: const_param(&[d], 0.0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters in a fixed order with GPT-2 style names.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![("wte".to_string(), self.wte.clone()), ("wpe".to_string(), self.wpe.clone())];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("h.{i}.{s}");
            out.extend([
                (p("ln_1.weight"), b.ln1_g.clone()),
                (p("ln_1.bias"), b.ln1_b.clone()),
                (p("attn.c_attn.weight"), b.attn_w.clone()),
                (p("attn.c_attn.bias"), b.attn_b.clone()),
                (p("attn.c_proj.weight"), b.proj_w.clone()),
                (p("attn.c_proj.bias"), b.proj_b.clone()),
                (p("ln_2.weight"), b.ln2_g.clone()),
                (p("ln_2.bias"), b.ln2_b.clone()),
                (p("mlp.c_fc.weight"), b.fc_w.clone()),
                (p("mlp.c_fc.bias"), b.fc_b.clone()),
                (p("mlp.c_proj.weight"), b.fc2_w.clone()),
                (p("mlp.c_proj.bias"), b.fc2_b.clone()),
            ]);
        }
        out.push(("ln_f.weight".to_string(), self.ln_f_g.clone()));
        out.push(("ln_f.bias".to_string(), self.ln_f_b.clone()));
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.zero_grad());
    }

    /// Final hidden states for `batch` sequences of equal length `seq_len`
    /// laid out back to back in `ids`; shape `(batch, seq_len, d_model)`.
    fn hidden(&self, ids: &[TokenId], batch: usize, seq_len: usize) -> Result<Tensor<T>> {
        let cfg = &self.config;
        if seq_len > cfg.context_window {
            return Err(ModelError::SequenceTooLong { len: seq_len, context: cfg.context_window });
        }
        if seq_len == 0 || ids.len() != batch * seq_len {
            return Err(ModelError::SequenceTooShort { len: ids.len(), needed: batch * seq_len.max(1) });
        }
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let tokens: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();
        let mut x = Tensor::embedding(&self.wte, &tokens)?.add(&Tensor::embedding(&self.wpe, &positions)?)?;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let a = x.layer_norm(&b.ln1_g, &b.ln1_b, LN_EPS)?;
            let qkv = a.matmul(&b.attn_w)?.add(&b.attn_b)?;
            // (B*T, 3d) -> (3, B, H, T, dh)
            let qkv = qkv.reshape(&[batch, seq_len, 3, h, dh])?.permute(&[2, 0, 3, 1, 4])?;
            let part = |i: usize| -> Result<Tensor<T>> {
                Ok(qkv.narrow(0, i, 1)?.reshape(&[batch * h, seq_len, dh])?)
            };
            let (q, k, v) = (part(0)?, part(1)?, part(2)?);
            let att = q.matmul_nt(&k)?.scale(scale).causal_mask()?.softmax_rows()?;
            let y = att
                .matmul(&v)?
                .reshape(&[batch, h, seq_len, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[batch * seq_len, d])?;
            x = x.add(&y.matmul(&b.proj_w)?.add(&b.proj_b)?)?;
            let m = x.layer_norm(&b.ln2_g, &b.ln2_b, LN_EPS)?;
            let m = m.matmul(&b.fc_w)?.add(&b.fc_b)?.gelu();
            x = x.add(&m.matmul(&b.fc2_w)?.add(&b.fc2_b)?)?;
        }
        let x = x.layer_norm(&self.ln_f_g, &self.ln_f_b, LN_EPS)?;
        Ok(x.reshape(&[batch, seq_len, d])?)
    }

    /// Logits `(T, V)` for one sequence; row `t` scores the token after `t`.
    pub fn forward(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        let t = ids.len();
        let x = self.hidden(ids, 1, t)?.reshape(&[t, self.config.d_model])?;
        Ok(x.matmul_nt(&self.wte)?)
    }

    /// Mean next-token cross-entropy (nats) over `batch` equal-length
    /// sequences packed in `ids`, as a differentiable scalar.
    pub fn batch_loss(&self, ids: &[TokenId], batch: usize) -> Result<Tensor<T>> {
        let seq_len = ids.len() / batch.max(1);
        if seq_len < 2 {
            return Err(ModelError::SequenceTooShort { len: seq_len, needed: 2 });
        }
        let hidden = self.hidden(ids, batch, seq_len)?;
        let d = self.config.d_model;
        let inputs = hidden.narrow(1, 0, seq_len - 1)?.reshape(&[batch * (seq_len - 1), d])?;
        let logits = inputs.matmul_nt(&self.wte)?;
        let targets: Vec<usize> = ids
            .chunks_exact(seq_len)
            .flat_map(|row| row[1..].iter().map(|&t| t as usize))
            .collect();
        let loss = logits.cross_entropy_mean(&targets)?;
        let v = loss.item().as_f64();
        if !v.is_finite() {
            return Err(ModelError::NonFiniteLoss(v));
        }
        Ok(loss)
    }

    /// Mean next-token cross-entropy over a single sequence.
    pub fn lm_loss(&self, ids: &[TokenId]) -> Result<f64> {
        no_grad(|| Ok(self.batch_loss(ids, 1)?.item().as_f64()))
    }

    /// Per-sequence mean cross-entropy for `batch` packed sequences, without
    /// recording a graph.
    pub fn sequence_losses(&self, ids: &[TokenId], batch: usize) -> Result<Vec<f64>> {
        no_grad(|| {
            let seq_len = ids.len() / batch.max(1);
            if seq_len < 2 || ids.len() != batch * seq_len {
                return Err(ModelError::SequenceTooShort { len: seq_len, needed: 2 });
            }
            let hidden = self.hidden(ids, batch, seq_len)?;
            let d = self.config.d_model;
            let inputs = hidden.narrow(1, 0, seq_len - 1)?.reshape(&[batch * (seq_len - 1), d])?;
            let logits = inputs.matmul_nt(&self.wte)?;
            let targets: Vec<usize> = ids
                .chunks_exact(seq_len)
                .flat_map(|row| row[1..].iter().map(|&t| t as usize))
                .collect();
            let rows = cross_entropy_rows(&logits.data(), self.config.vocab_size, &targets)?;
            let losses: Vec<f64> = rows
                .chunks_exact(seq_len - 1)
                .map(|c| c.iter().sum::<f64>() / (seq_len - 1) as f64)
                .collect();
            if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
                return Err(ModelError::NonFiniteLoss(*bad));
            }
            Ok(losses)
        })
    }

    /// Autoregressive sampling. An empty prompt starts from `opts.start_token`.
    pub fn sample(&self, prompt: &[TokenId], n_tokens: usize, opts: &SampleOptions) -> Result<Vec<TokenId>> {
        if !opts.greedy && opts.temperature <= 0.0 {
            return Err(ModelError::InvalidConfig("temperature must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut ids: Vec<TokenId> = if prompt.is_empty() { vec![opts.start_token] } else { prompt.to_vec() };
        let v = self.config.vocab_size;
        let mut produced = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let start = ids.len().saturating_sub(self.config.context_window);
            let window = &ids[start..];
            let logits = no_grad(|| self.forward(window))?;
            let data = logits.data();
            let last = &data[(window.len() - 1) * v..window.len() * v];
            let next = if opts.greedy {
                argmax(last)
            } else {
                let max = last.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
                let weights: Vec<f64> = last
                    .iter()
                    .map(|x| ((x.as_f64() - max) / opts.temperature).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut pick = v - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                pick
            } as TokenId;
            drop(data);
            ids.push(next);
            produced.push(next);
        }
        Ok(produced)
    }

    /// Snapshot of parameters and (optionally) optimizer moments.
    pub fn to_checkpoint(&self, optimizer: Option<&AdamW<T>>, epoch: u64, meta: serde_json::Value) -> Checkpoint<T> {
        let named = self.named_parameters();
        let mut tensors: Vec<CheckpointTensor<T>> = named
            .iter()
            .map(|(name, t)| CheckpointTensor {
                name: name.clone(),
                role: TensorRole::Param,
                shape: t.shape().to_vec(),
                data: t.to_vec(),
            })
            .collect();
        let mut step = 0;
        if let Some(opt) = optimizer {
            let st = opt.state();
            step = st.step;
            for (role, bufs) in [(TensorRole::AdamM, &st.m), (TensorRole::AdamV, &st.v)] {
                for ((name, t), buf) in named.iter().zip(bufs) {
                    tensors.push(CheckpointTensor {
                        name: name.clone(),
                        role,
                        shape: t.shape().to_vec(),
                        data: buf.clone(),
                    });
                }
            }
        }
        Checkpoint {
            epoch,
            optimizer_step: step,
            tensors,
            meta,
        }
    }

    /// Overwrites parameters from a checkpoint; returns optimizer state when
    /// the checkpoint carries one.
    pub fn load_checkpoint(&self, ck: &Checkpoint<T>) -> Result<Option<AdamWState<T>>> {
        let named = self.named_parameters();
        let find = |role: TensorRole, name: &str, shape: &[usize]| -> Result<Option<Vec<T>>> {
            match ck.tensors.iter().find(|t| t.role == role && t.name == name) {
                Some(t) if t.shape == shape => Ok(Some(t.data.clone())),
                Some(t) => Err(ModelError::CheckpointMismatch(format!(
                    "{name}: shape {:?} vs {:?}",
                    t.shape, shape
                ))),
                None => Ok(None),
            }
        };
        let mut values = Vec::with_capacity(named.len());
        for (name, t) in &named {
            let data = find(TensorRole::Param, name, t.shape())?
                .ok_or_else(|| ModelError::CheckpointMismatch(format!("missing parameter {name}")))?;
            values.push(data);
        }
        for ((_, t), data) in named.iter().zip(values) {
            *t.data_mut() = data;
        }
        let has_opt = ck.tensors.iter().any(|t| t.role == TensorRole::AdamM);
        if !has_opt {
            return Ok(None);
        }
        let mut m = Vec::with_capacity(named.len());
        let mut v = Vec::with_capacity(named.len());
        for (name, t) in &named {
            let miss = || ModelError::CheckpointMismatch(format!("missing optimizer state for {name}"));
            m.push(find(TensorRole::AdamM, name, t.shape())?.ok_or_else(miss)?);
            v.push(find(TensorRole::AdamV, name, t.shape())?.ok_or_else(miss)?);
        }
        Ok(Some(AdamWState {
            step: ck.optimizer_step,
            m,
            v,
        }))
    }
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub temperature: f64,
    /// Argmax decoding, the zero-temperature limit.
    pub greedy: bool,
    pub seed: u64,
    pub start_token: TokenId,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            greedy: false,
            seed: 0,
            start_token: 0,
        }
    }
}

/// JSON sidecar stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub config: ModelConfig,
    pub author_id: String,
    pub seed: u64,
    pub mode: String,
    pub epochs_trained: usize,
    pub final_train_loss: f64,
    pub converged: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            context_window: 16,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            vocab_size: vocab,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = LanguageModel::<f32>::init(tiny(20), 7).unwrap();
        let b = LanguageModel::<f32>::init(tiny(20), 7).unwrap();
        for (x, y) in a.parameters().iter().zip(b.parameters()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig { d_model: 12, n_heads: 8, ..tiny(10) };
        assert!(matches!(LanguageModel::<f32>::init(cfg, 0), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn parameter_count_matches_tensors() {
        let m = LanguageModel::<f32>::init(tiny(37), 1).unwrap();
        let counted: usize = m.parameters().iter().map(|p| p.numel()).sum();
        assert_eq!(counted, m.config().parameter_count());
        // exactly one vocab x d matrix
        let big = m.parameters().iter().filter(|p| p.shape() == [37, 16]).count();
        assert_eq!(big, 1);
    }

    #[test]
    fn full_scale_parameter_count() {
        // wte + wpe + 8 blocks + final layer norm
        let cfg = ModelConfig::full_scale(50257);
        assert_eq!(cfg.parameter_count(), 6_432_896 + 131_072 + 8 * 198_272 + 256);
    }

    #[test]
    fn forward_shapes_and_context_limit() {
        let m = LanguageModel::<f32>::init(tiny(11), 3).unwrap();
        assert_eq!(m.forward(&[4]).unwrap().shape(), &[1, 11]);
        assert_eq!(m.forward(&[1, 2, 3]).unwrap().shape(), &[3, 11]);
        let long = vec![1; 17];
        assert!(matches!(m.forward(&long), Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn causality() {
        let m = LanguageModel::<f64>::init(tiny(11), 5).unwrap();
        let base = [1u32, 5, 3, 9, 2, 7];
        let l0 = m.forward(&base).unwrap().to_vec();
        for k in 0..base.len() {
            let mut alt = base;
            alt[k] = (alt[k] + 4) % 11;
            let l1 = m.forward(&alt).unwrap().to_vec();
            for row in 0..base.len() {
                let same = l0[row * 11..(row + 1) * 11] == l1[row * 11..(row + 1) * 11];
                assert_eq!(same, row < k, "row {row} perturbed at {k}");
            }
        }
    }

    #[test]
    fn initial_loss_near_uniform() {
        let m = LanguageModel::<f32>::init(tiny(256), 11).unwrap();
        let ids: Vec<u32> = (0..16).map(|i| (i * 37 % 256) as u32).collect();
        let loss = m.lm_loss(&ids).unwrap();
        let ln_v = 256f64.ln();
        assert!(loss > 0.9 * ln_v && loss < 1.2 * ln_v, "loss {loss}");
    }

    #[test]
    fn batched_losses_match_single() {
        let m = LanguageModel::<f32>::init(tiny(30), 2).unwrap();
        let a: Vec<u32> = (0..8).map(|i| i * 3 % 30).collect();
        let b: Vec<u32> = (0..8).map(|i| (i * 7 + 1) % 30).collect();
        let packed: Vec<u32> = a.iter().chain(&b).copied().collect();
        let both = m.sequence_losses(&packed, 2).unwrap();
        assert!((both[0] - m.lm_loss(&a).unwrap()).abs() < 1e-6);
        assert!((both[1] - m.lm_loss(&b).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let m = LanguageModel::<f32>::init(tiny(13), 4).unwrap();
        let ids = [1u32, 2, 3, 4, 5, 6, 7, 8];
        m.batch_loss(&ids, 2).unwrap().backward().unwrap();
        for (name, p) in m.named_parameters() {
            assert!(p.grad().iter().any(|g| *g != 0.0), "{name} has all-zero grad");
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let m = LanguageModel::<f32>::init(tiny(13), 4).unwrap();
        let opts = SampleOptions { seed: 9, ..Default::default() };
        let a = m.sample(&[1, 2], 20, &opts).unwrap();
        let b = m.sample(&[1, 2], 20, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let greedy = SampleOptions { greedy: true, ..opts };
        assert_eq!(m.sample(&[], 3, &greedy).unwrap(), m.sample(&[], 3, &greedy).unwrap());
        let bad = SampleOptions { temperature: 0.0, ..opts };
        assert!(m.sample(&[1], 1, &bad).is_err());
    }

    #[test]
    fn checkpoint_restores_weights() {
        let a = LanguageModel::<f32>::init(tiny(13), 4).unwrap();
        let b = LanguageModel::<f32>::init(tiny(13), 5).unwrap();
        let ck = a.to_checkpoint(None, 3, serde_json::Value::Null);
        let restored = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(b.load_checkpoint(&restored).unwrap().is_none());
        assert_eq!(a.forward(&[1, 2, 3]).unwrap().to_vec(), b.forward(&[1, 2, 3]).unwrap().to_vec());
        let other = LanguageModel::<f32>::init(tiny(14), 5).unwrap();
        assert!(other.load_checkpoint(&restored).is_err());
    }
}
