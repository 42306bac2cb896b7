//! Transformer text encoder with adapter insertion points and a small MLM
//! pretraining stage that produces the frozen backbone.
//!
//! Layout is post-LN: each sublayer is `LayerNorm(x + Sublayer(x))`, and an
//! adapter (when conditioning is supplied) runs on the normalized output of
//! both the attention and feed-forward sublayers, two insertion points per
//! layer. Inputs are single streams `[CLS] a [SEP]` or `[CLS] a [SEP] b
//! [SEP]`; the classifier reads the final-layer state at position 0.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{BoundAdapters, LAYER_NORM_EPS};
use crate::error::{CoreError, Result};
use crate::tensor::adam::{AdamConfig, AdamState};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{seeded_rng, Binder, Tensor};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
/// First vocabulary id available to content tokens.
pub const FIRST_CONTENT_ID: u32 = 4;

pub const MLM_MASK_RATE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { num_layers: 2, num_heads: 4, hidden: 64, ffn: 128, vocab: 512, max_seq: 32 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.num_heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.vocab <= FIRST_CONTENT_ID as usize || self.max_seq < 2 {
            return Err(CoreError::InvalidConfig("degenerate encoder configuration".into()));
        }
        Ok(())
    }

    /// Adapter insertion points: one after attention, one after the FFN.
    pub fn num_insertion_points(&self) -> usize {
        2 * self.num_layers
    }
}

// No key bias: a shared shift of every key adds the same constant to each
// softmax row, so the parameter would be exactly inert.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

/// Encoder parameters plus the MLM output head used only during pretraining.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub mlm_w: Tensor,
    pub mlm_b: Tensor,
    frozen: bool,
}

impl EncoderWeights {
    pub fn init(config: EncoderConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let std = 0.02;
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: Tensor::randn(vec![d, d], std, rng).trainable(),
                bq: Tensor::zeros(vec![d]).trainable(),
                wk: Tensor::randn(vec![d, d], std, rng).trainable(),
                wv: Tensor::randn(vec![d, d], std, rng).trainable(),
                bv: Tensor::zeros(vec![d]).trainable(),
                wo: Tensor::randn(vec![d, d], std, rng).trainable(),
                bo: Tensor::zeros(vec![d]).trainable(),
                ln1_gamma: Tensor::ones(vec![d]).trainable(),
                ln1_beta: Tensor::zeros(vec![d]).trainable(),
                w1: Tensor::randn(vec![d, config.ffn], std, rng).trainable(),
                b1: Tensor::zeros(vec![config.ffn]).trainable(),
                w2: Tensor::randn(vec![config.ffn, d], std, rng).trainable(),
                b2: Tensor::zeros(vec![d]).trainable(),
                ln2_gamma: Tensor::ones(vec![d]).trainable(),
                ln2_beta: Tensor::zeros(vec![d]).trainable(),
            })
            .collect();
        Ok(EncoderWeights {
            config,
            token_emb: Tensor::randn(vec![config.vocab, d], std, rng).trainable(),
            pos_emb: Tensor::randn(vec![config.max_seq, d], std, rng).trainable(),
            layers,
            mlm_w: Tensor::randn(vec![d, config.vocab], std, rng).trainable(),
            mlm_b: Tensor::zeros(vec![config.vocab]).trainable(),
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter as non-trainable. Frozen weights receive no
    /// gradient anywhere downstream.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for (_, t) in self.named_tensors_mut() {
            t.requires_grad = false;
        }
    }

    /// Trainable copy of the backbone for full fine-tuning; the MLM head
    /// stays frozen since the task model never uses it.
    pub fn thawed_clone(&self) -> EncoderWeights {
        let mut w = self.clone();
        w.frozen = false;
        for (name, t) in w.named_tensors_mut() {
            t.requires_grad = !name.starts_with("enc/mlm");
        }
        w
    }

    /// Parameter count of the task-relevant encoder (MLM head excluded).
    pub fn param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(n, _)| !n.starts_with("enc/mlm"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// FNV-1a over the exact bit patterns of every parameter; used to assert
    /// that frozen weights never change.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.named_tensors() {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in t.values() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("enc/token_emb".into(), &self.token_emb),
            ("enc/pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("enc/l{i}/wq"), &l.wq));
            out.push((format!("enc/l{i}/bq"), &l.bq));
            out.push((format!("enc/l{i}/wk"), &l.wk));
            out.push((format!("enc/l{i}/wv"), &l.wv));
            out.push((format!("enc/l{i}/bv"), &l.bv));
            out.push((format!("enc/l{i}/wo"), &l.wo));
            out.push((format!("enc/l{i}/bo"), &l.bo));
            out.push((format!("enc/l{i}/ln1_gamma"), &l.ln1_gamma));
            out.push((format!("enc/l{i}/ln1_beta"), &l.ln1_beta));
            out.push((format!("enc/l{i}/w1"), &l.w1));
            out.push((format!("enc/l{i}/b1"), &l.b1));
            out.push((format!("enc/l{i}/w2"), &l.w2));
            out.push((format!("enc/l{i}/b2"), &l.b2));
            out.push((format!("enc/l{i}/ln2_gamma"), &l.ln2_gamma));
            out.push((format!("enc/l{i}/ln2_beta"), &l.ln2_beta));
        }
        out.push(("enc/mlm_w".into(), &self.mlm_w));
        out.push(("enc/mlm_b".into(), &self.mlm_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("enc/token_emb".into(), &mut self.token_emb),
            ("enc/pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("enc/l{i}/wq"), &mut l.wq));
            out.push((format!("enc/l{i}/bq"), &mut l.bq));
            out.push((format!("enc/l{i}/wk"), &mut l.wk));
            out.push((format!("enc/l{i}/wv"), &mut l.wv));
            out.push((format!("enc/l{i}/bv"), &mut l.bv));
            out.push((format!("enc/l{i}/wo"), &mut l.wo));
            out.push((format!("enc/l{i}/bo"), &mut l.bo));
            out.push((format!("enc/l{i}/ln1_gamma"), &mut l.ln1_gamma));
            out.push((format!("enc/l{i}/ln1_beta"), &mut l.ln1_beta));
            out.push((format!("enc/l{i}/w1"), &mut l.w1));
            out.push((format!("enc/l{i}/b1"), &mut l.b1));
            out.push((format!("enc/l{i}/w2"), &mut l.w2));
            out.push((format!("enc/l{i}/b2"), &mut l.b2));
            out.push((format!("enc/l{i}/ln2_gamma"), &mut l.ln2_gamma));
            out.push((format!("enc/l{i}/ln2_beta"), &mut l.ln2_beta));
        }
        out.push(("enc/mlm_w".into(), &mut self.mlm_w));
        out.push(("enc/mlm_b".into(), &mut self.mlm_b));
        out
    }
}

// ── token sequences ─────────────────────────────────────────────────────

/// One tokenized input: `[CLS]` first, fields separated and terminated by
/// `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn single(field: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(field.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(field);
        ids.push(SEP);
        TokenSequence { ids }
    }

    pub fn pair(a: &[u32], b: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(a.len() + b.len() + 3);
        ids.push(CLS);
        ids.extend_from_slice(a);
        ids.push(SEP);
        ids.extend_from_slice(b);
        ids.push(SEP);
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Content length excluding `[CLS]`/`[SEP]` framing.
    pub fn content_len(&self) -> usize {
        self.ids.iter().filter(|&&t| t != CLS && t != SEP && t != PAD).count()
    }
}

/// A padded batch in `(batch * seq, )` layout plus per-example valid lengths.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn build(seqs: &[&TokenSequence], config: &EncoderConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(CoreError::EmptyInput("token batch"));
        }
        let mut seq = 0;
        for s in seqs {
            if s.len() > config.max_seq {
                return Err(CoreError::SequenceTooLong { len: s.len(), max: config.max_seq });
            }
            for &id in &s.ids {
                if id as usize >= config.vocab {
                    return Err(CoreError::TokenOutOfRange { id, vocab: config.vocab });
                }
            }
            seq = seq.max(s.len());
        }
        let batch = seqs.len();
        let mut ids = vec![PAD as usize; batch * seq];
        let mut lens = Vec::with_capacity(batch);
        for (b, s) in seqs.iter().enumerate() {
            for (i, &id) in s.ids.iter().enumerate() {
                ids[b * seq + i] = id as usize;
            }
            lens.push(s.len());
        }
        Ok(TokenBatch { ids, lens, batch, seq })
    }
}

// ── forward pass ────────────────────────────────────────────────────────

pub struct EncodeOutput {
    /// Final-layer states, `(batch * seq, hidden)`.
    pub states: NodeId,
    /// Position-0 state per example, `(batch, hidden)`.
    pub h_cls: NodeId,
    pub batch: usize,
    pub seq: usize,
}

/// Runs the encoder over a batch, optionally threading every sublayer output
/// through an adapter bundle. With `adapters` absent this is the bare frozen
/// encoder; with a freshly initialized bundle the outputs are identical.
pub fn encode(binder: &mut Binder, weights: &EncoderWeights, batch: &TokenBatch, adapters: Option<&BoundAdapters>) -> Result<EncodeOutput> {
    let cfg = &weights.config;
    if batch.seq > cfg.max_seq {
        return Err(CoreError::SequenceTooLong { len: batch.seq, max: cfg.max_seq });
    }
    if let Some(a) = adapters {
        if a.num_points() != cfg.num_insertion_points() {
            return Err(CoreError::ShapeMismatch {
                op: "encode",
                detail: format!("{} adapter points for {} insertion points", a.num_points(), cfg.num_insertion_points()),
            });
        }
    }

    let tok_table = binder.leaf("enc/token_emb", &weights.token_emb);
    let pos_table = binder.leaf("enc/pos_emb", &weights.pos_emb);
    let tape = &mut *binder.tape;
    let tok = tape.embedding(tok_table, &batch.ids)?;
    let positions: Vec<usize> = (0..batch.batch * batch.seq).map(|i| i % batch.seq).collect();
    let pos = tape.embedding(pos_table, &positions)?;
    let mut x = tape.add(tok, pos)?;

    for (li, layer) in weights.layers.iter().enumerate() {
        let wq = binder.leaf(&format!("enc/l{li}/wq"), &layer.wq);
        let bq = binder.leaf(&format!("enc/l{li}/bq"), &layer.bq);
        let wk = binder.leaf(&format!("enc/l{li}/wk"), &layer.wk);
        let wv = binder.leaf(&format!("enc/l{li}/wv"), &layer.wv);
        let bv = binder.leaf(&format!("enc/l{li}/bv"), &layer.bv);
        let wo = binder.leaf(&format!("enc/l{li}/wo"), &layer.wo);
        let bo = binder.leaf(&format!("enc/l{li}/bo"), &layer.bo);
        let ln1_g = binder.leaf(&format!("enc/l{li}/ln1_gamma"), &layer.ln1_gamma);
        let ln1_b = binder.leaf(&format!("enc/l{li}/ln1_beta"), &layer.ln1_beta);
        let w1 = binder.leaf(&format!("enc/l{li}/w1"), &layer.w1);
        let b1 = binder.leaf(&format!("enc/l{li}/b1"), &layer.b1);
        let w2 = binder.leaf(&format!("enc/l{li}/w2"), &layer.w2);
        let b2 = binder.leaf(&format!("enc/l{li}/b2"), &layer.b2);
        let ln2_g = binder.leaf(&format!("enc/l{li}/ln2_gamma"), &layer.ln2_gamma);
        let ln2_b = binder.leaf(&format!("enc/l{li}/ln2_beta"), &layer.ln2_beta);

        let tape = &mut *binder.tape;
        let q = tape.matmul(x, wq)?;
        let q = tape.add_rowvec(q, bq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let v = tape.add_rowvec(v, bv)?;
        let attn = tape.attention(q, k, v, cfg.num_heads, batch.batch, batch.seq, &batch.lens)?;
        let attn = tape.matmul(attn, wo)?;
        let attn = tape.add_rowvec(attn, bo)?;
        let res = tape.add(x, attn)?;
        let mut h = tape.layer_norm(res, ln1_g, ln1_b, LAYER_NORM_EPS)?;
        if let Some(a) = adapters {
            h = a.apply(tape, 2 * li, h)?;
        }

        let f = tape.matmul(h, w1)?;
        let f = tape.add_rowvec(f, b1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, w2)?;
        let f = tape.add_rowvec(f, b2)?;
        let res2 = tape.add(h, f)?;
        let mut h2 = tape.layer_norm(res2, ln2_g, ln2_b, LAYER_NORM_EPS)?;
        if let Some(a) = adapters {
            h2 = a.apply(tape, 2 * li + 1, h2)?;
        }
        x = h2;
    }

    let cls_rows: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq).collect();
    let h_cls = binder.tape.select_rows(x, &cls_rows)?;
    Ok(EncodeOutput { states: x, h_cls, batch: batch.batch, seq: batch.seq })
}

/// Convenience non-training forward: values of per-token states and h_cls.
pub fn encode_values(weights: &EncoderWeights, batch: &TokenBatch, adapters_weights: Option<(&crate::adapters::ConditionalAdapterWeights, &[f64])>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let bound = match adapters_weights {
        None => None,
        Some((w, z)) => {
            let zn = binder.tape.constant(vec![1, z.len()], z.to_vec())?;
            Some(w.bind(&mut binder, zn)?)
        }
    };
    let out = encode(&mut binder, weights, batch, bound.as_ref())?;
    Ok((tape.value(out.states).to_vec(), tape.value(out.h_cls).to_vec()))
}

// ── MLM pretraining ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlmReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub seed: u64,
}

/// Bernoulli masking of non-special tokens at [`MLM_MASK_RATE`]; returns the
/// masked copy together with (flat position, original id) targets.
pub fn apply_mlm_mask(seq: &TokenSequence, rng: &mut ChaCha12Rng) -> (TokenSequence, Vec<(usize, u32)>) {
    let mut masked = seq.clone();
    let mut targets = Vec::new();
    for (i, id) in masked.ids.iter_mut().enumerate() {
        if *id == CLS || *id == SEP || *id == PAD {
            continue;
        }
        if rng.gen::<f64>() < MLM_MASK_RATE {
            targets.push((i, *id));
            *id = MASK;
        }
    }
    (masked, targets)
}

/// Trains the encoder to predict masked tokens on the given corpus, then
/// freezes it. `steps == 0` returns the random initialization, frozen.
pub fn mlm_pretrain(corpus: &[TokenSequence], config: EncoderConfig, steps: usize, batch_size: usize, lr: f64, seed: u64) -> Result<(EncoderWeights, MlmReport)> {
    if corpus.is_empty() {
        return Err(CoreError::EmptyInput("MLM corpus"));
    }
    let mut init_rng = seeded_rng(seed, "mlm-init");
    let mut weights = EncoderWeights::init(config, &mut init_rng)?;
    let mut rng = seeded_rng(seed, "mlm-steps");
    let mut adam = AdamState::new(AdamConfig::with_lr(lr));
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    for step in 0..steps {
        // draw a batch with at least one masked position
        let mut chosen: Vec<TokenSequence> = Vec::with_capacity(batch_size);
        let mut targets: Vec<(usize, usize, u32)> = Vec::new();
        let mut guard = 0;
        while chosen.len() < batch_size {
            let idx = rng.gen_range(0..corpus.len());
            let (masked, seq_targets) = apply_mlm_mask(&corpus[idx], &mut rng);
            if seq_targets.is_empty() && guard < 16 {
                guard += 1;
                continue;
            }
            guard = 0;
            let b = chosen.len();
            for (pos, id) in seq_targets {
                targets.push((b, pos, id));
            }
            chosen.push(masked);
        }
        if targets.is_empty() {
            continue;
        }
        let refs: Vec<&TokenSequence> = chosen.iter().collect();
        let batch = TokenBatch::build(&refs, &weights.config)?;
        let rows: Vec<usize> = targets.iter().map(|(b, pos, _)| b * batch.seq + pos).collect();
        let labels: Vec<usize> = targets.iter().map(|(_, _, id)| *id as usize).collect();

        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let out = encode(&mut binder, &weights, &batch, None)?;
        let mlm_w = binder.leaf("enc/mlm_w", &weights.mlm_w);
        let mlm_b = binder.leaf("enc/mlm_b", &weights.mlm_b);
        let tape_ref = &mut *binder.tape;
        let picked = tape_ref.select_rows(out.states, &rows)?;
        let logits = tape_ref.matmul(picked, mlm_w)?;
        let logits = tape_ref.add_rowvec(logits, mlm_b)?;
        let losses = tape_ref.cross_entropy(logits, &labels)?;
        let loss = tape_ref.mean_all(losses)?;
        let loss_value = tape_ref.value(loss)[0];
        if step == 0 {
            initial_loss = loss_value;
        }
        final_loss = loss_value;

        let mut grads = binder.tape.backward(loss)?;
        let mut grad_map = binder.collect_gradients(&mut grads);
        for (name, tensor) in weights.named_tensors_mut() {
            if let Some(g) = grad_map.remove(&name) {
                tensor.grad = Some(g);
                adam.step_param(&name, tensor, 1.0)?;
            }
        }
    }

    weights.freeze();
    Ok((weights, MlmReport { steps, initial_loss, final_loss, seed }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterVariant, ConditionalAdapterWeights};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig { num_layers: 1, num_heads: 2, hidden: 16, ffn: 24, vocab: 64, max_seq: 12 }
    }

    fn some_batch(cfg: &EncoderConfig) -> TokenBatch {
        let a = TokenSequence::single(&[10, 11, 12, 13]);
        let b = TokenSequence::pair(&[20, 21], &[22, 23, 24]);
        TokenBatch::build(&[&a, &b], cfg).unwrap()
    }

    #[test]
    fn sequence_layout() {
        let s = TokenSequence::single(&[7, 8]);
        assert_eq!(s.ids, vec![CLS, 7, 8, SEP]);
        let p = TokenSequence::pair(&[7], &[8, 9]);
        assert_eq!(p.ids, vec![CLS, 7, SEP, 8, 9, SEP]);
        assert_eq!(p.content_len(), 3);
    }

    #[test]
    fn batch_validation() {
        let cfg = tiny_config();
        let long = TokenSequence::single(&[5; 20]);
        assert!(matches!(TokenBatch::build(&[&long], &cfg), Err(CoreError::SequenceTooLong { .. })));
        let oov = TokenSequence::single(&[200]);
        assert!(matches!(TokenBatch::build(&[&oov], &cfg), Err(CoreError::TokenOutOfRange { .. })));
    }

    #[test]
    fn encode_shapes() {
        let cfg = tiny_config();
        let mut rng = seeded_rng(1, "enc");
        let weights = EncoderWeights::init(cfg, &mut rng).unwrap();
        let batch = some_batch(&cfg);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let out = encode(&mut binder, &weights, &batch, None).unwrap();
        assert_eq!(tape.shape(out.states), &[2 * batch.seq, 16]);
        assert_eq!(tape.shape(out.h_cls), &[2, 16]);
    }

    #[test]
    fn encode_is_pure_on_frozen_weights() {
        let cfg = tiny_config();
        let mut rng = seeded_rng(2, "enc");
        let mut weights = EncoderWeights::init(cfg, &mut rng).unwrap();
        weights.freeze();
        let batch = some_batch(&cfg);
        let (s1, c1) = encode_values(&weights, &batch, None).unwrap();
        let (s2, c2) = encode_values(&weights, &batch, None).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn identity_adapters_leave_encode_unchanged() {
        let cfg = tiny_config();
        let mut rng = seeded_rng(3, "enc");
        let mut weights = EncoderWeights::init(cfg, &mut rng).unwrap();
        weights.freeze();
        let batch = some_batch(&cfg);
        let (bare_states, bare_cls) = encode_values(&weights, &batch, None).unwrap();
        for variant in [AdapterVariant::CaMtl, AdapterVariant::Hypernet] {
            let bundle = ConditionalAdapterWeights::init(variant, 16, 8, 6, cfg.num_insertion_points(), &mut rng);
            let z: Vec<f64> = (0..6).map(|i| (i as f64) - 2.5).collect();
            let (states, cls) = encode_values(&weights, &batch, Some((&bundle, &z))).unwrap();
            for (a, b) in states.iter().zip(&bare_states) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in cls.iter().zip(&bare_cls) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_single_head_attention_is_value_projection() {
        // With one token and one head, softmax over the single key is 1, so
        // the attention output equals that token's value projection.
        let cfg = EncoderConfig { num_layers: 1, num_heads: 1, hidden: 8, ffn: 8, vocab: 16, max_seq: 4 };
        let mut rng = seeded_rng(4, "enc");
        let weights = EncoderWeights::init(cfg, &mut rng).unwrap();
        let seq = TokenSequence { ids: vec![CLS] };
        let batch = TokenBatch::build(&[&seq], &cfg).unwrap();

        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let tok_table = binder.leaf("tok", &weights.token_emb);
        let pos_table = binder.leaf("pos", &weights.pos_emb);
        let tape = &mut *binder.tape;
        let tok = tape.embedding(tok_table, &batch.ids).unwrap();
        let pos = tape.embedding(pos_table, &[0]).unwrap();
        let x = tape.add(tok, pos).unwrap();
        let l = &weights.layers[0];
        let wq = tape.leaf(&l.wq);
        let wk = tape.leaf(&l.wk);
        let wv = tape.leaf(&l.wv);
        let q = tape.matmul(x, wq).unwrap();
        let k = tape.matmul(x, wk).unwrap();
        let v = tape.matmul(x, wv).unwrap();
        let attn = tape.attention(q, k, v, 1, 1, 1, &[1]).unwrap();
        assert_eq!(tape.value(attn), tape.value(v));
    }

    #[test]
    fn mask_rate_monte_carlo() {
        let mut rng = seeded_rng(5, "mask");
        let mut eligible = 0usize;
        let mut masked = 0usize;
        for _ in 0..1000 {
            let content: Vec<u32> = (0..10).map(|i| 10 + i).collect();
            let seq = TokenSequence::single(&content);
            let (m, targets) = apply_mlm_mask(&seq, &mut rng);
            eligible += seq.content_len();
            masked += targets.len();
            for (pos, id) in targets {
                assert_eq!(m.ids[pos], MASK);
                assert_eq!(seq.ids[pos], id);
            }
        }
        let rate = masked as f64 / eligible as f64;
        assert!((rate - MLM_MASK_RATE).abs() < 0.02, "measured rate {rate}");
    }

    #[test]
    fn mlm_zero_steps_returns_frozen_random_init() {
        let cfg = tiny_config();
        let corpus = vec![TokenSequence::single(&[10, 11, 12])];
        let (w, report) = mlm_pretrain(&corpus, cfg, 0, 4, 1e-3, 9).unwrap();
        assert!(w.is_frozen());
        assert_eq!(report.steps, 0);
        let mut rng = seeded_rng(9, "mlm-init");
        let fresh = EncoderWeights::init(cfg, &mut rng).unwrap();
        assert_eq!(w.token_emb.values(), fresh.token_emb.values());
    }

    #[test]
    fn mlm_loss_decreases() {
        let cfg = tiny_config();
        let mut rng = seeded_rng(6, "corpus");
        let corpus: Vec<TokenSequence> = (0..64)
            .map(|_| {
                let n = rng.gen_range(5..9);
                // structured content: ascending runs the model can learn
                let start = rng.gen_range(10..40);
                let content: Vec<u32> = (0..n).map(|i| (start + i) as u32 % 60).collect();
                TokenSequence::single(&content)
            })
            .collect();
        let (w, report) = mlm_pretrain(&corpus, cfg, 120, 8, 2e-3, 11).unwrap();
        assert!(w.is_frozen());
        assert!(report.final_loss < report.initial_loss, "{} -> {}", report.initial_loss, report.final_loss);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(mlm_pretrain(&[], tiny_config(), 10, 4, 1e-3, 1).is_err());
    }

    #[test]
    fn frozen_encoder_gets_no_gradients() {
        let cfg = tiny_config();
        let mut rng = seeded_rng(7, "enc");
        let mut weights = EncoderWeights::init(cfg, &mut rng).unwrap();
        weights.freeze();
        let batch = some_batch(&cfg);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let out = encode(&mut binder, &weights, &batch, None).unwrap();
        assert!(binder.bound().is_empty());
        assert!(!tape.requires_grad(out.h_cls));
    }
}
