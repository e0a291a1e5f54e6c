use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenBatch, MASK, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::tensor::{Adam, Module, Param, ParamGroup, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        TextEncoderConfig {
            vocab_size,
            dim: 64,
            heads: 4,
            layers: 2,
            max_len: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "text encoder width {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size <= NUM_SPECIAL || self.max_len < 2 || self.layers == 0 {
            return Err(Error::Config(format!(
                "invalid text encoder shape {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    wq: Param,
    bq: Param,
    wk: Param,
    bk: Param,
    wv: Param,
    bv: Param,
    wo: Param,
    bo: Param,
    ln1_g: Param,
    ln1_b: Param,
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
    ln2_g: Param,
    ln2_b: Param,
}

impl Block {
    fn new(prefix: &str, f: usize, rng: &mut ChaCha8Rng) -> Self {
        let p = |name: &str, t: Tensor| Param::new(format!("{prefix}.{name}"), ParamGroup::Lm, t);
        Block {
            wq: p("wq", Tensor::glorot(f, f, rng)),
            bq: p("bq", Tensor::zeros(&[f])),
            wk: p("wk", Tensor::glorot(f, f, rng)),
            bk: p("bk", Tensor::zeros(&[f])),
            wv: p("wv", Tensor::glorot(f, f, rng)),
            bv: p("bv", Tensor::zeros(&[f])),
            wo: p("wo", Tensor::glorot(f, f, rng)),
            bo: p("bo", Tensor::zeros(&[f])),
            ln1_g: p("ln1.g", Tensor::full(&[f], 1.0)),
            ln1_b: p("ln1.b", Tensor::zeros(&[f])),
            w1: p("w1", Tensor::glorot(f, 4 * f, rng)),
            b1: p("b1", Tensor::zeros(&[4 * f])),
            w2: p("w2", Tensor::glorot(4 * f, f, rng)),
            b2: p("b2", Tensor::zeros(&[f])),
            ln2_g: p("ln2.g", Tensor::full(&[f], 1.0)),
            ln2_b: p("ln2.b", Tensor::zeros(&[f])),
        }
    }

    fn params(&self) -> [&Param; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_g,
            &self.ln1_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_g,
            &self.ln2_b,
        ]
    }

    fn params_mut(&mut self) -> [&mut Param; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }

    fn linear(tape: &Tape, x: Var, w: &Param, b: &Param) -> Result<Var> {
        let y = tape.matmul(x, tape.param(w))?;
        tape.add_bias(y, tape.param(b))
    }

    /// Post-norm block: `x = LN(x + attn(x)); x = LN(x + ffn(x))`.
    fn forward(
        &self,
        tape: &Tape,
        x: Var,
        rows: usize,
        seq: usize,
        heads: usize,
        valid: &[bool],
    ) -> Result<Var> {
        let f = tape.shape(x)[1];
        let d = f / heads;
        let q = tape.split_heads(Self::linear(tape, x, &self.wq, &self.bq)?, rows, seq, heads)?;
        let k = tape.split_heads(Self::linear(tape, x, &self.wk, &self.bk)?, rows, seq, heads)?;
        let v = tape.split_heads(Self::linear(tape, x, &self.wv, &self.bv)?, rows, seq, heads)?;
        let scores = tape.scale(tape.bmm(q, k, true)?, 1.0 / (d as f64).sqrt());
        let attn = tape.masked_softmax(scores, valid)?;
        let ctx = tape.merge_heads(tape.bmm(attn, v, false)?, rows, seq, heads)?;
        let o = Self::linear(tape, ctx, &self.wo, &self.bo)?;
        let x = tape.layer_norm(
            tape.add(x, o)?,
            tape.param(&self.ln1_g),
            tape.param(&self.ln1_b),
        )?;
        let hidden = tape.gelu(Self::linear(tape, x, &self.w1, &self.b1)?);
        let ffn = Self::linear(tape, hidden, &self.w2, &self.b2)?;
        tape.layer_norm(
            tape.add(x, ffn)?,
            tape.param(&self.ln2_g),
            tape.param(&self.ln2_b),
        )
    }
}

/// Small post-norm transformer encoder with learned positions and a
/// masked-language-model head.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderModel {
    config: TextEncoderConfig,
    tok_emb: Param,
    pos_emb: Param,
    emb_ln_g: Param,
    emb_ln_b: Param,
    blocks: Vec<Block>,
    mlm_w: Param,
    mlm_b: Param,
}

/// Result of one masked-language-model update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmStep {
    pub loss: f64,
    pub masked: usize,
    /// No token was masked; the loss is zero and nothing was updated.
    pub empty: bool,
}

impl TextEncoderModel {
    /// Parameters are named `{prefix}.…`; the MLM head belongs to the
    /// encoder's decoder group so it can be trained or frozen separately.
    pub fn new(config: TextEncoderConfig, prefix: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.dim;
        let lm = |name: &str, t: Tensor| Param::new(format!("{prefix}.{name}"), ParamGroup::Lm, t);
        let tok_emb = lm(
            "tok_emb",
            Tensor::uniform(&[config.vocab_size, f], 0.5, &mut rng),
        );
        let pos_emb = lm(
            "pos_emb",
            Tensor::uniform(&[config.max_len, f], 0.05, &mut rng),
        );
        let blocks = (0..config.layers)
            .map(|i| Block::new(&format!("{prefix}.block{i}"), f, &mut rng))
            .collect();
        let head = |name: &str, t: Tensor| {
            Param::new(format!("{prefix}.{name}"), ParamGroup::LmDecoder, t)
        };
        Ok(TextEncoderModel {
            tok_emb,
            pos_emb,
            emb_ln_g: lm("emb_ln.g", Tensor::full(&[f], 1.0)),
            emb_ln_b: lm("emb_ln.b", Tensor::zeros(&[f])),
            blocks,
            mlm_w: head("mlm.w", Tensor::glorot(f, config.vocab_size, &mut rng)),
            mlm_b: head("mlm.b", Tensor::zeros(&[config.vocab_size])),
            config,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Final hidden states of every position, `[rows * width, dim]`.
    pub fn hidden_states(&self, tape: &Tape, batch: &TokenBatch) -> Result<Var> {
        let (rows, seq) = (batch.rows, batch.width);
        if seq > self.config.max_len {
            return Err(Error::shape(
                "encode",
                &[rows, seq],
                &[rows, self.config.max_len],
            ));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                op: "encode",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        let tok = tape.gather_rows(tape.param(&self.tok_emb), &batch.ids)?;
        let positions: Vec<usize> = (0..rows).flat_map(|_| 0..seq).collect();
        let pos = tape.gather_rows(tape.param(&self.pos_emb), &positions)?;
        let mut x = tape.layer_norm(
            tape.add(tok, pos)?,
            tape.param(&self.emb_ln_g),
            tape.param(&self.emb_ln_b),
        )?;
        let valid = batch.key_valid();
        let heads = self.config.heads;
        let key_valid: Vec<bool> = (0..rows)
            .flat_map(|r| {
                let row = &valid[r * seq..(r + 1) * seq];
                (0..heads).flat_map(move |_| row.iter().copied())
            })
            .collect();
        for block in &self.blocks {
            x = block.forward(tape, x, rows, seq, heads, &key_valid)?;
        }
        Ok(x)
    }

    /// Final hidden state at the `[CLS]` position of each row, `[rows, dim]`.
    pub fn encode_cls(&self, tape: &Tape, batch: &TokenBatch) -> Result<Var> {
        let h = self.hidden_states(tape, batch)?;
        let cls: Vec<usize> = (0..batch.rows).map(|r| r * batch.width).collect();
        tape.gather_rows(h, &cls)
    }

    /// Replaces each non-special token with `[MASK]` with probability
    /// `mask_prob`; returns the masked batch and `(flat position, original id)`.
    pub fn mask_tokens(
        batch: &TokenBatch,
        mask_prob: f64,
        seed: u64,
    ) -> Result<(TokenBatch, Vec<(usize, usize)>)> {
        if !(mask_prob > 0.0 && mask_prob < 1.0) {
            return Err(Error::contract(format!(
                "mask_prob must lie in (0, 1), got {mask_prob}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masked = batch.clone();
        let mut targets = Vec::new();
        for (i, id) in masked.ids.iter_mut().enumerate() {
            if *id >= NUM_SPECIAL && rng.gen_bool(mask_prob) {
                targets.push((i, *id));
                *id = MASK;
            }
        }
        Ok((masked, targets))
    }

    /// Cross-entropy of the MLM head over the masked positions only.
    /// `None` when nothing was masked.
    pub fn mlm_loss(
        &self,
        tape: &Tape,
        batch: &TokenBatch,
        mask_prob: f64,
        seed: u64,
    ) -> Result<Option<(Var, usize)>> {
        let (masked, targets) = Self::mask_tokens(batch, mask_prob, seed)?;
        if targets.is_empty() {
            return Ok(None);
        }
        let h = self.hidden_states(tape, &masked)?;
        let positions: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
        let labels: Vec<usize> = targets.iter().map(|&(_, t)| t).collect();
        let picked = tape.gather_rows(h, &positions)?;
        let logits = tape.add_bias(
            tape.matmul(picked, tape.param(&self.mlm_w))?,
            tape.param(&self.mlm_b),
        )?;
        Ok(Some((
            tape.softmax_cross_entropy(logits, &labels)?,
            targets.len(),
        )))
    }

    pub fn mlm_pretrain_step(
        &mut self,
        adam: &mut Adam,
        batch: &TokenBatch,
        mask_prob: f64,
        seed: u64,
    ) -> Result<MlmStep> {
        let tape = Tape::new();
        let Some((loss, masked)) = self.mlm_loss(&tape, batch, mask_prob, seed)? else {
            return Ok(MlmStep {
                loss: 0.0,
                masked: 0,
                empty: true,
            });
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("MLM loss is {value}")));
        }
        let grads = tape.param_grads(&tape.backward(loss)?);
        adam.step(&mut self.params_mut(), &grads)?;
        Ok(MlmStep {
            loss: value,
            masked,
            empty: false,
        })
    }
}

impl Module for TextEncoderModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.tok_emb, &self.pos_emb, &self.emb_ln_g, &self.emb_ln_b];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.push(&self.mlm_w);
        v.push(&self.mlm_b);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.emb_ln_g,
            &mut self.emb_ln_b,
        ];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.push(&mut self.mlm_w);
        v.push(&mut self.mlm_b);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AdamConfig;
    use crate::text::vocab::{tokenize, Vocab};
    use crate::text::vocab::{CLS, PAD};

    fn tiny(vocab: usize) -> TextEncoderModel {
        let cfg = TextEncoderConfig {
            vocab_size: vocab,
            dim: 8,
            heads: 2,
            layers: 2,
            max_len: 10,
        };
        TextEncoderModel::new(cfg, "lm", 3).unwrap()
    }

    fn cls(model: &TextEncoderModel, batch: &TokenBatch) -> Tensor {
        let tape = Tape::no_grad();
        let v = model.encode_cls(&tape, batch).unwrap();
        let t = tape.value(v).clone();
        t
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = TextEncoderConfig {
            vocab_size: 20,
            dim: 10,
            heads: 4,
            layers: 1,
            max_len: 8,
        };
        assert!(TextEncoderModel::new(cfg, "lm", 0).is_err());
    }

    #[test]
    fn identical_texts_identical_rows() {
        let m = tiny(12);
        let b = TokenBatch::from_rows(&[vec![CLS, 5, 6, PAD], vec![CLS, 5, 6, PAD]]).unwrap();
        let out = cls(&m, &b);
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.shape(), &[2, 8]);
    }

    #[test]
    fn padding_columns_do_not_change_output() {
        let m = tiny(12);
        let short = TokenBatch::from_rows(&[vec![CLS, 5, 6, 7], vec![CLS, 8, PAD, PAD]]).unwrap();
        let long = TokenBatch::from_rows(&[
            vec![CLS, 5, 6, 7, PAD, PAD, PAD, PAD],
            vec![CLS, 8, PAD, PAD, PAD, PAD, PAD, PAD],
        ])
        .unwrap();
        assert!(cls(&m, &short).max_abs_diff(&cls(&m, &long)) < 1e-9);
        assert_eq!(long.trimmed(), short);
    }

    #[test]
    fn token_order_matters() {
        let m = tiny(12);
        let a = TokenBatch::from_rows(&[vec![CLS, 5, 6, 7]]).unwrap();
        let b = TokenBatch::from_rows(&[vec![CLS, 7, 5, 6]]).unwrap();
        assert!(cls(&m, &a).max_abs_diff(&cls(&m, &b)) > 1e-6);
    }

    #[test]
    fn out_of_range_id_rejected() {
        let m = tiny(12);
        let b = TokenBatch::from_rows(&[vec![CLS, 12]]).unwrap();
        let tape = Tape::no_grad();
        assert!(matches!(m.encode_cls(&tape, &b), Err(Error::Index { .. })));
    }

    #[test]
    fn token_embedding_gradient_matches_finite_differences() {
        let mut m = tiny(10);
        // Unit layer-norm gains make sum(output) constant; randomise them.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for p in m.params_mut() {
            if p.name().ends_with(".g") {
                *p.value_mut() = Tensor::uniform(p.value().shape(), 1.0, &mut rng);
            }
        }
        let b = TokenBatch::from_rows(&[vec![CLS, 5, 6, PAD], vec![CLS, 7, 7, 8]]).unwrap();
        let objective = |m: &TextEncoderModel| {
            let tape = Tape::no_grad();
            let v = m.encode_cls(&tape, &b).unwrap();
            let s = tape.value(v).data().iter().sum::<f64>();
            s
        };
        let tape = Tape::new();
        let out = m.encode_cls(&tape, &b).unwrap();
        let grads = tape.param_grads(&tape.backward(tape.sum(out)).unwrap());
        let analytic = grads
            .iter()
            .find(|(n, _)| n == "lm.tok_emb")
            .unwrap()
            .1
            .clone();
        let eps = 1e-3;
        let mut fd = vec![0.0; analytic.numel()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let orig = m.tok_emb.value().data()[i];
            m.tok_emb.value_mut().data_mut()[i] = orig + eps;
            let up = objective(&m);
            m.tok_emb.value_mut().data_mut()[i] = orig - eps;
            let down = objective(&m);
            m.tok_emb.value_mut().data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        let fd = Tensor::new(analytic.shape().to_vec(), fd).unwrap();
        let rel = analytic.max_abs_diff(&fd) / analytic.norm().max(fd.norm());
        assert!(analytic.norm() > 1e-3);
        assert!(rel < 1e-3, "relative error {rel}");
    }

    fn corpus() -> (Vocab, TokenBatch) {
        let texts: Vec<String> = (0..24)
            .map(|i| {
                let c = i % 3;
                (0..6)
                    .map(|j| format!("c{c}w{}", (i + j) % 4))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let vocab = Vocab::build(texts.iter().map(String::as_str));
        let rows: Vec<Vec<usize>> = texts
            .iter()
            .map(|t| tokenize(&vocab, t, 8).unwrap())
            .collect();
        (vocab, TokenBatch::from_rows(&rows).unwrap())
    }

    #[test]
    fn mlm_reaches_every_parameter() {
        let (vocab, batch) = corpus();
        let cfg = TextEncoderConfig {
            vocab_size: vocab.len(),
            dim: 8,
            heads: 2,
            layers: 2,
            max_len: 8,
        };
        let m = TextEncoderModel::new(cfg, "lm", 1).unwrap();
        let tape = Tape::new();
        let (loss, _) = m.mlm_loss(&tape, &batch, 0.3, 2).unwrap().unwrap();
        let grads = tape.param_grads(&tape.backward(loss).unwrap());
        for p in m.params() {
            let g = grads.iter().find(|(n, _)| n == p.name());
            assert!(
                g.is_some_and(|(_, g)| g.norm() > 0.0),
                "{} has no gradient",
                p.name()
            );
        }
    }

    #[test]
    fn mlm_loss_decreases() {
        let (vocab, batch) = corpus();
        let cfg = TextEncoderConfig {
            vocab_size: vocab.len(),
            dim: 16,
            heads: 2,
            layers: 1,
            max_len: 8,
        };
        let mut m = TextEncoderModel::new(cfg, "lm", 1).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(3e-3)).unwrap();
        let first = m
            .mlm_pretrain_step(&mut adam, &batch, 0.25, 0)
            .unwrap()
            .loss;
        let mut last = first;
        for step in 1..=200 {
            last = m
                .mlm_pretrain_step(&mut adam, &batch, 0.25, step)
                .unwrap()
                .loss;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn single_token_vocabulary_is_learned() {
        let vocab = Vocab::from_tokens(["only"]).unwrap();
        let rows: Vec<Vec<usize>> = (0..8)
            .map(|_| tokenize(&vocab, "only only only only", 5).unwrap())
            .collect();
        let batch = TokenBatch::from_rows(&rows).unwrap();
        let cfg = TextEncoderConfig {
            vocab_size: vocab.len(),
            dim: 8,
            heads: 2,
            layers: 1,
            max_len: 5,
        };
        let mut m = TextEncoderModel::new(cfg, "lm", 0).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.05)).unwrap();
        let mut loss = f64::INFINITY;
        for step in 0..60 {
            let s = m.mlm_pretrain_step(&mut adam, &batch, 0.5, step).unwrap();
            if !s.empty {
                loss = s.loss;
            }
        }
        assert!(loss < 1e-2, "loss {loss}");
    }

    #[test]
    fn nothing_masked_is_flagged() {
        let mut m = tiny(12);
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let b = TokenBatch::from_rows(&[vec![CLS, PAD, PAD]]).unwrap();
        let before = m.clone();
        let s = m.mlm_pretrain_step(&mut adam, &b, 0.5, 0).unwrap();
        assert!(s.empty && s.loss == 0.0);
        assert_eq!(m, before);
        assert!(TextEncoderModel::mask_tokens(&b, 0.0, 0).is_err());
    }
}
