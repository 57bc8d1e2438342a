//! Transformer decoder over (V^s, s^v, caption prefix): next-token
//! distributions, hidden states, the triplet representation, and decoding.
//!
//! The fused features enter as prefix memory tokens (projected d→d_h) that
//! every caption position may attend to; caption positions attend causally
//! among themselves. `hidden[i]` therefore depends only on the memory and on
//! prefix tokens ≤ i, and `logits[i]` scores the token following prefix[i].

use crate::encoders::FusedValues;
use crate::error::{Result, SacoError};
use crate::model::Model;
use crate::tensor::{causal_mask_with_memory, softmax_rows, Binder, Tape, Var};
use crate::vocab::{TokenId, EOS, PAD, SOS};
use rand::Rng;

/// Hidden states and next-token logits for every prefix position.
pub struct DecoderState {
    /// N×d_h final-layer hidden states (one per prefix position).
    pub hidden: Var,
    /// N×|V| next-token logits.
    pub logits: Var,
    /// Number of memory rows prepended ahead of the caption rows.
    pub mem_rows: usize,
}

impl Model {
    fn mem_rows(&self) -> usize {
        if self.config.decoder_uses_style_token {
            self.config.m + 1
        } else {
            self.config.m
        }
    }

    /// Teacher-forced decoder pass over `prefix` (must start with `<SOS>`).
    pub fn decode_forward(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        v_s: Var,
        s_v: Var,
        prefix: &[TokenId],
    ) -> Result<DecoderState> {
        if prefix.is_empty() {
            return Err(SacoError::InvalidInput("empty decoder prefix".into()));
        }
        if prefix[0] != SOS {
            return Err(SacoError::InvalidInput("decoder prefix must start with <SOS>".into()));
        }
        if prefix.len() > self.config.max_len {
            return Err(SacoError::InvalidInput(format!(
                "prefix length {} exceeds max length {}",
                prefix.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = prefix.iter().find(|t| **t >= self.config.vocab_size) {
            return Err(SacoError::InvalidInput(format!("token id {bad} out of vocabulary")));
        }

        let mem_rows = self.mem_rows();
        let mem_src = if self.config.decoder_uses_style_token {
            tape.concat_rows(&[v_s, s_v])
        } else {
            v_s
        };
        let (pw, pb) = (
            bind.var(tape, &self.params, "dec.mem_proj.w"),
            bind.var(tape, &self.params, "dec.mem_proj.b"),
        );
        let mem = tape.linear(mem_src, pw, pb);
        let mem_pos_table = bind.var(tape, &self.params, "dec.mem_pos");
        let mem_pos = tape.slice_rows(mem_pos_table, 0, mem_rows);
        let mem = tape.add(mem, mem_pos);

        let tok_table = bind.var(tape, &self.params, "dec.tok");
        let toks = tape.rows_select(tok_table, prefix);
        let pos_table = bind.var(tape, &self.params, "dec.pos");
        let pos = tape.slice_rows(pos_table, 0, prefix.len());
        let toks = tape.add(toks, pos);

        let mut x = tape.concat_rows(&[mem, toks]);
        let mask = causal_mask_with_memory(mem_rows, prefix.len());
        for i in 0..self.config.dec_layers {
            let (out, _) = self.block(
                tape,
                bind,
                &format!("dec.layer{i}"),
                x,
                self.config.dec_heads,
                Some(&mask),
            );
            x = out;
        }
        let x = self.final_norm(tape, bind, "dec.lnf", x);
        let hidden = tape.slice_rows(x, mem_rows, prefix.len());
        let (hw, hb) = (
            bind.var(tape, &self.params, "dec.head.w"),
            bind.var(tape, &self.params, "dec.head.b"),
        );
        let logits = tape.linear(hidden, hw, hb);
        Ok(DecoderState { hidden, logits, mem_rows })
    }

    /// Mean of the triplet MLP applied to each hidden step.
    pub fn triplet_repr(&self, tape: &mut Tape, bind: &mut Binder, hidden: Var) -> Var {
        let (w1, b1) = (
            bind.var(tape, &self.params, "tri.l1.w"),
            bind.var(tape, &self.params, "tri.l1.b"),
        );
        let (w2, b2) = (
            bind.var(tape, &self.params, "tri.l2.w"),
            bind.var(tape, &self.params, "tri.l2.b"),
        );
        let h = tape.linear(hidden, w1, b1);
        let h = if self.config.tri_linear { h } else { tape.gelu(h) };
        let h = tape.linear(h, w2, b2);
        tape.mean_rows(h)
    }

    /// Next-token log-probabilities after `generated` (inference path,
    /// detached; `generated` excludes `<SOS>`).
    pub fn next_token_log_probs(
        &self,
        fused: &FusedValues,
        generated: &[TokenId],
    ) -> Result<Vec<f64>> {
        let mut prefix = Vec::with_capacity(generated.len() + 1);
        prefix.push(SOS);
        prefix.extend_from_slice(generated);
        let mut tape = Tape::new();
        let mut bind = Binder::new();
        let v_s = tape.leaf_owned(fused.v_s.clone());
        let s_v = tape.leaf_owned(fused.s_v.clone());
        let state = self.decode_forward(&mut tape, &mut bind, v_s, s_v, &prefix)?;
        let logits = tape.value(state.logits);
        let probs = softmax_rows(&logits.slice(ndarray::s![prefix.len() - 1.., ..]).to_owned());
        Ok(probs.row(0).iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect())
    }

    /// Argmax decoding from `<SOS>`; ties break toward the lowest token id.
    /// Stops at `<EOS>` (included in the output) or `max_len` tokens.
    pub fn greedy_decode(&self, fused: &FusedValues, max_len: usize) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        while out.len() < max_len {
            let lp = self.next_token_log_probs(fused, &out)?;
            let tok = argmax_lowest(&lp);
            out.push(tok);
            if tok == EOS {
                break;
            }
        }
        Ok(out)
    }

    /// Multinomial sampling at `temperature`; `temperature = 0` degenerates
    /// to greedy. Returns the sampled ids and the model log-probability of
    /// each sampled token (untempered).
    pub fn sample_decode(
        &self,
        fused: &FusedValues,
        max_len: usize,
        rng: &mut impl Rng,
        temperature: f64,
    ) -> Result<(Vec<TokenId>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut log_probs = Vec::new();
        while out.len() < max_len {
            let lp = self.next_token_log_probs(fused, &out)?;
            let tok = if temperature <= 0.0 {
                argmax_lowest(&lp)
            } else {
                let probs = temper(&lp, temperature);
                sample_from_probs(rng, &probs)
            };
            log_probs.push(lp[tok]);
            out.push(tok);
            if tok == EOS {
                break;
            }
        }
        Ok((out, log_probs))
    }

    /// Length-normalized beam search. Never returns a sequence whose
    /// normalized log-probability is below the greedy rollout's.
    pub fn beam_search(&self, fused: &FusedValues, beam: usize, max_len: usize) -> Result<Vec<TokenId>> {
        if beam == 0 {
            return Err(SacoError::InvalidInput("beam size must be ≥ 1".into()));
        }
        let mut fallible: Option<SacoError> = None;
        let beam_out = {
            let step = |generated: &[TokenId]| -> Vec<f64> {
                match self.next_token_log_probs(fused, generated) {
                    Ok(lp) => lp,
                    Err(e) => {
                        fallible.get_or_insert(e);
                        vec![0.0; self.config.vocab_size]
                    }
                }
            };
            beam_search_core(step, EOS, beam, max_len)
        };
        if let Some(e) = fallible {
            return Err(e);
        }
        // Guard: beam pruning can in principle drop the greedy path, so decode
        // it once and keep whichever scores better after normalization.
        let greedy = self.greedy_decode(fused, max_len)?;
        let score = |toks: &[TokenId]| -> f64 {
            let mut lp = 0.0;
            for (i, &t) in toks.iter().enumerate() {
                lp += self.next_token_log_probs(fused, &toks[..i]).unwrap_or_default()[t];
            }
            lp / toks.len().max(1) as f64
        };
        if score(&greedy) > score(&beam_out) {
            Ok(greedy)
        } else {
            Ok(beam_out)
        }
    }
}

/// Mean negative log-likelihood of the gold caption; `<PAD>` positions are
/// excluded from both the sum and the denominator.
pub fn caption_loss(tape: &mut Tape, logits: Var, gold: &[TokenId]) -> Result<Var> {
    if gold.is_empty() {
        return Err(SacoError::InvalidInput("empty gold caption".into()));
    }
    if tape.value(logits).nrows() != gold.len() {
        return Err(SacoError::ShapeMismatch(format!(
            "gold length {} does not match {} scored positions",
            gold.len(),
            tape.value(logits).nrows()
        )));
    }
    let valid: Vec<bool> = gold.iter().map(|t| *t != PAD).collect();
    if !valid.iter().any(|v| *v) {
        return Err(SacoError::InvalidInput("caption has no scored positions".into()));
    }
    Ok(tape.cross_entropy_mean(logits, gold, &valid))
}

pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

fn temper(log_probs: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = log_probs.iter().map(|lp| lp / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_from_probs(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    log_prob: f64,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

/// Standard length-normalized beam search over a next-token scorer.
///
/// `step` maps the generated ids so far (without `<SOS>`) to next-token
/// log-probabilities. Finished hypotheses retire at `eos`; the winner is the
/// best normalized log-probability, ties broken by lexicographic token order.
pub fn beam_search_core(
    mut step: impl FnMut(&[TokenId]) -> Vec<f64>,
    eos: TokenId,
    beam: usize,
    max_len: usize,
) -> Vec<TokenId> {
    let mut alive = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if alive.is_empty() {
            break;
        }
        let mut expansions = Vec::with_capacity(alive.len() * 8);
        for hyp in &alive {
            let lp = step(&hyp.tokens);
            for (tok, tok_lp) in lp.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                expansions.push(Hypothesis { tokens, log_prob: hyp.log_prob + tok_lp });
            }
        }
        expansions.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        alive.clear();
        for hyp in expansions.into_iter().take(beam) {
            if *hyp.tokens.last().unwrap() == eos {
                finished.push(hyp);
            } else {
                alive.push(hyp);
            }
        }
    }
    finished.extend(alive);
    finished
        .into_iter()
        .max_by(|a, b| {
            a.normalized()
                .partial_cmp(&b.normalized())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .map(|h| h.tokens)
        .unwrap_or_default()
}
