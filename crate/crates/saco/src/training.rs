//! Two-stage optimization: joint-loss training, then self-critical CIDEr
//! fine-tuning, plus the evaluation loop and report plumbing.
//!
//! Each anchor item builds one graph holding its own branches (anchor,
//! positive, negatives, corrupted triplet); per-item gradients are computed
//! independently (in parallel when enabled) and reduced in fixed item order,
//! so training is bit-reproducible for a given seed.

use crate::contrastive::{stc_loss, svc_loss};
use crate::data::Dataset;
use crate::encoders::Fused;
use crate::error::{Result, SacoError};
use crate::generator::caption_loss;
use crate::metrics::{score_corpus, CiderDf, MetricReport, ScoringCorpus};
use crate::model::Model;
use crate::parallel;
use crate::retrieval::{
    rank_candidates, sample_negatives, sample_positive, RepresentationCache, SamplerConfig,
};
use crate::tensor::{clip_global_norm, AdamW, Binder, Tape, Var};
use crate::vocab::{TokenId, SOS};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Training-stage hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight on the style-aware visual contrast loss.
    pub alpha: f64,
    /// Weight on the style-aware triplet contrast loss.
    pub beta: f64,
    /// Contrastive temperature, shared by SVC and STC.
    pub tau: f64,
    pub lr_train: f64,
    pub lr_finetune: f64,
    pub batch: usize,
    pub epochs_train: usize,
    pub epochs_finetune: usize,
    /// Linear warm-up fraction of total steps.
    pub warmup: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Evaluate every k epochs (0 = final epoch only).
    pub eval_every: usize,
    /// Beam size used by in-training evaluation.
    pub eval_beam: usize,
    /// Keep the contrastive terms active during fine-tuning.
    pub keep_contrastive: bool,
    /// Sampling temperature for the SCST exploration caption.
    pub scst_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            beta: 0.7,
            tau: 0.08,
            lr_train: 1e-4,
            lr_finetune: 1e-5,
            batch: 16,
            epochs_train: 10,
            epochs_finetune: 3,
            warmup: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 0,
            eval_beam: 3,
            keep_contrastive: false,
            scst_temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(SacoError::InvalidInput("alpha and beta must be ≥ 0".into()));
        }
        if self.tau <= 0.0 {
            return Err(SacoError::InvalidInput("tau must be > 0".into()));
        }
        if self.lr_train <= 0.0 || self.lr_finetune <= 0.0 {
            return Err(SacoError::InvalidInput("learning rates must be > 0".into()));
        }
        if self.batch == 0 {
            return Err(SacoError::InvalidInput("batch size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup) {
            return Err(SacoError::InvalidInput("warmup must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `L = L_cap + α·L_svc + β·L_stc`.
pub fn total_loss(l_cap: f64, l_svc: f64, l_stc: f64, alpha: f64, beta: f64) -> f64 {
    l_cap + alpha * l_svc + beta * l_stc
}

/// Per-anchor selections for one epoch, fixed before any gradient step.
/// Holding indices only (never scores) keeps selection visibly
/// non-differentiable.
#[derive(Debug, Clone)]
pub struct AnchorPicks {
    pub positive: usize,
    pub negatives: Vec<usize>,
    /// Mismatched style for the corrupted (image, style, caption) negative;
    /// `None` when the dataset has a single style.
    pub corrupt_style: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EpochPlan {
    pub epoch: usize,
    pub picks: Vec<AnchorPicks>,
    pub pos_mean_p: f64,
    pub neg_mean_p: f64,
    pub threshold_mean: f64,
    pub padded_total: usize,
}

/// Refreshes the representation cache and draws one (positive, negatives,
/// corrupt style) selection per anchor.
pub fn plan_epoch(
    model: &Model,
    dataset: &Dataset,
    sampler: &SamplerConfig,
    epoch: usize,
    rng: &mut impl Rng,
) -> Result<EpochPlan> {
    let cache = RepresentationCache::build(model, dataset)?;
    let n = dataset.items.len();
    let ranked_all = parallel::map_range(n, |anchor| {
        rank_candidates(anchor, dataset, &cache, sampler, epoch)
    });
    let mut picks = Vec::with_capacity(n);
    let mut pos_p = 0.0;
    let mut neg_p = 0.0;
    let mut thr = 0.0;
    let mut padded_total = 0;
    for (anchor, ranked) in ranked_all.into_iter().enumerate() {
        let ranked = ranked?;
        let pos = sample_positive(&ranked, sampler.top_k_pos, rng)?;
        pos_p += pos.scores.p;
        let positive = pos.index;
        let draw = sample_negatives(&ranked, sampler.num_negatives, sampler.omega, epoch, rng)?;
        for &i in &draw.picks {
            neg_p += ranked[i].scores.p;
        }
        thr += draw.threshold;
        padded_total += draw.padded;
        let negatives: Vec<usize> = draw.picks.iter().map(|&i| ranked[i].index).collect();
        let n_styles = dataset.styles.len();
        let corrupt_style = if n_styles >= 2 {
            let anchor_style = dataset.items[anchor].style_id;
            let mut s = rng.gen_range(0..n_styles - 1);
            if s >= anchor_style {
                s += 1;
            }
            Some(s)
        } else {
            None
        };
        picks.push(AnchorPicks { positive, negatives, corrupt_style });
    }
    let m = sampler.num_negatives as f64;
    Ok(EpochPlan {
        epoch,
        picks,
        pos_mean_p: pos_p / n as f64,
        neg_mean_p: neg_p / (n as f64 * m),
        threshold_mean: thr / n as f64,
        padded_total,
    })
}

/// Loss components and parameter gradients from one anchor's graph.
struct ItemGrads {
    l_cap: f64,
    l_svc: f64,
    l_stc: f64,
    total: f64,
    grads: BTreeMap<String, Array2<f64>>,
}

fn teacher_prefix(caption: &[TokenId]) -> Vec<TokenId> {
    let mut prefix = Vec::with_capacity(caption.len());
    prefix.push(SOS);
    prefix.extend_from_slice(&caption[..caption.len() - 1]);
    prefix
}

/// Fuse + decode + triplet representation for one (features, style, caption)
/// triple on the shared tape.
fn triplet_of(
    model: &Model,
    tape: &mut Tape,
    bind: &mut Binder,
    features: &Array2<f64>,
    style: usize,
    caption: &[TokenId],
) -> Result<Var> {
    let fused = model.fuse(tape, bind, features, style)?;
    let state = model.decode_forward(tape, bind, fused.v_s, fused.s_v, &teacher_prefix(caption))?;
    Ok(model.triplet_repr(tape, bind, state.hidden))
}

/// Adds the SVC and STC branches for one anchor to an existing graph.
/// `anchor_hidden` must be the gold-caption decoder states (the anchor's own
/// triplet representation comes from them).
#[allow(clippy::too_many_arguments)]
fn contrastive_terms(
    model: &Model,
    tape: &mut Tape,
    bind: &mut Binder,
    dataset: &Dataset,
    anchor_idx: usize,
    picks: &AnchorPicks,
    cfg: &TrainConfig,
    anchor_fused: &Fused,
    anchor_hidden: Var,
) -> Result<(Option<Var>, Option<Var>)> {
    let anchor = &dataset.items[anchor_idx];

    // SVC: retrieved images re-encoded under the anchor's style
    let l_svc = if cfg.alpha > 0.0 {
        let pos = &dataset.items[picks.positive];
        let pos_fused = model.fuse(tape, bind, &pos.features, anchor.style_id)?;
        let mut neg_fused: Vec<Fused> = Vec::with_capacity(picks.negatives.len());
        for &n in &picks.negatives {
            let item = &dataset.items[n];
            neg_fused.push(model.fuse(tape, bind, &item.features, anchor.style_id)?);
        }
        Some(svc_loss(tape, anchor_fused, &pos_fused, &neg_fused, cfg.tau)?)
    } else {
        None
    };

    // STC: full triplets under their own styles, plus one corrupted triplet
    let l_stc = if cfg.beta > 0.0 {
        let h_anchor = model.triplet_repr(tape, bind, anchor_hidden);
        let pos = &dataset.items[picks.positive];
        let h_pos = triplet_of(model, tape, bind, &pos.features, pos.style_id, &pos.caption)?;
        let mut h_negs = Vec::with_capacity(picks.negatives.len() + 1);
        for &n in &picks.negatives {
            let item = &dataset.items[n];
            h_negs.push(triplet_of(model, tape, bind, &item.features, item.style_id, &item.caption)?);
        }
        if let Some(style) = picks.corrupt_style {
            h_negs.push(triplet_of(model, tape, bind, &anchor.features, style, &anchor.caption)?);
        }
        Some(stc_loss(tape, h_anchor, h_pos, &h_negs, cfg.tau)?)
    } else {
        None
    };
    Ok((l_svc, l_stc))
}

/// Builds the full per-anchor graph (caption MLE + SVC + STC with the
/// planned positive/negative branches) and backpropagates it.
fn item_grads(
    model: &Model,
    dataset: &Dataset,
    anchor_idx: usize,
    picks: &AnchorPicks,
    cfg: &TrainConfig,
) -> Result<ItemGrads> {
    let mut tape = Tape::new();
    let mut bind = Binder::new();
    let anchor = &dataset.items[anchor_idx];

    let anchor_fused = model.fuse(&mut tape, &mut bind, &anchor.features, anchor.style_id)?;

    // caption MLE on the anchor's gold caption only
    let state = model.decode_forward(
        &mut tape,
        &mut bind,
        anchor_fused.v_s,
        anchor_fused.s_v,
        &teacher_prefix(&anchor.caption),
    )?;
    let l_cap = caption_loss(&mut tape, state.logits, &anchor.caption)?;

    let (l_svc, l_stc) = contrastive_terms(
        model,
        &mut tape,
        &mut bind,
        dataset,
        anchor_idx,
        picks,
        cfg,
        &anchor_fused,
        state.hidden,
    )?;

    // L = L_cap + α·L_svc + β·L_stc
    let mut total_var = l_cap;
    if let Some(svc) = l_svc {
        let scaled = tape.scale(svc, cfg.alpha);
        total_var = tape.add(total_var, scaled);
    }
    if let Some(stc) = l_stc {
        let scaled = tape.scale(stc, cfg.beta);
        total_var = tape.add(total_var, scaled);
    }

    let l_cap_v = tape.scalar(l_cap);
    let l_svc_v = l_svc.map(|v| tape.scalar(v)).unwrap_or(0.0);
    let l_stc_v = l_stc.map(|v| tape.scalar(v)).unwrap_or(0.0);
    let total = tape.scalar(total_var);
    if !total.is_finite() {
        return Err(SacoError::Numerical(format!(
            "non-finite loss on anchor `{}`: l_cap={l_cap_v} l_svc={l_svc_v} l_stc={l_stc_v}",
            anchor.image_id
        )));
    }

    let mut adj = tape.backward(total_var);
    let mut grads = BTreeMap::new();
    for (name, var) in bind.bound() {
        if let Some(g) = adj.take(var) {
            grads.insert(name, g);
        }
    }
    Ok(ItemGrads { l_cap: l_cap_v, l_svc: l_svc_v, l_stc: l_stc_v, total, grads })
}

fn merge_grads(into: &mut BTreeMap<String, Array2<f64>>, from: BTreeMap<String, Array2<f64>>) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => *acc += &g,
            None => {
                into.insert(name, g);
            }
        }
    }
}

/// One row of the training report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReportRow {
    pub epoch: usize,
    pub l_cap: f64,
    pub l_svc: f64,
    pub l_stc: f64,
    pub total: f64,
    pub metrics: Option<MetricReport>,
    pub pos_mean_p: f64,
    pub neg_mean_p: f64,
    pub neg_threshold: f64,
    pub neg_padded: usize,
    pub grad_norm_mean: f64,
}

/// Warm-up multiplier for optimizer step `step` (0-based) out of `total`.
fn warmup_scale(step: usize, total_steps: usize, warmup: f64) -> f64 {
    let warm = ((total_steps as f64 * warmup).ceil() as usize).max(1);
    if step + 1 >= warm {
        1.0
    } else {
        (step + 1) as f64 / warm as f64
    }
}

/// Runs one training epoch: per batch, forward anchor + positive + negatives,
/// average gradients, clip, and step AdamW under warm-up.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    dataset: &Dataset,
    plan: Option<&EpochPlan>,
    cfg: &TrainConfig,
    opt: &mut AdamW,
    step_counter: &mut usize,
    total_steps: usize,
    order: &[usize],
) -> Result<TrainReportRow> {
    let contrastive = cfg.alpha > 0.0 || cfg.beta > 0.0;
    if contrastive && plan.is_none() {
        return Err(SacoError::InvalidInput("contrastive training needs an epoch plan".into()));
    }
    let default_picks = AnchorPicks { positive: 0, negatives: vec![], corrupt_style: None };
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    let mut grad_norms = 0.0;
    let mut batches = 0;
    for batch in order.chunks(cfg.batch) {
        let results = parallel::map_items(batch, |&anchor_idx| {
            let picks = plan
                .map(|p| &p.picks[anchor_idx])
                .unwrap_or(&default_picks);
            item_grads(model, dataset, anchor_idx, picks, cfg)
        });
        let mut batch_grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for r in results {
            let ig = r?;
            sums.0 += ig.l_cap;
            sums.1 += ig.l_svc;
            sums.2 += ig.l_stc;
            sums.3 += ig.total;
            merge_grads(&mut batch_grads, ig.grads);
        }
        let scale = 1.0 / batch.len() as f64;
        for g in batch_grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
        grad_norms += clip_global_norm(&mut batch_grads, cfg.grad_clip);
        let lr_scale = warmup_scale(*step_counter, total_steps, cfg.warmup);
        opt.step(&mut model.params, &batch_grads, lr_scale);
        *step_counter += 1;
        batches += 1;
    }
    let n = order.len() as f64;
    Ok(TrainReportRow {
        epoch: plan.map(|p| p.epoch).unwrap_or(0),
        l_cap: sums.0 / n,
        l_svc: sums.1 / n,
        l_stc: sums.2 / n,
        total: sums.3 / n,
        metrics: None,
        pos_mean_p: plan.map(|p| p.pos_mean_p).unwrap_or(0.0),
        neg_mean_p: plan.map(|p| p.neg_mean_p).unwrap_or(0.0),
        neg_threshold: plan.map(|p| p.threshold_mean).unwrap_or(0.0),
        neg_padded: plan.map(|p| p.padded_total).unwrap_or(0),
        grad_norm_mean: grad_norms / batches.max(1) as f64,
    })
}

fn mix(seed: u64, tag: &str, k: u64) -> u64 {
    let mut h = seed ^ 0x517c_c1b7_2722_0a95;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^ k.wrapping_mul(0x2545_f491_4f6c_dd1d)
}

/// Full training stage. Returns one report row per epoch; evaluation runs on
/// the `eval_every` cadence plus the final epoch.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
) -> Result<Vec<TrainReportRow>> {
    train_with_callback(model, dataset, cfg, sampler, |_, _| true)
}

/// As [`train`], calling `on_epoch` after every epoch; returning `false`
/// stops early (the warm-up horizon still assumes the configured epoch
/// count).
pub fn train_with_callback(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
    mut on_epoch: impl FnMut(&Model, &TrainReportRow) -> bool,
) -> Result<Vec<TrainReportRow>> {
    cfg.validate()?;
    sampler.validate()?;
    let n = dataset.items.len();
    if n == 0 {
        return Err(SacoError::InvalidInput("empty dataset".into()));
    }
    let contrastive = cfg.alpha > 0.0 || cfg.beta > 0.0;
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs_train;
    let mut opt = AdamW::new(cfg.lr_train, cfg.weight_decay);
    let mut step_counter = 0usize;
    let mut rows = Vec::with_capacity(cfg.epochs_train);
    for epoch in 0..cfg.epochs_train {
        let plan = if contrastive {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, "plan", epoch as u64));
            Some(plan_epoch(model, dataset, sampler, epoch, &mut rng)?)
        } else {
            None
        };
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, "order", epoch as u64));
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut row = train_epoch(
            model,
            dataset,
            plan.as_ref(),
            cfg,
            &mut opt,
            &mut step_counter,
            total_steps,
            &order,
        )?;
        row.epoch = epoch;
        let last = epoch + 1 == cfg.epochs_train;
        let cadence = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if last || cadence {
            row.metrics = Some(evaluate(model, dataset, cfg.eval_beam)?);
        }
        let proceed = on_epoch(model, &row);
        rows.push(row);
        if !proceed {
            break;
        }
    }
    Ok(rows)
}

/// Self-critical reward: `CIDEr(sampled) − CIDEr(greedy)` with a frozen
/// document-frequency table.
pub fn scst_reward(sampled: &str, greedy: &str, refs: &[String], df: &CiderDf) -> f64 {
    df.score_item(sampled, refs) - df.score_item(greedy, refs)
}

/// One row of the fine-tuning report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReportRow {
    pub epoch: usize,
    pub mean_reward: f64,
    pub frac_positive_reward: f64,
    /// Batches skipped because every sampled caption matched greedy (reward
    /// identically zero → parameters must not move).
    pub skipped_batches: usize,
    /// Train-set CIDEr (greedy decoding) after this epoch.
    pub train_cider: f64,
}

/// Builds the frozen CIDEr df table over the dataset's references.
pub fn build_reward_df(dataset: &Dataset) -> CiderDf {
    let refs: Vec<Vec<String>> =
        (0..dataset.items.len()).map(|i| dataset.references_for(i)).collect();
    let ref_slices: Vec<&Vec<String>> = refs.iter().collect();
    CiderDf::build(&ref_slices)
}

struct ScstItem {
    reward: f64,
    grads: Option<BTreeMap<String, Array2<f64>>>,
}

fn scst_item(
    model: &Model,
    dataset: &Dataset,
    idx: usize,
    df: &CiderDf,
    cfg: &TrainConfig,
    picks: Option<&AnchorPicks>,
    seed: u64,
) -> Result<ScstItem> {
    let item = &dataset.items[idx];
    let fused = model.fuse_values(&item.features, item.style_id)?;
    let greedy = model.greedy_decode(&fused, model.config.max_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sampled, _) =
        model.sample_decode(&fused, model.config.max_len, &mut rng, cfg.scst_temperature)?;
    let refs = dataset.references_for(idx);
    let greedy_text = dataset.vocab.detokenize(&greedy)?;
    let sampled_text = dataset.vocab.detokenize(&sampled)?;
    let reward = scst_reward(&sampled_text, &greedy_text, &refs, df);
    let policy_active = reward != 0.0 && !sampled.is_empty();
    if !policy_active && picks.is_none() {
        return Ok(ScstItem { reward, grads: None });
    }
    let mut tape = Tape::new();
    let mut bind = Binder::new();
    let fused_g = model.fuse(&mut tape, &mut bind, &item.features, item.style_id)?;
    let mut terms: Vec<Var> = Vec::with_capacity(3);
    if policy_active {
        // policy gradient: minimize −R · Σ log p(sampled_i); teacher-force the
        // sampled caption so the gradient flows through encoder and decoder
        let state = model.decode_forward(
            &mut tape,
            &mut bind,
            fused_g.v_s,
            fused_g.s_v,
            &teacher_prefix(&sampled),
        )?;
        let lps = tape.gather_log_probs(state.logits, &sampled);
        let sum_lp = tape.sum_all(lps);
        terms.push(tape.scale(sum_lp, -reward));
    }
    if let Some(picks) = picks {
        // --keep-contrastive: SVC/STC stay active alongside the reward; the
        // anchor triplet still comes from the gold caption
        let gold_state = model.decode_forward(
            &mut tape,
            &mut bind,
            fused_g.v_s,
            fused_g.s_v,
            &teacher_prefix(&item.caption),
        )?;
        let (l_svc, l_stc) = contrastive_terms(
            model, &mut tape, &mut bind, dataset, idx, picks, cfg, &fused_g, gold_state.hidden,
        )?;
        if let Some(svc) = l_svc {
            terms.push(tape.scale(svc, cfg.alpha));
        }
        if let Some(stc) = l_stc {
            terms.push(tape.scale(stc, cfg.beta));
        }
    }
    let mut loss = match terms.first() {
        Some(v) => *v,
        None => return Ok(ScstItem { reward, grads: None }),
    };
    for t in &terms[1..] {
        loss = tape.add(loss, *t);
    }
    if !tape.scalar(loss).is_finite() {
        return Err(SacoError::Numerical(format!(
            "non-finite fine-tuning loss on `{}` (reward {reward})",
            item.image_id
        )));
    }
    let mut adj = tape.backward(loss);
    let mut grads = BTreeMap::new();
    for (name, var) in bind.bound() {
        if let Some(g) = adj.take(var) {
            grads.insert(name, g);
        }
    }
    Ok(ScstItem { reward, grads: Some(grads) })
}

/// One SCST fine-tuning epoch. Without `keep_contrastive`, a batch whose
/// rewards are all exactly zero is skipped outright: no gradient, no
/// optimizer-state advance, parameters bit-identical.
pub fn finetune_epoch(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    opt: &mut AdamW,
    df: &CiderDf,
    plan: Option<&EpochPlan>,
    epoch: usize,
) -> Result<FinetuneReportRow> {
    let n = dataset.items.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, "ft-order", epoch as u64));
    use rand::seq::SliceRandom;
    order.shuffle(&mut shuffle_rng);

    let mut reward_sum = 0.0;
    let mut positive = 0usize;
    let mut skipped = 0usize;
    for batch in order.chunks(cfg.batch) {
        let results = parallel::map_items(batch, |&idx| {
            let seed = mix(cfg.seed, "scst", (epoch * n + idx) as u64);
            let picks = plan.map(|p| &p.picks[idx]);
            scst_item(model, dataset, idx, df, cfg, picks, seed)
        });
        let mut batch_grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        let mut any = false;
        for r in results {
            let s = r?;
            reward_sum += s.reward;
            if s.reward > 0.0 {
                positive += 1;
            }
            if let Some(g) = s.grads {
                merge_grads(&mut batch_grads, g);
                any = true;
            }
        }
        if !any {
            skipped += 1;
            continue;
        }
        let scale = 1.0 / batch.len() as f64;
        for g in batch_grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
        clip_global_norm(&mut batch_grads, cfg.grad_clip);
        opt.step(&mut model.params, &batch_grads, 1.0);
    }

    let train_cider = {
        let corpus = decode_corpus(model, dataset, DecodeMode::Greedy)?;
        score_corpus(&corpus)?.cider
    };
    Ok(FinetuneReportRow {
        epoch,
        mean_reward: reward_sum / n as f64,
        frac_positive_reward: positive as f64 / n as f64,
        skipped_batches: skipped,
        train_cider,
    })
}

/// Full fine-tuning stage on a trained model. With `keep_contrastive`, the
/// SVC/STC terms stay active and retrieval plans keep refreshing at the
/// fine-tuning epochs (continuing the schedule after `epochs_train`).
pub fn finetune(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    sampler: &SamplerConfig,
) -> Result<Vec<FinetuneReportRow>> {
    cfg.validate()?;
    let df = build_reward_df(dataset);
    let mut opt = AdamW::new(cfg.lr_finetune, cfg.weight_decay);
    let keep = cfg.keep_contrastive && (cfg.alpha > 0.0 || cfg.beta > 0.0);
    let mut rows = Vec::with_capacity(cfg.epochs_finetune);
    for epoch in 0..cfg.epochs_finetune {
        let plan = if keep {
            let schedule_epoch = cfg.epochs_train + epoch;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, "ft-plan", epoch as u64));
            Some(plan_epoch(model, dataset, sampler, schedule_epoch, &mut rng)?)
        } else {
            None
        };
        rows.push(finetune_epoch(model, dataset, cfg, &mut opt, &df, plan.as_ref(), epoch)?);
    }
    Ok(rows)
}

pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// Decodes every item and pairs the captions with their references.
pub fn decode_corpus(model: &Model, dataset: &Dataset, mode: DecodeMode) -> Result<ScoringCorpus> {
    let texts = parallel::map_range(dataset.items.len(), |idx| -> Result<String> {
        let item = &dataset.items[idx];
        let fused = model.fuse_values(&item.features, item.style_id)?;
        let toks = match mode {
            DecodeMode::Greedy => model.greedy_decode(&fused, model.config.max_len)?,
            DecodeMode::Beam(b) => model.beam_search(&fused, b, model.config.max_len)?,
        };
        dataset.vocab.detokenize(&toks)
    });
    let mut candidates = BTreeMap::new();
    let mut references = BTreeMap::new();
    for (idx, text) in texts.into_iter().enumerate() {
        let id = format!("{idx:05}");
        candidates.insert(id.clone(), text?);
        references.insert(id, dataset.references_for(idx));
    }
    Ok(ScoringCorpus { candidates, references })
}

/// Beam-search decoding scored against all references.
pub fn evaluate(model: &Model, dataset: &Dataset, beam: usize) -> Result<MetricReport> {
    let corpus = decode_corpus(model, dataset, DecodeMode::Beam(beam))?;
    score_corpus(&corpus)
}

/// Fraction of non-PAD gold tokens the model predicts by argmax under
/// teacher forcing.
pub fn teacher_forced_accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    let counts = parallel::map_range(dataset.items.len(), |idx| -> Result<(usize, usize)> {
        let item = &dataset.items[idx];
        let mut tape = Tape::new();
        let mut bind = Binder::new();
        let fused = model.fuse(&mut tape, &mut bind, &item.features, item.style_id)?;
        let state = model.decode_forward(
            &mut tape,
            &mut bind,
            fused.v_s,
            fused.s_v,
            &teacher_prefix(&item.caption),
        )?;
        let logits = tape.value(state.logits);
        let mut hit = 0;
        let mut total = 0;
        for (i, &gold) in item.caption.iter().enumerate() {
            if gold == crate::vocab::PAD {
                continue;
            }
            total += 1;
            let row: Vec<f64> = logits.row(i).iter().copied().collect();
            if crate::generator::argmax_lowest(&row) == gold {
                hit += 1;
            }
        }
        Ok((hit, total))
    });
    let mut hit = 0usize;
    let mut total = 0usize;
    for c in counts {
        let (h, t) = c?;
        hit += h;
        total += t;
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Fraction of items whose greedy decode reproduces the gold caption exactly.
pub fn greedy_exact_match(model: &Model, dataset: &Dataset) -> Result<f64> {
    let hits = parallel::map_range(dataset.items.len(), |idx| -> Result<bool> {
        let item = &dataset.items[idx];
        let fused = model.fuse_values(&item.features, item.style_id)?;
        let toks = model.greedy_decode(&fused, model.config.max_len)?;
        Ok(toks == item.caption)
    });
    let mut n = 0usize;
    for h in hits {
        if h? {
            n += 1;
        }
    }
    Ok(n as f64 / dataset.items.len().max(1) as f64)
}

/// Writes the training report as CSV (metrics cells empty off-cadence).
pub fn write_report_csv(path: &Path, rows: &[TrainReportRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "epoch,l_cap,l_svc,l_stc,total,bleu1,bleu4,rougeL,cider,pos_mean_p,neg_mean_p,neg_threshold,neg_padded,grad_norm_mean"
    )?;
    for r in rows {
        let (b1, b4, rl, cd) = match &r.metrics {
            Some(m) => (
                format!("{}", m.bleu1),
                format!("{}", m.bleu4),
                format!("{}", m.rouge_l),
                format!("{}", m.cider),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        writeln!(
            f,
            "{},{},{},{},{},{b1},{b4},{rl},{cd},{},{},{},{},{}",
            r.epoch,
            r.l_cap,
            r.l_svc,
            r.l_stc,
            r.total,
            r.pos_mean_p,
            r.neg_mean_p,
            r.neg_threshold,
            r.neg_padded,
            r.grad_norm_mean
        )?;
    }
    Ok(())
}

/// Writes the training report as JSON lines.
pub fn write_report_jsonl(path: &Path, rows: &[TrainReportRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
