//! Positive/negative mining: object-overlap, RoI, and triplet retrieval
//! scores blended by the epoch-decayed trade-off, plus the top-k positive
//! and thresholded negative samplers.
//!
//! Scores are computed against a per-epoch snapshot of the model
//! ([`RepresentationCache`]); selection is non-differentiable by design, so
//! nothing here touches a tape.

use crate::data::Dataset;
use crate::encoders::pool_values;
use crate::error::{Result, SacoError};
use crate::model::Model;
use crate::parallel;
use crate::tensor::{Binder, Tape};
use crate::vocab::SOS;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeSet;

/// Retrieval hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Decay factor on the object-overlap term.
    pub theta: f64,
    /// Trade-off between RoI and triplet similarity.
    pub phi: f64,
    /// Negative threshold hardening rate.
    pub omega: f64,
    pub top_k_pos: usize,
    pub num_negatives: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { theta: 0.9, phi: 0.5, omega: 0.8, top_k_pos: 10, num_negatives: 8 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta", self.theta), ("phi", self.phi), ("omega", self.omega)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(SacoError::InvalidInput(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        if self.top_k_pos == 0 {
            return Err(SacoError::InvalidInput("top_k_pos must be ≥ 1".into()));
        }
        if self.num_negatives == 0 {
            return Err(SacoError::InvalidInput("num_negatives must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Component and combined scores for one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalScores {
    pub p_obj: f64,
    pub p_roi: f64,
    pub p_tri: f64,
    pub p: f64,
}

/// One pool entry, ordered by combined score.
#[derive(Debug, Clone)]
pub struct RankedCandidate {
    /// Index into the dataset's item list.
    pub index: usize,
    pub image_id: String,
    pub scores: RetrievalScores,
}

/// Fraction of the anchor's objects present in the candidate (asymmetric:
/// the denominator is the anchor's object count).
pub fn object_overlap_score(anchor: &BTreeSet<String>, candidate: &BTreeSet<String>) -> Result<f64> {
    if anchor.is_empty() {
        return Err(SacoError::InvalidInput("anchor object set is empty".into()));
    }
    let overlap = anchor.intersection(candidate).count();
    Ok(overlap as f64 / anchor.len() as f64)
}

fn cosine_values(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(SacoError::Numerical("zero-norm vector in retrieval similarity".into()));
    }
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Cosine similarity of pooled style-aware visual features. Both inputs must
/// be encoded under the anchor's style.
pub fn roi_score(v_s_anchor: &Array2<f64>, v_s_cand: &Array2<f64>) -> Result<f64> {
    cosine_values(&pool_values(v_s_anchor), &pool_values(v_s_cand))
}

/// Cosine similarity of triplet representations.
pub fn triplet_score(h_anchor: &Array2<f64>, h_cand: &Array2<f64>) -> Result<f64> {
    cosine_values(h_anchor, h_cand)
}

/// Dynamic trade-off: `P = θ^μ·P_obj + (1 − θ^μ)·(φ·P_roi + (1 − φ)·P_tri)`.
/// At μ = 0 this is pure object overlap.
pub fn combined_score(p_obj: f64, p_roi: f64, p_tri: f64, theta: f64, phi: f64, epoch: usize) -> f64 {
    let decay = theta.powi(epoch as i32);
    decay * p_obj + (1.0 - decay) * (phi * p_roi + (1.0 - phi) * p_tri)
}

/// Negative-sampling threshold `max(0.1, P_max − ω^μ)`; non-decreasing in μ.
pub fn negative_threshold(p_max: f64, omega: f64, epoch: usize) -> f64 {
    (p_max - omega.powi(epoch as i32)).max(0.1)
}

/// Per-epoch snapshot of the representations retrieval scores against:
/// pooled `V^s` for every (item, style) pair and the triplet representation
/// of every gold triple.
pub struct RepresentationCache {
    /// `pooled[item][style]` = 1×d pooled style-aware visual readout.
    pooled: Vec<Vec<Array2<f64>>>,
    /// `triplet[item]` = 1×d representation of the item's own triple.
    triplet: Vec<Array2<f64>>,
}

impl RepresentationCache {
    pub fn build(model: &Model, dataset: &Dataset) -> Result<Self> {
        let n_styles = dataset.styles.len();
        let per_item = parallel::map_items(&dataset.items, |item| -> Result<_> {
            let mut pooled = Vec::with_capacity(n_styles);
            for style in 0..n_styles {
                let fused = model.fuse_values(&item.features, style)?;
                pooled.push(pool_values(&fused.v_s));
            }
            let mut tape = Tape::new();
            let mut bind = Binder::new();
            let fused = model.fuse(&mut tape, &mut bind, &item.features, item.style_id)?;
            let mut prefix = Vec::with_capacity(item.caption.len());
            prefix.push(SOS);
            prefix.extend_from_slice(&item.caption[..item.caption.len() - 1]);
            let state = model.decode_forward(&mut tape, &mut bind, fused.v_s, fused.s_v, &prefix)?;
            let h = model.triplet_repr(&mut tape, &mut bind, state.hidden);
            Ok((pooled, tape.value(h).clone()))
        });
        let mut pooled = Vec::with_capacity(per_item.len());
        let mut triplet = Vec::with_capacity(per_item.len());
        for r in per_item {
            let (p, t) = r?;
            pooled.push(p);
            triplet.push(t);
        }
        Ok(RepresentationCache { pooled, triplet })
    }

    pub fn pooled(&self, item: usize, style: usize) -> &Array2<f64> {
        &self.pooled[item][style]
    }

    pub fn triplet(&self, item: usize) -> &Array2<f64> {
        &self.triplet[item]
    }
}

/// Scores every other item against the anchor and returns them in descending
/// combined-score order (ties broken by image id).
pub fn rank_candidates(
    anchor: usize,
    dataset: &Dataset,
    cache: &RepresentationCache,
    config: &SamplerConfig,
    epoch: usize,
) -> Result<Vec<RankedCandidate>> {
    config.validate()?;
    let n = dataset.items.len();
    if n == 0 || anchor >= n {
        return Err(SacoError::InvalidInput("anchor index out of range".into()));
    }
    if n - 1 < config.top_k_pos + config.num_negatives {
        return Err(SacoError::InvalidInput(format!(
            "candidate pool has {} items; need at least top_k_pos + M = {}",
            n - 1,
            config.top_k_pos + config.num_negatives
        )));
    }
    let a = &dataset.items[anchor];
    let anchor_style = a.style_id;
    let mut out = Vec::with_capacity(n - 1);
    for (idx, cand) in dataset.items.iter().enumerate() {
        if idx == anchor {
            continue;
        }
        let p_obj = object_overlap_score(&a.objects, &cand.objects)?;
        let p_roi = cosine_values(cache.pooled(anchor, anchor_style), cache.pooled(idx, anchor_style))?;
        let p_tri = cosine_values(cache.triplet(anchor), cache.triplet(idx))?;
        let p = combined_score(p_obj, p_roi, p_tri, config.theta, config.phi, epoch);
        out.push(RankedCandidate {
            index: idx,
            image_id: cand.image_id.clone(),
            scores: RetrievalScores { p_obj, p_roi, p_tri, p },
        });
    }
    out.sort_by(|x, y| {
        y.scores
            .p
            .partial_cmp(&x.scores.p)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| x.image_id.cmp(&y.image_id))
    });
    Ok(out)
}

/// Uniform draw over the top `top_k` ranked candidates. A pool smaller than
/// `top_k` degrades to a uniform draw over everything (with a warning).
pub fn sample_positive<'a>(
    ranked: &'a [RankedCandidate],
    top_k: usize,
    rng: &mut impl Rng,
) -> Result<&'a RankedCandidate> {
    if ranked.is_empty() {
        return Err(SacoError::InvalidInput("cannot sample a positive from an empty pool".into()));
    }
    let k = if ranked.len() < top_k {
        log::warn!("positive pool has only {} candidates (< top-{top_k})", ranked.len());
        ranked.len()
    } else {
        top_k
    };
    Ok(&ranked[rng.gen_range(0..k)])
}

/// Outcome of one negative draw.
#[derive(Debug, Clone)]
pub struct NegativeDraw {
    /// Positions into the ranked slice.
    pub picks: Vec<usize>,
    pub threshold: f64,
    /// How many picks fell back to lowest-score padding because fewer than M
    /// candidates sat below the threshold.
    pub padded: usize,
}

/// Samples `m` negatives uniformly (without replacement) from the candidates
/// with `P < max(0.1, P_max − ω^μ)`, padding from the bottom of the ranking
/// when the eligible set is too small.
pub fn sample_negatives(
    ranked: &[RankedCandidate],
    m: usize,
    omega: f64,
    epoch: usize,
    rng: &mut impl Rng,
) -> Result<NegativeDraw> {
    if ranked.is_empty() {
        return Err(SacoError::InvalidInput("cannot sample negatives from an empty pool".into()));
    }
    let m = m.min(ranked.len());
    let p_max = ranked[0].scores.p;
    let threshold = negative_threshold(p_max, omega, epoch);
    let mut eligible: Vec<usize> =
        (0..ranked.len()).filter(|i| ranked[*i].scores.p < threshold).collect();
    let mut padded = 0;
    let picks = if eligible.len() >= m {
        eligible.shuffle(rng);
        eligible.truncate(m);
        eligible
    } else {
        let mut picks = eligible;
        // pad from the lowest-scored end of the ranking
        for i in (0..ranked.len()).rev() {
            if picks.len() == m {
                break;
            }
            if !picks.contains(&i) {
                picks.push(i);
                padded += 1;
            }
        }
        log::warn!(
            "only {} candidates below threshold {threshold:.4}; padded {padded} from the tail",
            m - padded
        );
        picks
    };
    Ok(NegativeDraw { picks, threshold, padded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn objset(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    fn ranked_fixture(ps: &[f64]) -> Vec<RankedCandidate> {
        let mut v: Vec<RankedCandidate> = ps
            .iter()
            .enumerate()
            .map(|(i, &p)| RankedCandidate {
                index: i,
                image_id: format!("img_{i:03}"),
                scores: RetrievalScores { p_obj: p, p_roi: 0.0, p_tri: 0.0, p },
            })
            .collect();
        v.sort_by(|a, b| b.scores.p.partial_cmp(&a.scores.p).unwrap());
        v
    }

    #[test]
    fn object_overlap_arithmetic() {
        let a = objset(&["dog", "ball"]);
        assert_eq!(object_overlap_score(&a, &a).unwrap(), 1.0);
        let four = objset(&["a", "b", "c", "d"]);
        let two = objset(&["a", "b", "x"]);
        assert_eq!(object_overlap_score(&four, &two).unwrap(), 0.5);
        assert_eq!(object_overlap_score(&a, &objset(&["tree"])).unwrap(), 0.0);
        assert!(object_overlap_score(&objset(&[]), &a).is_err());
    }

    #[test]
    fn roi_and_triplet_scores_basic() {
        let a = ndarray::array![[1.0, 0.0], [1.0, 0.0]];
        let b = ndarray::array![[0.0, 2.0], [0.0, 2.0]];
        assert!((roi_score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(roi_score(&a, &b).unwrap().abs() < 1e-12);
        assert!((roi_score(&a, &b).unwrap() - roi_score(&b, &a).unwrap()).abs() < 1e-12);

        let h = ndarray::array![[0.6, 0.8]];
        let neg = h.mapv(|x| -x);
        assert!((triplet_score(&h, &h).unwrap() - 1.0).abs() < 1e-12);
        assert!((triplet_score(&h, &neg).unwrap() + 1.0).abs() < 1e-12);
        let zero = ndarray::Array2::zeros((1, 2));
        assert!(triplet_score(&h, &zero).is_err());
    }

    #[test]
    fn combined_score_hand_arithmetic() {
        // μ=0 → P = P_obj exactly
        assert_eq!(combined_score(0.6, 0.4, 0.2, 0.9, 0.5, 0), 0.6);
        // paper hyperparameters, μ=1, only object signal
        assert!((combined_score(1.0, 0.0, 0.0, 0.9, 0.5, 1) - 0.9).abs() < 1e-12);
        // frozen hand-computed values
        assert!((combined_score(0.6, 0.4, 0.2, 0.9, 0.5, 5) - 0.477147).abs() < 1e-12);
        assert!((combined_score(0.6, 0.4, 0.2, 0.9, 0.5, 10) - 0.40460353203).abs() < 1e-11);
        // convex-combination fixed point
        for mu in [0, 1, 7, 30] {
            assert!((combined_score(0.37, 0.37, 0.37, 0.9, 0.5, mu) - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_score_stays_within_component_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let (a, b, c) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let mu = rng.gen_range(0..20);
            let p = combined_score(a, b, c, 0.9, 0.5, mu);
            let lo = a.min(b).min(c) - 1e-12;
            let hi = a.max(b).max(c) + 1e-12;
            assert!(p >= lo && p <= hi);
        }
    }

    #[test]
    fn object_weight_decays_monotonically() {
        let mut last = f64::INFINITY;
        for mu in 0..30 {
            let w = 0.9f64.powi(mu);
            assert!(w < last);
            last = w;
        }
    }

    #[test]
    fn negative_threshold_schedule() {
        assert!((negative_threshold(0.9, 0.8, 1) - 0.1).abs() < 1e-12);
        assert!((negative_threshold(0.9, 0.8, 10) - 0.7926258176).abs() < 1e-6);
        // μ=0: ω^0 = 1 → max(0.1, P_max − 1)
        assert_eq!(negative_threshold(0.9, 0.8, 0), 0.1);
        assert_eq!(negative_threshold(1.05, 0.8, 0), 0.1);
        // non-decreasing in μ
        let mut last = 0.0;
        for mu in 0..40 {
            let t = negative_threshold(0.9, 0.8, mu);
            assert!(t >= last - 1e-15);
            last = t;
        }
    }

    #[test]
    fn positive_sampling_hits_only_top_ten_uniformly() {
        let ranked = ranked_fixture(&[
            0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5, 0.4, 0.3, 0.2, 0.1,
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = vec![0usize; ranked.len()];
        for _ in 0..10_000 {
            let pick = sample_positive(&ranked, 10, &mut rng).unwrap();
            let pos = ranked.iter().position(|c| c.image_id == pick.image_id).unwrap();
            counts[pos] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / 10_000.0;
            if i < 10 {
                assert!((freq - 0.1).abs() <= 0.01, "rank {i}: {freq}");
            } else {
                assert_eq!(c, 0, "rank {i} beyond top-10 must never be drawn");
            }
        }
    }

    #[test]
    fn positive_sampling_degrades_below_top_k() {
        let ranked = ranked_fixture(&[0.9, 0.5, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert!(sample_positive(&ranked, 10, &mut rng).is_ok());
        }
        let single = ranked_fixture(&[0.7]);
        let pick = sample_positive(&single, 10, &mut rng).unwrap();
        assert_eq!(pick.image_id, "img_000");
    }

    #[test]
    fn positive_sampling_is_seed_deterministic() {
        let ranked = ranked_fixture(&[0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.01]);
        let picks1: Vec<String> = {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..20).map(|_| sample_positive(&ranked, 10, &mut rng).unwrap().image_id.clone()).collect()
        };
        let picks2: Vec<String> = {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..20).map(|_| sample_positive(&ranked, 10, &mut rng).unwrap().image_id.clone()).collect()
        };
        assert_eq!(picks1, picks2);
    }

    #[test]
    fn negatives_respect_threshold_or_are_counted_as_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..200 {
            let n = rng.gen_range(6..25);
            let ps: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let ranked = ranked_fixture(&ps);
            let mu = rng.gen_range(0..12);
            let m = rng.gen_range(1..5);
            let draw = sample_negatives(&ranked, m, 0.8, mu, &mut rng).unwrap();
            assert_eq!(draw.picks.len(), m.min(ranked.len()), "trial {trial}");
            let mut below = 0;
            for &i in &draw.picks {
                if ranked[i].scores.p < draw.threshold {
                    below += 1;
                }
            }
            assert_eq!(below, draw.picks.len() - draw.padded, "trial {trial}");
            // no duplicates
            let set: BTreeSet<_> = draw.picks.iter().collect();
            assert_eq!(set.len(), draw.picks.len());
        }
    }

    #[test]
    fn negatives_pad_from_lowest_scores() {
        // every candidate above threshold → all picks are padding from the tail
        let ranked = ranked_fixture(&[0.99, 0.98, 0.97, 0.96]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // μ large → threshold ≈ P_max − small, still below 0.96? choose μ so
        // threshold sits above all: P_max − ω^μ with μ=0 → 0.1 floor, all above
        let draw = sample_negatives(&ranked, 2, 0.8, 0, &mut rng).unwrap();
        assert_eq!(draw.threshold, 0.1);
        assert_eq!(draw.padded, 2);
        // padding walks from the lowest-P end
        assert!(draw.picks.contains(&3) && draw.picks.contains(&2));
    }
}
