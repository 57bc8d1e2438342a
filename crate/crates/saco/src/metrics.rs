//! Corpus caption metrics: BLEU-1..4, ROUGE-L, and CIDEr-D.
//!
//! The conventions follow the public COCO caption evaluation toolkit so the
//! shipped golden fixtures act as an oracle: BLEU uses corpus-level modified
//! n-gram precision with the closest-reference-length brevity penalty,
//! ROUGE-L takes the max precision/recall over references with β = 1.2, and
//! CIDEr is the CIDEr-D variant (tf-idf n-grams for n = 1..4, count clipping,
//! Gaussian length penalty with σ = 6, ×10 scale).

use crate::error::{Result, SacoError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

const MAX_N: usize = 4;
const BLEU_SMALL: f64 = 1e-9;
const BLEU_TINY: f64 = 1e-15;
const ROUGE_BETA: f64 = 1.2;
const CIDER_SIGMA: f64 = 6.0;

/// Candidate and reference captions keyed by item id.
///
/// `BTreeMap` keys keep every corpus walk deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoringCorpus {
    pub candidates: BTreeMap<String, String>,
    pub references: BTreeMap<String, Vec<String>>,
}

impl ScoringCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(SacoError::InvalidInput("empty scoring corpus".into()));
        }
        for (id, _) in &self.candidates {
            match self.references.get(id) {
                Some(refs) if !refs.is_empty() => {}
                _ => {
                    return Err(SacoError::InvalidInput(format!(
                        "candidate `{id}` has no references"
                    )))
                }
            }
        }
        Ok(())
    }

    fn pairs(&self) -> (Vec<&str>, Vec<&Vec<String>>) {
        let cands: Vec<&str> = self.candidates.values().map(|s| s.as_str()).collect();
        let refs: Vec<&Vec<String>> =
            self.candidates.keys().map(|id| &self.references[id]).collect();
        (cands, refs)
    }
}

/// Full metric map produced by scoring a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
}

/// Scores candidates against references with all three metrics.
pub fn score_corpus(corpus: &ScoringCorpus) -> Result<MetricReport> {
    corpus.validate()?;
    let (cands, refs) = corpus.pairs();
    let b = bleu(&cands, &refs);
    Ok(MetricReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge_l(&cands, &refs),
        cider: cider(&cands, &refs),
    })
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// N-gram keyed by its tokens joined with an unprintable separator. Returns
/// a sorted map so every float accumulation over n-grams has a fixed order
/// (bit-reproducible scores across processes).
fn ngram_counts(toks: &[String]) -> BTreeMap<String, (usize, usize)> {
    // value = (count, n)
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for n in 1..=MAX_N {
        if toks.len() < n {
            break;
        }
        for w in toks.windows(n) {
            let key = w.join("\u{1f}");
            counts.entry(key).or_insert((0, n)).0 += 1;
        }
    }
    counts
}

/// Corpus BLEU-1..4: cumulative geometric-mean precisions with the
/// closest-reference-length brevity penalty (ties go to the shorter length).
pub fn bleu(candidates: &[&str], references: &[&Vec<String>]) -> [f64; MAX_N] {
    let mut total_guess = [0usize; MAX_N];
    let mut total_correct = [0usize; MAX_N];
    let mut total_testlen = 0usize;
    let mut total_reflen = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        let ctoks = tokens(cand);
        let ccounts = ngram_counts(&ctoks);
        let mut maxcounts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut reflens = Vec::with_capacity(refs.len());
        for r in refs.iter() {
            let rtoks = tokens(r);
            reflens.push(rtoks.len());
            for (key, (cnt, n)) in ngram_counts(&rtoks) {
                let e = maxcounts.entry(key).or_insert((0, n));
                e.0 = e.0.max(cnt);
            }
        }
        let testlen = ctoks.len();
        let reflen = reflens
            .iter()
            .copied()
            .min_by_key(|&l| ((l as i64 - testlen as i64).abs(), l))
            .unwrap_or(0);
        total_testlen += testlen;
        total_reflen += reflen;
        for k in 0..MAX_N {
            total_guess[k] += testlen.saturating_sub(k);
        }
        for (key, (cnt, n)) in &ccounts {
            let clip = maxcounts.get(key).map(|e| e.0).unwrap_or(0);
            total_correct[n - 1] += (*cnt).min(clip);
        }
    }
    let mut out = [0.0; MAX_N];
    let mut prod = 1.0;
    for k in 0..MAX_N {
        prod *= (total_correct[k] as f64 + BLEU_TINY) / (total_guess[k] as f64 + BLEU_SMALL);
        out[k] = prod.powf(1.0 / (k as f64 + 1.0));
    }
    let ratio = (total_testlen as f64 + BLEU_TINY) / (total_reflen as f64 + BLEU_SMALL);
    if ratio < 1.0 {
        let bp = (1.0 - 1.0 / ratio).exp();
        for b in &mut out {
            *b *= bp;
        }
    }
    out
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            cur[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean over items of the LCS F-score with β = 1.2, taking the max precision
/// and max recall over an item's references independently.
pub fn rouge_l(candidates: &[&str], references: &[&Vec<String>]) -> f64 {
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let ctoks = tokens(cand);
        let mut pmax = 0.0f64;
        let mut rmax = 0.0f64;
        for r in refs.iter() {
            let rtoks = tokens(r);
            if ctoks.is_empty() || rtoks.is_empty() {
                continue;
            }
            let lcs = lcs_len(&rtoks, &ctoks) as f64;
            pmax = pmax.max(lcs / ctoks.len() as f64);
            rmax = rmax.max(lcs / rtoks.len() as f64);
        }
        if pmax > 0.0 && rmax > 0.0 {
            let b2 = ROUGE_BETA * ROUGE_BETA;
            total += ((1.0 + b2) * pmax * rmax) / (rmax + b2 * pmax);
        }
    }
    total / candidates.len() as f64
}

/// Precomputed CIDEr document-frequency table.
///
/// Built once over a reference corpus and reusable for per-item scoring, so
/// self-critical rewards stay stable while the model changes.
#[derive(Debug, Clone)]
pub struct CiderDf {
    df: HashMap<String, f64>,
    log_num_items: f64,
}

impl CiderDf {
    /// One document per item: an n-gram's df is the number of items whose
    /// reference set contains it.
    pub fn build(references: &[&Vec<String>]) -> Self {
        let mut df: HashMap<String, f64> = HashMap::new();
        for refs in references {
            let mut seen: std::collections::BTreeSet<String> = Default::default();
            for r in refs.iter() {
                seen.extend(ngram_counts(&tokens(r)).into_keys());
            }
            for key in seen {
                *df.entry(key).or_insert(0.0) += 1.0;
            }
        }
        CiderDf { df, log_num_items: (references.len() as f64).ln() }
    }

    fn tfidf(&self, toks: &[String]) -> ([BTreeMap<String, f64>; MAX_N], [f64; MAX_N], usize) {
        let mut vec: [BTreeMap<String, f64>; MAX_N] = Default::default();
        let mut norm = [0.0; MAX_N];
        let mut length = 0usize;
        for (key, (tf, n)) in ngram_counts(toks) {
            let df = self.df.get(&key).copied().unwrap_or(0.0).max(1.0).ln();
            let w = tf as f64 * (self.log_num_items - df);
            norm[n - 1] += w * w;
            if n == 2 {
                length += tf;
            }
            vec[n - 1].insert(key, w);
        }
        for n in &mut norm {
            *n = n.sqrt();
        }
        (vec, norm, length)
    }

    /// CIDEr-D score of one candidate against its references.
    pub fn score_item(&self, candidate: &str, refs: &[String]) -> f64 {
        let (cv, cn, cl) = self.tfidf(&tokens(candidate));
        let mut acc = [0.0; MAX_N];
        for r in refs {
            let (rv, rn, rl) = self.tfidf(&tokens(r));
            let delta = cl as f64 - rl as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..MAX_N {
                let mut val = 0.0;
                for (key, w) in &cv[n] {
                    let rw = rv[n].get(key).copied().unwrap_or(0.0);
                    val += w.min(rw) * rw;
                }
                if cn[n] != 0.0 && rn[n] != 0.0 {
                    val /= cn[n] * rn[n];
                }
                acc[n] += val * penalty;
            }
        }
        acc.iter().sum::<f64>() / MAX_N as f64 / refs.len() as f64 * 10.0
    }
}

/// Corpus CIDEr-D: df built from these references, mean of per-item scores.
pub fn cider(candidates: &[&str], references: &[&Vec<String>]) -> f64 {
    let df = CiderDf::build(references);
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| df.score_item(c, r))
        .sum();
    total / candidates.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(pairs: &[(&str, &[&str])]) -> ScoringCorpus {
        let mut candidates = BTreeMap::new();
        let mut references = BTreeMap::new();
        for (i, (c, rs)) in pairs.iter().enumerate() {
            let id = format!("i{i:02}");
            candidates.insert(id.clone(), c.to_string());
            references.insert(id, rs.iter().map(|s| s.to_string()).collect());
        }
        ScoringCorpus { candidates, references }
    }

    #[test]
    fn perfect_match_scores_one_for_bleu_and_rouge() {
        let c = corpus(&[
            ("a dog runs fast today", &["a dog runs fast today"]),
            ("the cat sleeps on mats", &["the cat sleeps on mats"]),
        ]);
        let r = score_corpus(&c).unwrap();
        assert!((r.bleu1 - 1.0).abs() < 1e-6);
        assert!((r.bleu4 - 1.0).abs() < 1e-6);
        assert!((r.rouge_l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_tokens_score_zero() {
        let c = corpus(&[("purple rocks", &["a green tree grows"])]);
        let r = score_corpus(&c).unwrap();
        assert!(r.bleu1 < 1e-5);
        assert_eq!(r.rouge_l, 0.0);
        assert_eq!(r.cider, 0.0);
    }

    #[test]
    fn rouge_single_reference_hand_case() {
        let cands = ["the cat"];
        let refs_owned = vec![vec!["the cat sat".to_string()]];
        let refs: Vec<&Vec<String>> = refs_owned.iter().collect();
        let got = rouge_l(&cands, &refs);
        // LCS=2, P=1, R=2/3, beta=1.2
        let expect = (1.0 + 1.44) * 1.0 * (2.0 / 3.0) / ((2.0 / 3.0) + 1.44);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!((got - 0.7722).abs() < 1e-4);
    }

    #[test]
    fn duplicate_reference_never_decreases_rouge() {
        let c1 = corpus(&[("a dog runs", &["a dog sits"])]);
        let c2 = corpus(&[("a dog runs", &["a dog sits", "a dog sits"])]);
        let r1 = score_corpus(&c1).unwrap();
        let r2 = score_corpus(&c2).unwrap();
        assert!(r2.rouge_l >= r1.rouge_l);
    }

    #[test]
    fn item_order_does_not_change_scores() {
        // BTreeMap keying makes this structural, but exercise it end to end.
        let a = corpus(&[
            ("a dog runs", &["a dog runs quickly"]),
            ("the sun sets", &["the red sun sets"]),
        ]);
        let mut b = a.clone();
        // reinsert in reverse
        let cands: Vec<_> = a.candidates.clone().into_iter().rev().collect();
        b.candidates = cands.into_iter().collect();
        let ra = score_corpus(&a).unwrap();
        let rb = score_corpus(&b).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let c = corpus(&[("", &["a dog runs"])]);
        let r = score_corpus(&c).unwrap();
        assert_eq!(r.bleu1, 0.0);
        assert_eq!(r.rouge_l, 0.0);
        assert_eq!(r.cider, 0.0);
    }

    #[test]
    fn missing_reference_is_invalid() {
        let mut c = corpus(&[("a dog", &["a dog"])]);
        c.references.clear();
        assert!(score_corpus(&c).is_err());
    }

    #[test]
    fn cider_df_frozen_scoring_matches_corpus_path() {
        let c = corpus(&[
            ("a happy dog", &["a happy dog"]),
            ("water falls far", &["water falls far away"]),
            ("the moon glows", &["the pale moon glows"]),
        ]);
        let (cands, refs) = c.pairs();
        let whole = cider(&cands, &refs);
        let df = CiderDf::build(&refs);
        let per_item: f64 = cands
            .iter()
            .zip(&refs)
            .map(|(cand, r)| df.score_item(cand, r))
            .sum::<f64>()
            / cands.len() as f64;
        assert!((whole - per_item).abs() < 1e-12);
    }
}
