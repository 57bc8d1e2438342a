//! Similarity kernel and the two InfoNCE objectives: style-aware visual
//! contrast (SVC) over pooled encoder readouts, and style-aware triplet
//! contrast (STC) over triplet representations.

use crate::encoders::{pool, Fused};
use crate::error::{Result, SacoError};
use crate::tensor::{Tape, Var};

/// Smallest vector norm treated as nonzero. Anything below indicates a
/// collapsed representation and fails loudly.
const MIN_NORM: f64 = 1e-12;

fn check_norm(tape: &Tape, v: Var, role: &str) -> Result<()> {
    let val = tape.value(v);
    let norm = val.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < MIN_NORM {
        return Err(SacoError::Numerical(format!(
            "{role} vector has zero or non-finite norm ({norm:e})"
        )));
    }
    Ok(())
}

/// Cosine similarity of two nonzero vectors, in [−1, 1].
pub fn cosine_sim(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    check_norm(tape, a, "left")?;
    check_norm(tape, b, "right")?;
    if tape.value(a).dim() != tape.value(b).dim() {
        return Err(SacoError::ShapeMismatch("cosine_sim dimension mismatch".into()));
    }
    Ok(tape.cosine_sim(a, b))
}

/// InfoNCE: `−log e^{sim(a,p)/τ} / (e^{sim(a,p)/τ} + Σᵢ e^{sim(a,nᵢ)/τ})`,
/// stabilized by max subtraction.
pub fn info_nce(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    tau: f64,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(SacoError::InvalidInput("need at least one negative sample".into()));
    }
    if tau <= 0.0 {
        return Err(SacoError::InvalidInput("temperature must be positive".into()));
    }
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    sims.push(cosine_sim(tape, anchor, positive)?);
    for n in negatives {
        sims.push(cosine_sim(tape, anchor, *n)?);
    }
    Ok(tape.info_nce_from_sims(&sims, tau))
}

/// Style-aware visual contrast: one InfoNCE term over pooled visual readouts
/// `r = pool(V^s)` plus one over the vision-aware style readouts `s^v`,
/// summed unweighted.
pub fn svc_loss(
    tape: &mut Tape,
    anchor: &Fused,
    positive: &Fused,
    negatives: &[Fused],
    tau: f64,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(SacoError::InvalidInput("svc_loss needs at least one negative".into()));
    }
    let r_a = pool(tape, anchor.v_s);
    let r_p = pool(tape, positive.v_s);
    let r_n: Vec<Var> = negatives.iter().map(|f| pool(tape, f.v_s)).collect();
    let visual_term = info_nce(tape, r_a, r_p, &r_n, tau)?;

    let s_n: Vec<Var> = negatives.iter().map(|f| f.s_v).collect();
    let style_term = info_nce(tape, anchor.s_v, positive.s_v, &s_n, tau)?;
    Ok(tape.add(visual_term, style_term))
}

/// Style-aware triplet contrast: a single InfoNCE term over triplet
/// representations from the decoder.
pub fn stc_loss(tape: &mut Tape, h: Var, h_pos: Var, h_negs: &[Var], tau: f64) -> Result<Var> {
    if h_negs.is_empty() {
        return Err(SacoError::InvalidInput("stc_loss needs at least one negative".into()));
    }
    info_nce(tape, h, h_pos, h_negs, tau)
}
