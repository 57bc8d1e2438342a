//! Style embedding, visual projection, and the style-aware visual encoder.
//!
//! The encoder concatenates the projected visual sequence with the style
//! embedding, adds learned positional embeddings (one per visual slot plus a
//! dedicated style slot), and runs the self-attention stack. The output
//! splits back into style-aware visual features `V^s` (m rows) and the
//! vision-aware style feature `s^v` (last row).

use crate::error::{Result, SacoError};
use crate::model::Model;
use crate::tensor::{self, Binder, Tape, Var};
use ndarray::Array2;

/// Output of [`Model::style_aware_encode`].
pub struct Fused {
    /// Style-aware visual features, m×d.
    pub v_s: Var,
    /// Vision-aware style feature, 1×d.
    pub s_v: Var,
    /// Attention nodes per layer; probabilities via [`Tape::attention_probs`].
    pub attn: Vec<Var>,
}

/// Plain-value snapshot of a fused representation, detached from any tape.
#[derive(Debug, Clone)]
pub struct FusedValues {
    pub v_s: Array2<f64>,
    pub s_v: Array2<f64>,
}

impl Model {
    /// Row `style_id` of the style table. One-hot × matrix is exactly row
    /// selection, so the embedding is bit-equal to indexing.
    pub fn encode_style(&self, tape: &mut Tape, bind: &mut Binder, style_id: usize) -> Result<Var> {
        if style_id >= self.config.n_styles {
            return Err(SacoError::InvalidInput(format!(
                "style id {style_id} out of range (|styles| = {})",
                self.config.n_styles
            )));
        }
        let table = bind.var(tape, &self.params, "style.table");
        Ok(tape.rows_select(table, &[style_id]))
    }

    /// Position-wise MLP mapping raw m×d′ features to m×d.
    pub fn project_visual(&self, tape: &mut Tape, bind: &mut Binder, raw: &Array2<f64>) -> Result<Var> {
        if raw.ncols() != self.config.d_raw {
            return Err(SacoError::ShapeMismatch(format!(
                "raw features have d′={}, config says {}",
                raw.ncols(),
                self.config.d_raw
            )));
        }
        if raw.nrows() == 0 {
            return Err(SacoError::ShapeMismatch("raw features need m ≥ 1 rows".into()));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(SacoError::Numerical("non-finite visual features".into()));
        }
        let x = tape.leaf_owned(raw.clone());
        let (w1, b1) = (
            bind.var(tape, &self.params, "proj.l1.w"),
            bind.var(tape, &self.params, "proj.l1.b"),
        );
        let (w2, b2) = (
            bind.var(tape, &self.params, "proj.l2.w"),
            bind.var(tape, &self.params, "proj.l2.b"),
        );
        let h = tape.linear(x, w1, b1);
        let h = tape.gelu(h);
        Ok(tape.linear(h, w2, b2))
    }

    /// Style-aware fusion: self-attention over `[V; s]` with positional
    /// embeddings, split back into `(V^s, s^v)`.
    pub fn style_aware_encode(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        v: Var,
        s: Var,
    ) -> Result<Fused> {
        self.style_aware_encode_opts(tape, bind, v, s, false)
    }

    /// As [`Model::style_aware_encode`] but optionally masking attention to
    /// self-only (degenerate-layer test hook).
    pub fn style_aware_encode_opts(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        v: Var,
        s: Var,
        self_only: bool,
    ) -> Result<Fused> {
        let m = self.config.m;
        let (vr, vc) = tape.value(v).dim();
        if vr != m || vc != self.config.d {
            return Err(SacoError::ShapeMismatch(format!(
                "V must be {m}×{}, got {vr}×{vc}",
                self.config.d
            )));
        }
        if tape.value(s).dim() != (1, self.config.d) {
            return Err(SacoError::ShapeMismatch("style feature must be 1×d".into()));
        }
        if tape.value(v).iter().chain(tape.value(s).iter()).any(|x| !x.is_finite()) {
            return Err(SacoError::Numerical("non-finite encoder input".into()));
        }
        let pos = bind.var(tape, &self.params, "enc.pos");
        let stacked = tape.concat_rows(&[v, s]);
        let mut x = tape.add(stacked, pos);
        let mask = self_only.then(|| tensor::self_only_mask(m + 1));
        let mut attn = Vec::with_capacity(self.config.enc_layers);
        for i in 0..self.config.enc_layers {
            let (out, ctx) =
                self.block(tape, bind, &format!("enc.layer{i}"), x, self.config.enc_heads, mask.as_ref());
            x = out;
            attn.push(ctx);
        }
        let x = self.final_norm(tape, bind, "enc.lnf", x);
        let v_s = tape.slice_rows(x, 0, m);
        let s_v = tape.slice_rows(x, m, 1);
        Ok(Fused { v_s, s_v, attn })
    }

    /// Projection + style embedding + fusion for one (image, style) pair.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        raw: &Array2<f64>,
        style_id: usize,
    ) -> Result<Fused> {
        let v = self.project_visual(tape, bind, raw)?;
        let s = self.encode_style(tape, bind, style_id)?;
        self.style_aware_encode(tape, bind, v, s)
    }

    /// Detached fused representation for inference and retrieval caching.
    pub fn fuse_values(&self, raw: &Array2<f64>, style_id: usize) -> Result<FusedValues> {
        let mut tape = Tape::new();
        let mut bind = Binder::new();
        let fused = self.fuse(&mut tape, &mut bind, raw, style_id)?;
        Ok(FusedValues {
            v_s: tape.value(fused.v_s).clone(),
            s_v: tape.value(fused.s_v).clone(),
        })
    }
}

/// Arithmetic mean over the rows of `V^s` (the contrastive readout `r`).
pub fn pool(tape: &mut Tape, v_s: Var) -> Var {
    tape.mean_rows(v_s)
}

/// Detached mean-pool of a matrix.
pub fn pool_values(v_s: &Array2<f64>) -> Array2<f64> {
    let m = v_s.nrows() as f64;
    (v_s.sum_axis(ndarray::Axis(0)) / m).insert_axis(ndarray::Axis(0))
}
