//! Model configuration, parameter initialization, the shared transformer
//! block, and checkpoint I/O.
//!
//! One [`Model`] owns every parameter of the pipeline: style table, visual
//! projection MLP, style-aware encoder stack, and the caption decoder stack.
//! Forward passes live in `encoders` and `generator`; they borrow the same
//! [`Params`] through a per-tape [`Binder`] so gradients accumulate across
//! anchor, positive, and negative branches of one graph.

use crate::error::{Result, SacoError};
use crate::tensor::{Binder, Mask, Params, Tape, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// Shapes and sizes of the full model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Fused/style embedding dimension.
    pub d: usize,
    /// Raw visual feature dimension (per position, before projection).
    pub d_raw: usize,
    /// Decoder hidden dimension.
    pub d_h: usize,
    /// Visual positions per image.
    pub m: usize,
    pub n_styles: usize,
    pub vocab_size: usize,
    /// Self-attention layers in the style-aware encoder.
    pub enc_layers: usize,
    pub enc_heads: usize,
    /// Decoder layers/heads.
    pub dec_layers: usize,
    pub dec_heads: usize,
    /// FFN width multiplier inside transformer blocks.
    pub ffn_mult: usize,
    /// Maximum caption length in tokens.
    pub max_len: usize,
    /// Feed the vision-aware style feature to the decoder as a memory token.
    pub decoder_uses_style_token: bool,
    /// Skip the activation inside the triplet MLP (linear test mode).
    #[serde(default)]
    pub tri_linear: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// CPU-friendly defaults used by the synthetic pipeline.
    pub fn toy(n_styles: usize, vocab_size: usize) -> Self {
        ModelConfig {
            d: 32,
            d_raw: 64,
            d_h: 64,
            m: 9,
            n_styles,
            vocab_size,
            enc_layers: 3,
            enc_heads: 4,
            dec_layers: 2,
            dec_heads: 4,
            ffn_mult: 4,
            max_len: 30,
            decoder_uses_style_token: true,
            tri_linear: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_raw", self.d_raw),
            ("d_h", self.d_h),
            ("m", self.m),
            ("n_styles", self.n_styles),
            ("vocab_size", self.vocab_size),
            ("enc_layers", self.enc_layers),
            ("enc_heads", self.enc_heads),
            ("dec_layers", self.dec_layers),
            ("dec_heads", self.dec_heads),
            ("ffn_mult", self.ffn_mult),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SacoError::InvalidInput(format!("{name} must be ≥ 1")));
            }
        }
        if self.vocab_size < 5 {
            return Err(SacoError::InvalidInput("vocab_size must be ≥ 5".into()));
        }
        if self.d_raw < self.d {
            return Err(SacoError::InvalidInput(format!(
                "projection requires d_raw ≥ d ({} < {})",
                self.d_raw, self.d
            )));
        }
        if self.d % self.enc_heads != 0 {
            return Err(SacoError::InvalidInput("enc_heads must divide d".into()));
        }
        if self.d_h % self.dec_heads != 0 {
            return Err(SacoError::InvalidInput("dec_heads must divide d_h".into()));
        }
        Ok(())
    }
}

/// Structural switches for transformer blocks. Production uses the default;
/// degenerate settings exist so tests can isolate the attention arithmetic.
#[derive(Debug, Clone, Copy)]
pub struct BlockStructure {
    pub layer_norm: bool,
    pub residual: bool,
    pub ffn: bool,
}

impl Default for BlockStructure {
    fn default() -> Self {
        BlockStructure { layer_norm: true, residual: true, ffn: true }
    }
}

impl BlockStructure {
    /// Pure attention: no norm, no residual, no FFN.
    pub fn bare() -> Self {
        BlockStructure { layer_norm: false, residual: false, ffn: false }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub structure: BlockStructure,
}

impl Model {
    /// Fresh model with seeded initialization. Every parameter gets its own
    /// named RNG stream, so init is independent of construction order.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let c = &config;
        let d_ff_enc = c.d * c.ffn_mult;
        let d_ff_dec = c.d_h * c.ffn_mult;

        let emb = |params: &mut Params, name: &str, rows: usize, cols: usize| {
            params.insert(name, gaussian(c.seed, name, rows, cols, 0.02));
        };
        let lin = |params: &mut Params, name: &str, fan_in: usize, fan_out: usize| {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            params.insert(format!("{name}.w"), gaussian(c.seed, name, fan_in, fan_out, std));
            params.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
        };

        emb(&mut params, "style.table", c.n_styles, c.d);
        lin(&mut params, "proj.l1", c.d_raw, c.d);
        lin(&mut params, "proj.l2", c.d, c.d);
        emb(&mut params, "enc.pos", c.m + 1, c.d);
        for i in 0..c.enc_layers {
            block_params(&mut params, &format!("enc.layer{i}"), c.seed, c.d, d_ff_enc);
        }
        norm_params(&mut params, "enc.lnf", c.d);

        emb(&mut params, "dec.tok", c.vocab_size, c.d_h);
        emb(&mut params, "dec.pos", c.max_len, c.d_h);
        emb(&mut params, "dec.mem_pos", c.m + 1, c.d_h);
        lin(&mut params, "dec.mem_proj", c.d, c.d_h);
        for i in 0..c.dec_layers {
            block_params(&mut params, &format!("dec.layer{i}"), c.seed, c.d_h, d_ff_dec);
        }
        norm_params(&mut params, "dec.lnf", c.d_h);
        lin(&mut params, "dec.head", c.d_h, c.vocab_size);
        lin(&mut params, "tri.l1", c.d_h, c.d_h);
        lin(&mut params, "tri.l2", c.d_h, c.d);

        Ok(Model { config, params, structure: BlockStructure::default() })
    }

    /// One transformer block (pre-LN attention + FFN) under `prefix`.
    pub(crate) fn block(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        prefix: &str,
        x: Var,
        heads: usize,
        mask: Option<&Mask>,
    ) -> (Var, Var) {
        let p = |tape: &mut Tape, bind: &mut Binder, suffix: &str| -> Var {
            bind.var(tape, &self.params, &format!("{prefix}.{suffix}"))
        };
        let st = self.structure;
        let h = if st.layer_norm {
            let g = p(tape, bind, "ln1.g");
            let b = p(tape, bind, "ln1.b");
            tape.layer_norm(x, g, b)
        } else {
            x
        };
        let (wq, bq) = (p(tape, bind, "attn.q.w"), p(tape, bind, "attn.q.b"));
        let (wk, bk) = (p(tape, bind, "attn.k.w"), p(tape, bind, "attn.k.b"));
        let (wv, bv) = (p(tape, bind, "attn.v.w"), p(tape, bind, "attn.v.b"));
        let (wo, bo) = (p(tape, bind, "attn.o.w"), p(tape, bind, "attn.o.b"));
        let q = tape.linear(h, wq, bq);
        let k = tape.linear(h, wk, bk);
        let v = tape.linear(h, wv, bv);
        let ctx = tape.mha(q, k, v, heads, mask);
        let attn_out = tape.linear(ctx, wo, bo);
        let mut x = if st.residual { tape.add(x, attn_out) } else { attn_out };
        if st.ffn {
            let h2 = if st.layer_norm {
                let g = p(tape, bind, "ln2.g");
                let b = p(tape, bind, "ln2.b");
                tape.layer_norm(x, g, b)
            } else {
                x
            };
            let (w1, b1) = (p(tape, bind, "ffn.l1.w"), p(tape, bind, "ffn.l1.b"));
            let (w2, b2) = (p(tape, bind, "ffn.l2.w"), p(tape, bind, "ffn.l2.b"));
            let a = tape.linear(h2, w1, b1);
            let a = tape.gelu(a);
            let f = tape.linear(a, w2, b2);
            x = if st.residual { tape.add(x, f) } else { f };
        }
        (x, ctx)
    }

    pub(crate) fn final_norm(
        &self,
        tape: &mut Tape,
        bind: &mut Binder,
        prefix: &str,
        x: Var,
    ) -> Var {
        if !self.structure.layer_norm {
            return x;
        }
        let g = bind.var(tape, &self.params, &format!("{prefix}.g"));
        let b = bind.var(tape, &self.params, &format!("{prefix}.b"));
        tape.layer_norm(x, g, b)
    }

    /// Writes `<path>` (binary parameter archive) and `<path>.json` (config
    /// sidecar). The archive is deterministic: entries in name order,
    /// little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"SACOCKPT")?;
        f.write_all(&1u32.to_le_bytes())?;
        f.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, value) in self.params.iter() {
            let bytes = name.as_bytes();
            f.write_all(&(bytes.len() as u32).to_le_bytes())?;
            f.write_all(bytes)?;
            f.write_all(&(value.nrows() as u32).to_le_bytes())?;
            f.write_all(&(value.ncols() as u32).to_le_bytes())?;
            for x in value.iter() {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;
        let sidecar = sidecar_path(path);
        std::fs::write(sidecar, serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(path);
        let config: ModelConfig = serde_json::from_str(
            &std::fs::read_to_string(&sidecar).map_err(|e| {
                SacoError::Data(format!("missing config sidecar {}: {e}", sidecar.display()))
            })?,
        )?;
        let mut model = Model::new(config)?;
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"SACOCKPT" {
            return Err(SacoError::Data(format!("{} is not a checkpoint", path.display())));
        }
        let version = read_u32(&mut f)?;
        if version != 1 {
            return Err(SacoError::Data(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut f)? as usize;
        for _ in 0..count {
            let name_len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| SacoError::Data("bad parameter name".into()))?;
            let rows = read_u32(&mut f)? as usize;
            let cols = read_u32(&mut f)? as usize;
            let mut buf = vec![0u8; rows * cols * 8];
            f.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| SacoError::Data(format!("bad shape for {name}: {e}")))?;
            let existing = model.params.try_get(&name).ok_or_else(|| {
                SacoError::Data(format!("checkpoint parameter `{name}` not in model"))
            })?;
            if existing.dim() != arr.dim() {
                return Err(SacoError::Data(format!(
                    "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                    arr.dim(),
                    existing.dim()
                )));
            }
            *model.params.get_mut(&name) = arr;
        }
        Ok(model)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// SHA-256 of a checkpoint file, hex lowercase.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn block_params(params: &mut Params, prefix: &str, seed: u64, d: usize, d_ff: usize) {
    let std = (2.0 / (2 * d) as f64).sqrt();
    for proj in ["q", "k", "v", "o"] {
        let name = format!("{prefix}.attn.{proj}");
        params.insert(format!("{name}.w"), gaussian(seed, &name, d, d, std));
        params.insert(format!("{name}.b"), Array2::zeros((1, d)));
    }
    let s1 = (2.0 / (d + d_ff) as f64).sqrt();
    params.insert(format!("{prefix}.ffn.l1.w"), gaussian(seed, &format!("{prefix}.ffn.l1"), d, d_ff, s1));
    params.insert(format!("{prefix}.ffn.l1.b"), Array2::zeros((1, d_ff)));
    params.insert(format!("{prefix}.ffn.l2.w"), gaussian(seed, &format!("{prefix}.ffn.l2"), d_ff, d, s1));
    params.insert(format!("{prefix}.ffn.l2.b"), Array2::zeros((1, d)));
    norm_params(params, &format!("{prefix}.ln1"), d);
    norm_params(params, &format!("{prefix}.ln2"), d);
}

fn norm_params(params: &mut Params, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.g"), Array2::ones((1, d)));
    params.insert(format!("{prefix}.b"), Array2::zeros((1, d)));
}

/// Seeded gaussian init; the stream is keyed by (seed, name) so parameter
/// values do not depend on insertion order.
fn gaussian(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    Array2::from_shape_fn((rows, cols), |_| std * normal_sample(&mut rng))
}

fn normal_sample(rng: &mut impl Rng) -> f64 {
    // Box-Muller; avoids log(0) by nudging the open interval.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
