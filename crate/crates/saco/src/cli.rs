//! Command implementations behind the `saco` binary: config loading, flag
//! merging, and the train / finetune / eval / generate / score /
//! retrieve-debug / synth-data entry points.

use crate::data::{generate_synthetic, Dataset, SyntheticSpec};
use crate::error::{Result, SacoError};
use crate::metrics::{score_corpus, ScoringCorpus};
use crate::model::{Model, ModelConfig};
use crate::retrieval::{rank_candidates, RepresentationCache, SamplerConfig};
use crate::training::{
    self, decode_corpus, evaluate, DecodeMode, TrainConfig,
};
use crate::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Model dimensions settable from a config file. Data-derived sizes
/// (m, d_raw, |styles|, |V|) always come from the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliModelConfig {
    pub d: usize,
    pub d_h: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub decoder_uses_style_token: bool,
}

impl Default for CliModelConfig {
    fn default() -> Self {
        CliModelConfig {
            d: 32,
            d_h: 64,
            enc_layers: 3,
            enc_heads: 4,
            dec_layers: 2,
            dec_heads: 4,
            ffn_mult: 4,
            max_len: 30,
            decoder_uses_style_token: true,
        }
    }
}

/// The `--config` file: data path, output directory, model dims, training
/// and sampler hyperparameters. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub data: String,
    pub out: String,
    pub model: CliModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            data: String::new(),
            out: "out".into(),
            model: CliModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Optional per-flag overrides of [`TrainConfig`] (every field has one).
#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    pub lr_train: Option<f64>,
    pub lr_finetune: Option<f64>,
    pub batch: Option<usize>,
    pub epochs_train: Option<usize>,
    pub epochs_finetune: Option<usize>,
    pub warmup: Option<f64>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub eval_beam: Option<usize>,
    pub keep_contrastive: Option<bool>,
    pub scst_temperature: Option<f64>,
    pub data: Option<String>,
    pub out: Option<String>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut CliConfig) {
        let t = &mut cfg.train;
        macro_rules! ov {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { t.$f = v.clone(); } )* };
        }
        ov!(
            alpha, beta, tau, lr_train, lr_finetune, batch, epochs_train, epochs_finetune,
            warmup, weight_decay, grad_clip, seed, eval_every, eval_beam, keep_contrastive,
            scst_temperature
        );
        if let Some(d) = &self.data {
            cfg.data = d.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
    }
}

pub fn load_config(path: &Path, overrides: &TrainOverrides) -> Result<CliConfig> {
    if !path.exists() {
        return Err(SacoError::InvalidInput(format!(
            "config file not found: {}",
            path.display()
        )));
    }
    let raw = std::fs::read_to_string(path)?;
    let mut cfg: CliConfig = serde_json::from_str(&raw)
        .map_err(|e| SacoError::InvalidInput(format!("bad config {}: {e}", path.display())))?;
    overrides.apply(&mut cfg);
    if cfg.data.is_empty() {
        return Err(SacoError::InvalidInput("config is missing `data`".into()));
    }
    cfg.train.validate()?;
    cfg.sampler.validate()?;
    Ok(cfg)
}

fn model_config_for(cfg: &CliConfig, dataset: &Dataset) -> ModelConfig {
    ModelConfig {
        d: cfg.model.d,
        d_raw: dataset.d_raw,
        d_h: cfg.model.d_h,
        m: dataset.m,
        n_styles: dataset.styles.len(),
        vocab_size: dataset.vocab.len(),
        enc_layers: cfg.model.enc_layers,
        enc_heads: cfg.model.enc_heads,
        dec_layers: cfg.model.dec_layers,
        dec_heads: cfg.model.dec_heads,
        ffn_mult: cfg.model.ffn_mult,
        max_len: cfg.model.max_len,
        decoder_uses_style_token: cfg.model.decoder_uses_style_token,
        tri_linear: false,
        seed: cfg.train.seed,
    }
}

/// Writes the fully-merged config (and its seed) into the output directory
/// so the run is reproducible from the snapshot alone.
fn snapshot_config(cfg: &CliConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut json = serde_json::to_string_pretty(cfg)?;
    json.push('\n');
    std::fs::write(out.join("resolved_config.json"), json)?;
    Ok(())
}

pub fn cmd_synth_data(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let manifest = generate_synthetic(spec, out)?;
    let mut json = serde_json::to_string_pretty(spec)?;
    json.push('\n');
    std::fs::write(out.join("synthetic_spec.json"), json)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

pub fn cmd_train(config_path: &Path, overrides: &TrainOverrides) -> Result<()> {
    let cfg = load_config(config_path, overrides)?;
    let out = PathBuf::from(&cfg.out);
    snapshot_config(&cfg, &out)?;
    let dataset = Dataset::load(Path::new(&cfg.data))?;
    dataset.vocab.save(&out.join("vocab.json"))?;
    let mut model = Model::new(model_config_for(&cfg, &dataset))?;
    let rows = training::train(&mut model, &dataset, &cfg.train, &cfg.sampler)?;
    training::write_report_csv(&out.join("report.csv"), &rows)?;
    training::write_report_jsonl(&out.join("report.jsonl"), &rows)?;
    model.save(&out.join("model.ckpt"))?;
    let corpus = decode_corpus(&model, &dataset, DecodeMode::Beam(cfg.train.eval_beam))?;
    write_json(&out.join("captions.json"), &corpus)?;
    if let Some(last) = rows.last() {
        println!(
            "epoch {}: total {:.4} (cap {:.4} svc {:.4} stc {:.4})",
            last.epoch, last.total, last.l_cap, last.l_svc, last.l_stc
        );
        if let Some(m) = &last.metrics {
            println!(
                "bleu1 {:.4} bleu4 {:.4} rougeL {:.4} cider {:.4}",
                m.bleu1, m.bleu4, m.rouge_l, m.cider
            );
        }
    }
    println!("checkpoint: {}", out.join("model.ckpt").display());
    Ok(())
}

pub fn cmd_finetune(config_path: &Path, init: &Path, overrides: &TrainOverrides) -> Result<()> {
    let cfg = load_config(config_path, overrides)?;
    if !init.exists() {
        return Err(SacoError::InvalidInput(format!(
            "checkpoint not found: {}",
            init.display()
        )));
    }
    let out = PathBuf::from(&cfg.out);
    snapshot_config(&cfg, &out)?;
    let dataset = Dataset::load(Path::new(&cfg.data))?;
    let mut model = Model::load(init)?;
    if model.config.vocab_size != dataset.vocab.len() {
        return Err(SacoError::InvalidInput(format!(
            "checkpoint vocab size {} does not match dataset vocab {}",
            model.config.vocab_size,
            dataset.vocab.len()
        )));
    }
    let rows = training::finetune(&mut model, &dataset, &cfg.train, &cfg.sampler)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("finetune_report.csv"))?);
    writeln!(f, "epoch,mean_reward,frac_positive_reward,skipped_batches,train_cider")?;
    for r in &rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.epoch, r.mean_reward, r.frac_positive_reward, r.skipped_batches, r.train_cider
        )?;
    }
    drop(f);
    let mut jl = String::new();
    for r in &rows {
        jl.push_str(&serde_json::to_string(r)?);
        jl.push('\n');
    }
    std::fs::write(out.join("finetune_report.jsonl"), jl)?;
    model.save(&out.join("finetuned.ckpt"))?;
    for r in &rows {
        println!(
            "epoch {}: mean R {:.4}, frac R>0 {:.3}, skipped {}, train CIDEr {:.4}",
            r.epoch, r.mean_reward, r.frac_positive_reward, r.skipped_batches, r.train_cider
        );
    }
    println!("checkpoint: {}", out.join("finetuned.ckpt").display());
    Ok(())
}

pub fn cmd_eval(ckpt: &Path, data: &Path, beam: usize, out: Option<&Path>) -> Result<()> {
    let model = Model::load(ckpt)?;
    let dataset = Dataset::load(data)?;
    if model.config.vocab_size != dataset.vocab.len() {
        return Err(SacoError::InvalidInput(
            "checkpoint vocabulary does not match dataset".into(),
        ));
    }
    let report = evaluate(&model, &dataset, beam)?;
    let json = to_json_line(&report)?;
    match out {
        Some(p) => std::fs::write(p, &json)?,
        None => print!("{json}"),
    }
    Ok(())
}

pub fn cmd_generate(
    ckpt: &Path,
    data: &Path,
    vocab_path: Option<&Path>,
    image_id: &str,
    style: &str,
    beam: usize,
) -> Result<()> {
    let model = Model::load(ckpt)?;
    let dataset = Dataset::load(data)?;
    let vocab = match vocab_path {
        Some(p) => Vocabulary::load(p)?,
        None => {
            let sibling = ckpt.parent().unwrap_or(Path::new(".")).join("vocab.json");
            if sibling.exists() {
                Vocabulary::load(&sibling)?
            } else {
                dataset.vocab.clone()
            }
        }
    };
    if vocab.len() != model.config.vocab_size {
        return Err(SacoError::InvalidInput(
            "vocabulary size does not match checkpoint".into(),
        ));
    }
    let item = dataset
        .items
        .iter()
        .find(|i| i.image_id == image_id)
        .ok_or_else(|| SacoError::InvalidInput(format!("image id `{image_id}` not in dataset")))?;
    let style_id = match dataset.styles.iter().position(|s| s == style) {
        Some(i) => i,
        None => style.parse::<usize>().map_err(|_| {
            SacoError::InvalidInput(format!(
                "style `{style}` is neither a known style name nor an index"
            ))
        })?,
    };
    if style_id >= dataset.styles.len() {
        return Err(SacoError::InvalidInput(format!("style index {style_id} out of range")));
    }
    let fused = model.fuse_values(&item.features, style_id)?;
    let toks = if beam <= 1 {
        model.greedy_decode(&fused, model.config.max_len)?
    } else {
        model.beam_search(&fused, beam, model.config.max_len)?
    };
    println!("{}", vocab.detokenize(&toks)?);
    Ok(())
}

pub fn cmd_score(candidates: &Path, references: &Path, out: Option<&Path>) -> Result<()> {
    let cands: BTreeMap<String, String> = read_json(candidates)?;
    let refs: BTreeMap<String, Vec<String>> = read_json(references)?;
    let corpus = ScoringCorpus { candidates: cands, references: refs };
    let report = score_corpus(&corpus)?;
    let json = to_json_line(&report)?;
    match out {
        Some(p) => std::fs::write(p, &json)?,
        None => print!("{json}"),
    }
    Ok(())
}

pub fn cmd_retrieve_debug(
    config_path: &Path,
    overrides: &TrainOverrides,
    anchor_id: &str,
    epoch: usize,
    ckpt: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config_path, overrides)?;
    let dataset = Dataset::load(Path::new(&cfg.data))?;
    let model = match ckpt {
        Some(p) => Model::load(p)?,
        None => Model::new(model_config_for(&cfg, &dataset))?,
    };
    let anchor = dataset
        .items
        .iter()
        .position(|i| i.image_id == anchor_id)
        .ok_or_else(|| SacoError::InvalidInput(format!("anchor `{anchor_id}` not in dataset")))?;
    let cache = RepresentationCache::build(&model, &dataset)?;
    let ranked = rank_candidates(anchor, &dataset, &cache, &cfg.sampler, epoch)?;
    let mut csv = String::from("image_id,p_obj,p_roi,p_tri,p\n");
    for c in &ranked {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.image_id, c.scores.p_obj, c.scores.p_roi, c.scores.p_tri, c.scores.p
        ));
    }
    match out {
        Some(p) => std::fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(SacoError::InvalidInput(format!("file not found: {}", path.display())));
    }
    let raw = std::fs::read_to_string(path)?;
    serde_json::from_str(&raw)
        .map_err(|e| SacoError::InvalidInput(format!("bad JSON in {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    Ok(json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_config_names_the_path() {
        let err = load_config(Path::new("/no/such/config.json"), &TrainOverrides::default())
            .unwrap_err();
        assert!(err.to_string().contains("/no/such/config.json"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"data": "x.json", "bogus_key": 1}"#).unwrap();
        let err = load_config(&p, &TrainOverrides::default()).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }

    #[test]
    fn overrides_win_over_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(
            &p,
            r#"{"data": "m.json", "train": {"alpha": 0.5, "batch": 16}}"#,
        )
        .unwrap();
        let overrides = TrainOverrides {
            alpha: Some(0.0),
            seed: Some(99),
            out: Some("elsewhere".into()),
            ..Default::default()
        };
        let cfg = load_config(&p, &overrides).unwrap();
        assert_eq!(cfg.train.alpha, 0.0);
        assert_eq!(cfg.train.batch, 16);
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.out, "elsewhere");
    }
}
