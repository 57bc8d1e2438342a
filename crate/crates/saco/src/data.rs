//! Dataset manifest ingestion, binary feature blobs, and the synthetic
//! dataset generator.
//!
//! A dataset is a JSON manifest plus one raw float32 little-endian blob per
//! image (`m·d_raw` values, row-major, no header). Real feature pipelines
//! only need to write those two artifacts; the synthetic generator produces
//! them directly with style-conditioned captions so retrieval and the
//! contrastive objectives have structure to find.

use crate::error::{Result, SacoError};
use crate::vocab::{TokenId, Vocabulary, EOS};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub styles: Vec<String>,
    pub items: Vec<ManifestItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub image_id: String,
    pub feature_file: String,
    pub m: usize,
    pub d_raw: usize,
    pub objects: Vec<String>,
    pub captions: Vec<CaptionEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionEntry {
    pub style: usize,
    pub text: String,
}

impl Manifest {
    /// Parses and validates a manifest. Feature blobs are checked for
    /// existence and exact byte length but not loaded.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| SacoError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&raw)?;
        manifest.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(manifest)
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.items.is_empty() {
            return Err(SacoError::Data("manifest has no items".into()));
        }
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(&item.image_id) {
                return Err(SacoError::Data(format!("duplicate image_id `{}`", item.image_id)));
            }
            if item.m == 0 || item.d_raw == 0 {
                return Err(SacoError::Data(format!("item `{}` has zero m or d_raw", item.image_id)));
            }
            if item.captions.is_empty() {
                return Err(SacoError::Data(format!("item `{}` has no captions", item.image_id)));
            }
            for c in &item.captions {
                if c.style >= self.styles.len() {
                    return Err(SacoError::Data(format!(
                        "item `{}` uses unknown style index {} (|styles| = {})",
                        item.image_id,
                        c.style,
                        self.styles.len()
                    )));
                }
            }
            let blob = base.join(&item.feature_file);
            let expected = item.m * item.d_raw * 4;
            let actual = std::fs::metadata(&blob)
                .map_err(|e| {
                    SacoError::Data(format!(
                        "item `{}`: feature file {} unreadable: {e}",
                        item.image_id,
                        blob.display()
                    ))
                })?
                .len() as usize;
            if actual != expected {
                return Err(SacoError::Data(format!(
                    "item `{}`: feature blob {} has {actual} bytes, expected {expected} (m={} d_raw={})",
                    item.image_id,
                    blob.display(),
                    item.m,
                    item.d_raw
                )));
            }
        }
        Ok(())
    }

    /// Reads one item's blob as an m×d_raw matrix (f32 LE on disk, f64 in
    /// memory).
    pub fn load_features(&self, base: &Path, item: &ManifestItem) -> Result<Array2<f64>> {
        let path = base.join(&item.feature_file);
        let bytes = std::fs::read(&path)?;
        let expected = item.m * item.d_raw * 4;
        if bytes.len() != expected {
            return Err(SacoError::Data(format!(
                "item `{}`: feature blob has {} bytes, expected {expected}",
                item.image_id,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Array2::from_shape_vec((item.m, item.d_raw), values)
            .map_err(|e| SacoError::Data(format!("bad feature shape: {e}")))
    }
}

/// One (image, style, caption) triple, fully materialized for training.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub image_id: String,
    pub features: Array2<f64>,
    pub objects: BTreeSet<String>,
    pub style_id: usize,
    /// Gold caption token ids, ending with `<EOS>`.
    pub caption: Vec<TokenId>,
    pub caption_text: String,
}

/// Loaded dataset: flattened triples plus the vocabulary built from its
/// captions.
#[derive(Debug)]
pub struct Dataset {
    pub styles: Vec<String>,
    pub items: Vec<DatasetItem>,
    pub vocab: Vocabulary,
    pub m: usize,
    pub d_raw: usize,
}

impl Dataset {
    /// Loads a manifest and materializes one item per caption entry.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let m = manifest.items[0].m;
        let d_raw = manifest.items[0].d_raw;
        for item in &manifest.items {
            if item.m != m || item.d_raw != d_raw {
                return Err(SacoError::Data(format!(
                    "item `{}` has m={} d_raw={}, expected uniform {m}×{d_raw}",
                    item.image_id, item.m, item.d_raw
                )));
            }
        }
        let corpus: Vec<String> = manifest
            .items
            .iter()
            .flat_map(|i| i.captions.iter().map(|c| c.text.clone()))
            .collect();
        let vocab = Vocabulary::build(&corpus, 1)?;
        let mut items = Vec::new();
        for mitem in &manifest.items {
            let features = manifest.load_features(&base, mitem)?;
            for entry in &mitem.captions {
                let mut caption = vocab.tokenize(&entry.text);
                caption.push(EOS);
                items.push(DatasetItem {
                    image_id: mitem.image_id.clone(),
                    features: features.clone(),
                    objects: mitem.objects.iter().cloned().collect(),
                    style_id: entry.style,
                    caption,
                    caption_text: entry.text.clone(),
                });
            }
        }
        Ok(Dataset { styles: manifest.styles, items, vocab, m, d_raw })
    }

    /// Reference captions for an item: every caption sharing its
    /// (image, style) pair. Always contains the item's own gold caption.
    pub fn references_for(&self, idx: usize) -> Vec<String> {
        let it = &self.items[idx];
        self.items
            .iter()
            .filter(|o| o.image_id == it.image_id && o.style_id == it.style_id)
            .map(|o| o.caption_text.clone())
            .collect()
    }
}

/// Parameters for [`generate_synthetic`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_styles: usize,
    pub m: usize,
    pub d_raw: usize,
    /// Approximate target vocabulary size; controls modifiers per style.
    pub vocab_size: usize,
    pub seed: u64,
    /// Gaussian noise added to each feature entry (0 = deterministic
    /// features given the object set).
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { n_items: 32, n_styles: 3, m: 9, d_raw: 64, vocab_size: 60, seed: 7, noise: 0.05 }
    }
}

const OBJECT_WORDS: [&str; 20] = [
    "dog", "cat", "tree", "ball", "river", "house", "bird", "car", "cloud", "flower", "boat",
    "horse", "lamp", "bridge", "field", "stone", "kite", "bench", "tower", "moon",
];

const STYLE_NAMES: [&str; 6] = ["merry", "gloomy", "dreamy", "fierce", "wistful", "brisk"];

const MODIFIER_WORDS: [&str; 40] = [
    "bright", "playful", "sunny", "gleeful", "bouncy", "cheerful", "spry", "vivid", "jolly",
    "peppy", "grim", "weary", "pale", "sullen", "bleak", "dour", "faded", "heavy", "somber",
    "drab", "soft", "quiet", "misty", "hazy", "gentle", "floating", "silver", "drowsy", "mild",
    "sheer", "sharp", "wild", "burning", "harsh", "savage", "stark", "fierce", "roaring",
    "jagged", "grave",
];

fn style_name(i: usize) -> String {
    STYLE_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("style{i}"))
}

fn modifier(style: usize, slot: usize, mods_per_style: usize) -> String {
    let flat = style * mods_per_style + slot;
    MODIFIER_WORDS
        .get(flat)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("mod{style}x{slot}"))
}

fn mix(seed: u64, tag: &str, k: u64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^ k.wrapping_mul(0xff51_afd7_ed55_8ccd)
}

/// Deterministic per-class feature imprint; the item's features are the sum
/// of its object imprints plus optional noise, so equal object sets give
/// identical (noise = 0) features by construction.
fn object_imprint(spec: &SyntheticSpec, class: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, "imprint", class as u64));
    Array2::from_shape_fn((spec.m, spec.d_raw), |_| rng.gen::<f64>() * 2.0 - 1.0)
}

/// Writes `manifest.json` plus `features/*.bin` under `out_dir` and returns
/// the manifest path. Same spec (same seed) → byte-identical outputs.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    if spec.n_items == 0 || spec.n_styles == 0 || spec.m == 0 || spec.d_raw == 0 || spec.vocab_size == 0 {
        return Err(SacoError::InvalidInput("synthetic spec fields must be ≥ 1".into()));
    }
    std::fs::create_dir_all(out_dir.join("features"))?;
    let mods_per_style =
        ((spec.vocab_size.saturating_sub(4 + OBJECT_WORDS.len() + 6)) / spec.n_styles).clamp(2, 10);

    let styles: Vec<String> = (0..spec.n_styles).map(style_name).collect();
    let mut items = Vec::with_capacity(spec.n_items);
    for idx in 0..spec.n_items {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, "item", idx as u64));
        let k = rng.gen_range(2..=5usize);
        let mut classes: Vec<usize> = (0..OBJECT_WORDS.len()).collect();
        classes.shuffle(&mut rng);
        let mut chosen: Vec<usize> = classes.into_iter().take(k).collect();
        chosen.sort_unstable();

        let style = idx % spec.n_styles;
        let image_id = format!("img_{idx:03}");

        // features = sum of object imprints + noise
        let mut feats = Array2::<f64>::zeros((spec.m, spec.d_raw));
        for &c in &chosen {
            feats += &object_imprint(spec, c);
        }
        if spec.noise > 0.0 {
            let mut nrng = ChaCha8Rng::seed_from_u64(mix(spec.seed, "noise", idx as u64));
            feats.mapv_inplace(|x| x + spec.noise * (nrng.gen::<f64>() * 2.0 - 1.0));
        }
        let blob: Vec<u8> = feats
            .iter()
            .flat_map(|x| (*x as f32).to_le_bytes())
            .collect();
        let feature_file = format!("features/{image_id}.bin");
        std::fs::write(out_dir.join(&feature_file), blob)?;

        // caption: deterministic function of (object set, style), so items
        // sharing both get the same gold text
        let caption = synth_caption(&chosen, style, spec.n_styles, mods_per_style);

        items.push(ManifestItem {
            image_id,
            feature_file,
            m: spec.m,
            d_raw: spec.d_raw,
            objects: chosen.iter().map(|&c| OBJECT_WORDS[c].to_string()).collect(),
            captions: vec![CaptionEntry { style, text: caption }],
        });
    }

    let manifest = Manifest { styles, items };
    let path = out_dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(&path, json)?;
    Ok(path)
}

/// Style-conditioned template caption. A style "focuses" on the object
/// classes congruent to it mod `n_styles` and describes each object with a
/// style-specific modifier.
fn synth_caption(classes: &[usize], style: usize, n_styles: usize, mods_per_style: usize) -> String {
    let focused: Vec<usize> =
        classes.iter().copied().filter(|c| c % n_styles == style).collect();
    let pick = |slot: usize| -> usize {
        if !focused.is_empty() {
            focused[slot % focused.len()]
        } else {
            classes[slot % classes.len()]
        }
    };
    let o1 = pick(0);
    let o2 = if classes.len() > 1 {
        let alt = classes.iter().copied().find(|c| *c != o1).unwrap_or(o1);
        if focused.len() > 1 { pick(1) } else { alt }
    } else {
        o1
    };
    let m1 = modifier(style, o1 % mods_per_style, mods_per_style);
    let m2 = modifier(style, o2 % mods_per_style, mods_per_style);
    let key = classes.iter().fold(style as u64 + 1, |acc, c| {
        acc.wrapping_mul(31).wrapping_add(*c as u64)
    });
    match key % 3 {
        0 => format!("{m1} {} near {m2} {}", OBJECT_WORDS[o1], OBJECT_WORDS[o2]),
        1 => format!("{m1} {} and {m2} {}", OBJECT_WORDS[o1], OBJECT_WORDS[o2]),
        _ => format!("the {m1} {} by {m2} {}", OBJECT_WORDS[o1], OBJECT_WORDS[o2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sha(path: &Path) -> String {
        crate::model::checkpoint_hash(path).unwrap()
    }

    #[test]
    fn synthetic_is_byte_identical_for_same_seed() {
        let spec = SyntheticSpec { n_items: 6, ..SyntheticSpec::default() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = generate_synthetic(&spec, d1.path()).unwrap();
        let p2 = generate_synthetic(&spec, d2.path()).unwrap();
        assert_eq!(sha(&p1), sha(&p2));
        assert_eq!(
            sha(&d1.path().join("features/img_000.bin")),
            sha(&d2.path().join("features/img_000.bin"))
        );
    }

    #[test]
    fn manifest_round_trips_and_loads() {
        let spec = SyntheticSpec { n_items: 5, ..SyntheticSpec::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.items.len(), 5);
        assert_eq!(ds.styles.len(), 3);
        assert_eq!(ds.m, 9);
        assert_eq!(ds.d_raw, 64);
        for item in &ds.items {
            assert_eq!(*item.caption.last().unwrap(), EOS);
            assert!(item.style_id < ds.styles.len());
            assert!(!item.objects.is_empty());
            // every caption token is in the vocabulary (never UNK)
            for &t in &item.caption {
                assert_ne!(t, crate::vocab::UNK, "{}", item.caption_text);
            }
        }
    }

    #[test]
    fn truncated_blob_error_names_item_and_sizes() {
        let spec = SyntheticSpec { n_items: 3, ..SyntheticSpec::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = generate_synthetic(&spec, dir.path()).unwrap();
        let blob = dir.path().join("features/img_001.bin");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        let err = Dataset::load(&path).unwrap_err().to_string();
        assert!(err.contains("img_001"), "{err}");
        assert!(err.contains("expected"), "{err}");
    }

    #[test]
    fn unknown_style_index_is_rejected() {
        let spec = SyntheticSpec { n_items: 3, ..SyntheticSpec::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = generate_synthetic(&spec, dir.path()).unwrap();
        let mut manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        manifest.items[0].captions[0].style = 9;
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        let err = Dataset::load(&path).unwrap_err().to_string();
        assert!(err.contains("style"), "{err}");
    }

    #[test]
    fn small_blob_codec_round_trip() {
        // m=2, d_raw=3 blob of 24 bytes parses to the matrix written
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("features")).unwrap();
        let values: [f32; 6] = [1.5, -2.0, 0.25, 3.0, -0.5, 8.0];
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(bytes.len(), 24);
        std::fs::write(dir.path().join("features/x.bin"), &bytes).unwrap();
        let manifest = Manifest {
            styles: vec!["plain".into()],
            items: vec![ManifestItem {
                image_id: "x".into(),
                feature_file: "features/x.bin".into(),
                m: 2,
                d_raw: 3,
                objects: vec!["dog".into()],
                captions: vec![CaptionEntry { style: 0, text: "a dog".into() }],
            }],
        };
        let mpath = dir.path().join("manifest.json");
        std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        let ds = Dataset::load(&mpath).unwrap();
        let feats = &ds.items[0].features;
        assert_eq!(feats.dim(), (2, 3));
        for (i, v) in values.iter().enumerate() {
            assert_eq!(feats[(i / 3, i % 3)], *v as f64);
        }
    }

    #[test]
    fn equal_object_sets_give_identical_features_at_zero_noise() {
        let spec = SyntheticSpec { n_items: 40, noise: 0.0, ..SyntheticSpec::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = Dataset::load(&path).unwrap();
        let mut found_pair = false;
        for i in 0..ds.items.len() {
            for j in i + 1..ds.items.len() {
                if ds.items[i].objects == ds.items[j].objects {
                    found_pair = true;
                    assert_eq!(ds.items[i].features, ds.items[j].features);
                }
            }
        }
        // with 40 items over small object sets a collision is likely but not
        // guaranteed; the assertion above is what matters when one exists
        let _ = found_pair;
    }

    #[test]
    fn objects_in_manifest_match_caption_styling() {
        let spec = SyntheticSpec { n_items: 12, ..SyntheticSpec::default() };
        let dir = tempfile::tempdir().unwrap();
        let path = generate_synthetic(&spec, dir.path()).unwrap();
        let ds = Dataset::load(&path).unwrap();
        for item in &ds.items {
            // at least one manifest object appears in the caption text
            let mentioned = item
                .objects
                .iter()
                .any(|o| item.caption_text.split_whitespace().any(|w| w == o));
            assert!(mentioned, "{} / {:?}", item.caption_text, item.objects);
        }
    }
}
