//! Shared glue between the manifest/archive files and the library types.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use ptn_lid::dsp::{read_archive, FeatureKind, FeatureMatrix};
use ptn_lid::metrics::ScoreMatrix;
use ptn_lid::nn;
use ptn_lid::synth::{AlignSpan, CorpusManifest, ManifestEntry, Split};
use ptn_lid::tdnn::{TdnnConfig, TdnnStack};
use ptn_lid::train::TrainUtt;

/// Select manifest entries by split / condition / language set. Empty
/// filters match everything.
pub fn select_entries<'a>(
    manifest: &'a CorpusManifest,
    split: &str,
    condition: &str,
    languages: &[String],
) -> Vec<&'a ManifestEntry> {
    manifest
        .entries
        .iter()
        .filter(|e| {
            (split.is_empty() || e.split.as_str() == split)
                && (condition.is_empty() || e.condition == condition)
                && (languages.is_empty() || languages.contains(&e.language_id))
        })
        .collect()
}

/// Sorted unique language ids of the training split.
pub fn train_languages(manifest: &CorpusManifest) -> Vec<String> {
    let mut langs: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| e.language_id.clone())
        .collect();
    langs.sort();
    langs.dedup();
    langs
}

pub fn load_feature_map(path: &Path) -> Result<BTreeMap<String, FeatureMatrix>> {
    let records = read_archive(path)
        .with_context(|| format!("reading feature archive {}", path.display()))?;
    Ok(records
        .into_iter()
        .map(|r| (r.utt_id, r.feats))
        .collect())
}

pub fn expand_alignment(spans: &[AlignSpan]) -> Vec<usize> {
    let mut out = Vec::new();
    for s in spans {
        for _ in s.start_frame..s.end_frame {
            out.push(s.phone);
        }
    }
    out
}

/// Assemble training utterances from manifest selection + archive features.
pub fn build_corpus_utts(
    entries: &[&ManifestEntry],
    features: &BTreeMap<String, FeatureMatrix>,
    languages: &[String],
    alignments: Option<&BTreeMap<String, Vec<AlignSpan>>>,
    expected_kind: FeatureKind,
) -> Result<Vec<TrainUtt>> {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let feats = features
            .get(&e.utt_id)
            .ok_or_else(|| anyhow!("utterance {} missing from the feature archive", e.utt_id))?;
        if feats.kind != expected_kind {
            bail!(
                "utterance {}: archive holds {:?} features, need {:?}",
                e.utt_id,
                feats.kind,
                expected_kind
            );
        }
        let lang = languages
            .iter()
            .position(|l| *l == e.language_id)
            .ok_or_else(|| anyhow!("language {} not in the model's set", e.language_id))?;
        let phones = match alignments {
            Some(map) => {
                let spans = map.get(&e.utt_id).ok_or_else(|| {
                    anyhow!("utterance {} has no alignment entries", e.utt_id)
                })?;
                let phones = expand_alignment(spans);
                if phones.len() != feats.num_frames() {
                    bail!(
                        "utterance {}: {} aligned frames vs {} feature frames",
                        e.utt_id,
                        phones.len(),
                        feats.num_frames()
                    );
                }
                Some(phones)
            }
            None => None,
        };
        out.push(TrainUtt {
            utt_id: e.utt_id.clone(),
            lang,
            feats: feats.clone(),
            phones,
            phi: None,
        });
    }
    Ok(out)
}

/// Header of a phonetic-network checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct TdnnHeader {
    pub kind: String,
    pub config: TdnnConfig,
    pub languages: Vec<String>,
}

pub fn save_tdnn(path: &Path, stack: &TdnnStack, languages: &[String]) -> Result<()> {
    let header = TdnnHeader {
        kind: "tdnn".into(),
        config: stack.config.clone(),
        languages: languages.to_vec(),
    };
    nn::save_params(path, serde_json::to_value(&header)?, stack)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Prefix used for phonetic-network parameters everywhere: standalone
/// checkpoints and classifiers embedding a stack share it, so tensors load
/// across both without renaming.
pub const TDNN_PREFIX: &str = "tdnn.";

pub enum TdnnInit {
    /// Use the stored parameters.
    Pretrained,
    /// Keep the architecture, draw fresh parameters from this seed.
    Random(u64),
}

pub fn load_tdnn(path: &Path, init: TdnnInit) -> Result<(TdnnStack, Vec<String>)> {
    let (header, tensors) =
        nn::load_params(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed: TdnnHeader = serde_json::from_value(header.spec)
        .with_context(|| format!("{} is not a phonetic-network checkpoint", path.display()))?;
    if parsed.kind != "tdnn" {
        bail!("{}: model kind {:?}, expected tdnn", path.display(), parsed.kind);
    }
    let seed = match init {
        TdnnInit::Pretrained => 0,
        TdnnInit::Random(seed) => seed,
    };
    let mut stack = TdnnStack::new(parsed.config, TDNN_PREFIX, seed)?;
    if matches!(init, TdnnInit::Pretrained) {
        nn::load_params_into(&mut stack, &tensors)?;
    }
    if let Some(rank) = stack.config.svd_rank {
        stack.apply_svd_bottleneck(rank)?;
    }
    Ok((stack, parsed.languages))
}

fn format_score(v: f64) -> String {
    format!("{v:.12e}")
}

/// Write a scores table: utt_id, true language id, one column per language.
pub fn write_scores_tsv(
    path: &Path,
    languages: &[String],
    rows: &[(String, String, Vec<f64>)],
) -> Result<()> {
    let mut out = String::from("utt_id\ttrue_lang");
    for l in languages {
        out.push('\t');
        out.push_str(l);
    }
    out.push('\n');
    for (utt, truth, scores) in rows {
        out.push_str(utt);
        out.push('\t');
        out.push_str(truth);
        for s in scores {
            out.push('\t');
            out.push_str(&format_score(*s));
        }
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_scores_tsv(path: &Path) -> Result<(Vec<String>, ScoreMatrix)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading scores {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow!("empty scores file"))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 3 || cols[0] != "utt_id" || cols[1] != "true_lang" {
        bail!("{}: malformed scores header", path.display());
    }
    let languages: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let mut utt_ids = Vec::new();
    let mut true_lang = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 + languages.len() {
            bail!("{}: line {} has {} fields", path.display(), no + 2, fields.len());
        }
        utt_ids.push(fields[0].to_string());
        let truth = languages
            .iter()
            .position(|l| l == fields[1])
            .ok_or_else(|| anyhow!("line {}: unknown language {}", no + 2, fields[1]))?;
        true_lang.push(truth);
        for f in &fields[2..] {
            values.push(f.parse::<f64>().with_context(|| format!("line {}", no + 2))?);
        }
    }
    let n = utt_ids.len();
    let k = languages.len();
    let scores = Array2::from_shape_vec((n, k), values)?;
    Ok((
        languages,
        ScoreMatrix {
            utt_ids,
            true_lang,
            scores,
        },
    ))
}
