//! Run configuration: one TOML document per run, overridable from the
//! command line with `--set section.key=value`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use ptn_lid::dsp::FrontendConfig;
use ptn_lid::model::{InputMode, PhoneticTraining};
use ptn_lid::synth::experiment::ExperimentConfig;
use ptn_lid::tdnn::{Tap, TdnnLayerSpec};
use ptn_lid::train::TrainConfig;

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub frontend: FrontendConfig,
    pub experiment: ExperimentConfig,
    pub model: ModelSection,
    pub tdnn: TdnnSection,
    pub train: TrainConfig,
    pub featurize: FeaturizeSection,
    pub score: ScoreSection,
    pub eval: EvalSection,
    pub augment: AugmentSection,
    pub slice: SliceSection,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub alignments: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub phonetic_model: Option<PathBuf>,
    pub lid_model: Option<PathBuf>,
    pub scores_utt: Option<PathBuf>,
    pub scores_frame: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub det_csv: Option<PathBuf>,
    pub degradation_csv: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
}

/// Classifier section; a thin, path-aware layer over the library's model spec.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_mode: InputMode,
    pub lid_layers: usize,
    pub cells: usize,
    pub proj: usize,
    pub splice_left: usize,
    pub splice_right: usize,
    pub reset_every: usize,
    /// Languages the classifier discriminates; resolved from the manifest's
    /// training split when empty.
    pub languages: Vec<String>,
    /// Size of the phone output group; 0 disables multi-task training.
    pub phone_classes: usize,
    pub phonetic_tap: Tap,
    pub phonetic_training: PhoneticTraining,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input_mode: InputMode::Acoustic,
            lid_layers: 1,
            cells: 64,
            proj: 32,
            splice_left: 2,
            splice_right: 2,
            reset_every: 20,
            languages: Vec::new(),
            phone_classes: 0,
            phonetic_tap: Tap::LastHidden,
            phonetic_training: PhoneticTraining::Frozen,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdnnSection {
    /// Input splicing applied before the first time-delay layer.
    pub splice_left: usize,
    pub splice_right: usize,
    pub layers: Vec<TdnnLayerSpec>,
    /// Adds a language output group (multi-task phonetic network).
    pub multi_task_lid: bool,
    pub languages: Vec<String>,
    pub svd_rank: usize,
}

impl Default for TdnnSection {
    fn default() -> Self {
        TdnnSection {
            splice_left: 4,
            splice_right: 4,
            layers: vec![
                TdnnLayerSpec {
                    context_offsets: vec![-2, -1, 0, 1, 2],
                    hidden_dim: 128,
                    pnorm_group: 4,
                },
                TdnnLayerSpec {
                    context_offsets: vec![-1, 0, 1],
                    hidden_dim: 128,
                    pnorm_group: 4,
                },
                TdnnLayerSpec {
                    context_offsets: vec![0],
                    hidden_dim: 128,
                    pnorm_group: 4,
                },
            ],
            multi_task_lid: false,
            languages: Vec::new(),
            svd_rank: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturizeSection {
    pub kind: FeatureKindOpt,
    /// Restrict to one split / condition; empty means everything.
    pub split: String,
    pub condition: String,
    /// Tap for kind = "phonetic".
    pub phonetic_tap: Tap,
}

impl Default for FeaturizeSection {
    fn default() -> Self {
        FeaturizeSection {
            kind: FeatureKindOpt::Fbank,
            split: String::new(),
            condition: String::new(),
            phonetic_tap: Tap::LastHidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKindOpt {
    Fbank,
    Mfcc,
    Phonetic,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSection {
    pub split: String,
    pub condition: String,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            split: "test".into(),
            condition: "clean".into(),
        }
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Condition whose report anchors the degradation rates.
    pub reference: String,
    pub conditions: Vec<EvalCondition>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCondition {
    pub name: String,
    pub scores_utt: PathBuf,
    #[serde(default)]
    pub scores_frame: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub snr_db: Vec<f64>,
    pub split: String,
    pub condition: String,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            snr_db: vec![30.0, 20.0, 10.0],
            split: "test".into(),
            condition: "clean".into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceSection {
    pub durations: Vec<f64>,
    pub min_source_seconds: f64,
    pub split: String,
    pub condition: String,
}

impl Default for SliceSection {
    fn default() -> Self {
        SliceSection {
            durations: (1..=10).map(|i| i as f64 * 0.5).collect(),
            min_source_seconds: 5.0,
            split: "test".into(),
            condition: "clean".into(),
        }
    }
}

/// Parse the config file, apply `--set` overrides, then deserialize with
/// strict key checking.
pub fn load_config(
    path: Option<&Path>,
    sets: &[String],
    seed_flag: Option<u64>,
) -> Result<RunConfig, String> {
    let mut value: toml::Value = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| format!("cannot read config {}: {e}", p.display()))?
            .parse()
            .map_err(|e| format!("config {}: {e}", p.display()))?,
        None => toml::Value::Table(Default::default()),
    };
    for set in sets {
        apply_set(&mut value, set)?;
    }
    let mut cfg: RunConfig = value
        .try_into()
        .map_err(|e| format!("invalid config: {e}"))?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_set(root: &mut toml::Value, spec: &str) -> Result<(), String> {
    let (key_path, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("--set {spec:?}: expected section.key=value"))?;
    // parse the value as a TOML literal; bare words fall back to strings
    let parsed: toml::Value = match format!("x = {raw}").parse::<toml::Value>() {
        Ok(toml::Value::Table(t)) => t.get("x").cloned().unwrap(),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut cur = root;
    let segments: Vec<&str> = key_path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| format!("--set {spec:?}: {seg} is not a table"))?;
        if i + 1 == segments.len() {
            table.insert(seg.to_string(), parsed);
            return Ok(());
        }
        cur = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_parse_from_empty() {
        let cfg = load_config(None, &[], None).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.frontend.num_mel_bins, 23);
        assert_eq!(cfg.experiment.target_languages, 4);
        assert_eq!(cfg.model.reset_every, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = write_cfg("[frontend]\nnum_mel_binz = 23\n");
        let err = load_config(Some(f.path()), &[], None).unwrap_err();
        assert!(err.contains("num_mel_binz"), "{err}");
        let f = write_cfg("[nonsense]\nx = 1\n");
        assert!(load_config(Some(f.path()), &[], None).is_err());
    }

    #[test]
    fn set_overrides_nested_keys() {
        let f = write_cfg("[train]\nlr = 0.01\n");
        let cfg = load_config(
            Some(f.path()),
            &[
                "train.lr=0.25".into(),
                "model.input_mode=\"ptn\"".into(),
                "seed=9".into(),
                "score.condition=snr10".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.25);
        assert_eq!(cfg.model.input_mode, InputMode::Ptn);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.score.condition, "snr10");
    }

    #[test]
    fn seed_flag_wins() {
        let f = write_cfg("seed = 4\n");
        let cfg = load_config(Some(f.path()), &[], Some(11)).unwrap();
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn bad_set_is_rejected() {
        let mut v: toml::Value = "".parse().unwrap();
        assert!(apply_set(&mut v, "no_equals_sign").is_err());
    }
}
