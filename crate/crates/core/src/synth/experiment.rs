//! The default synthetic experiment: target languages for the classifier,
//! foreign languages for phonetic-network transfer, and the derived noisy
//! and duration-sliced test conditions.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    generate_utterance, utt_seed, CorpusManifest, ManifestEntry, PhoneInventory, Split, SynthUtt,
    SyntheticLanguageSpec,
};
use crate::dsp::{add_noise, fbank, slice_utterance, white_noise, FeatureMatrix, FrontendConfig};
use crate::synth::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub num_phones: usize,
    pub target_languages: usize,
    pub foreign_languages: usize,
    pub train_utts_per_language: usize,
    pub test_utts_per_language: usize,
    pub foreign_utts_per_language: usize,
    pub utt_seconds: (f64, f64),
    pub sample_rate: u32,
    pub snr_db: Vec<f64>,
    pub duration_grid: Vec<f64>,
    /// Only test utterances at least this long get duration slices.
    pub min_slice_source_seconds: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_phones: 20,
            target_languages: 4,
            foreign_languages: 2,
            train_utts_per_language: 200,
            test_utts_per_language: 100,
            foreign_utts_per_language: 200,
            utt_seconds: (3.0, 8.0),
            sample_rate: 16_000,
            snr_db: vec![30.0, 20.0, 10.0],
            duration_grid: (1..=10).map(|i| i as f64 * 0.5).collect(),
            min_slice_source_seconds: 5.0,
        }
    }
}

impl ExperimentConfig {
    pub fn target_ids(&self) -> Vec<String> {
        (0..self.target_languages)
            .map(|i| format!("target{i}"))
            .collect()
    }

    pub fn foreign_ids(&self) -> Vec<String> {
        (0..self.foreign_languages)
            .map(|i| format!("foreign{i}"))
            .collect()
    }

    pub fn language_specs(&self, master_seed: u64) -> Vec<SyntheticLanguageSpec> {
        let subset: Vec<usize> = (0..self.num_phones).collect();
        let mut specs = Vec::new();
        for (i, id) in self.target_ids().into_iter().enumerate() {
            specs.push(SyntheticLanguageSpec::with_permutation_mix(
                id,
                subset.clone(),
                master_seed ^ (0x7a67 + i as u64 * 1000),
            ));
        }
        for (i, id) in self.foreign_ids().into_iter().enumerate() {
            specs.push(SyntheticLanguageSpec::with_permutation_mix(
                id,
                subset.clone(),
                master_seed ^ (0xf0e1 + i as u64 * 1000),
            ));
        }
        specs
    }

    pub fn condition_for_snr(snr: f64) -> String {
        if snr.fract() == 0.0 {
            format!("snr{}", snr as i64)
        } else {
            format!("snr{snr}")
        }
    }

    pub fn condition_for_duration(dur: f64) -> String {
        format!("dur{dur:.1}")
    }
}

/// One utterance reduced to features and labels.
#[derive(Debug, Clone)]
pub struct FeaturizedUtt {
    pub utt_id: String,
    pub language_id: String,
    /// Index into the sorted list of languages of its group.
    pub lang_index: usize,
    pub split: Split,
    pub condition: String,
    pub fbank: FeatureMatrix,
    /// Per-frame global phone ids; present for clean utterances only.
    pub frame_phones: Option<Vec<usize>>,
}

/// The whole experiment, featurized in memory.
#[derive(Debug, Clone)]
pub struct FeaturizedExperiment {
    pub target_languages: Vec<String>,
    pub foreign_languages: Vec<String>,
    pub train: Vec<FeaturizedUtt>,
    pub test_clean: Vec<FeaturizedUtt>,
    /// condition -> derived test utterances
    pub test_noisy: BTreeMap<String, Vec<FeaturizedUtt>>,
    pub test_sliced: BTreeMap<String, Vec<FeaturizedUtt>>,
    pub foreign_train: Vec<FeaturizedUtt>,
}

/// Synthesize and featurize the full experiment without touching the disk.
/// Waveforms are dropped as soon as their feature matrices and derived
/// conditions are computed.
pub fn featurize_experiment(
    cfg: &ExperimentConfig,
    frontend: &FrontendConfig,
    master_seed: u64,
) -> Result<FeaturizedExperiment> {
    let inventory = PhoneInventory::standard(cfg.num_phones);
    let specs = cfg.language_specs(master_seed);
    let targets = cfg.target_ids();
    let foreigns = cfg.foreign_ids();

    struct Job {
        spec_index: usize,
        lang_index: usize,
        foreign: bool,
        split: Split,
        utt_no: usize,
    }
    let mut jobs = Vec::new();
    for (lang_index, _) in targets.iter().enumerate() {
        for utt_no in 0..cfg.train_utts_per_language {
            jobs.push(Job {
                spec_index: lang_index,
                lang_index,
                foreign: false,
                split: Split::Train,
                utt_no,
            });
        }
        for utt_no in 0..cfg.test_utts_per_language {
            jobs.push(Job {
                spec_index: lang_index,
                lang_index,
                foreign: false,
                split: Split::Test,
                utt_no,
            });
        }
    }
    for (lang_index, _) in foreigns.iter().enumerate() {
        for utt_no in 0..cfg.foreign_utts_per_language {
            jobs.push(Job {
                spec_index: targets.len() + lang_index,
                lang_index,
                foreign: true,
                split: Split::Train,
                utt_no,
            });
        }
    }

    struct Produced {
        base: FeaturizedUtt,
        noisy: Vec<(String, FeaturizedUtt)>,
        sliced: Vec<(String, FeaturizedUtt)>,
        foreign: bool,
    }

    let produced: Vec<Result<Produced>> = jobs
        .par_iter()
        .map(|job| {
            let spec = &specs[job.spec_index];
            let utt_id = format!(
                "{}_{}_{:04}",
                spec.language_id,
                job.split.as_str(),
                job.utt_no
            );
            let seed = utt_seed(master_seed, &utt_id);
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x5eed);
            let seconds =
                rand::Rng::gen_range::<f64, _>(&mut rng, cfg.utt_seconds.0..=cfg.utt_seconds.1);
            let utt = generate_utterance(
                &inventory,
                spec,
                &utt_id,
                seconds,
                frontend,
                cfg.sample_rate,
                seed,
            )?;
            let feats = fbank(&utt.wave, frontend)?;
            let base = FeaturizedUtt {
                utt_id: utt.utt_id.clone(),
                language_id: spec.language_id.clone(),
                lang_index: job.lang_index,
                split: job.split,
                condition: "clean".into(),
                fbank: feats,
                frame_phones: Some(utt.frame_phones()),
            };
            let mut noisy = Vec::new();
            let mut sliced = Vec::new();
            if job.split == Split::Test && !job.foreign {
                for &snr in &cfg.snr_db {
                    let cond = ExperimentConfig::condition_for_snr(snr);
                    let nid = format!("{}_{}", utt.utt_id, cond);
                    let nseed = utt_seed(master_seed, &nid);
                    let noise =
                        white_noise(utt.wave.samples.len(), cfg.sample_rate, nseed);
                    let wave = add_noise(&utt.wave, &noise, snr, nseed)?;
                    noisy.push((
                        cond.clone(),
                        FeaturizedUtt {
                            utt_id: nid,
                            language_id: spec.language_id.clone(),
                            lang_index: job.lang_index,
                            split: Split::Test,
                            condition: cond,
                            fbank: fbank(&wave, frontend)?,
                            frame_phones: None,
                        },
                    ));
                }
                if utt.wave.duration_seconds() >= cfg.min_slice_source_seconds {
                    for &dur in &cfg.duration_grid {
                        let cond = ExperimentConfig::condition_for_duration(dur);
                        let sid = format!("{}_{}", utt.utt_id, cond);
                        let sseed = utt_seed(master_seed, &sid);
                        let wave = slice_utterance(&utt.wave, dur, sseed)?;
                        sliced.push((
                            cond.clone(),
                            FeaturizedUtt {
                                utt_id: sid,
                                language_id: spec.language_id.clone(),
                                lang_index: job.lang_index,
                                split: Split::Test,
                                condition: cond,
                                fbank: fbank(&wave, frontend)?,
                                frame_phones: None,
                            },
                        ));
                    }
                }
            }
            Ok(Produced {
                base,
                noisy,
                sliced,
                foreign: job.foreign,
            })
        })
        .collect();

    let mut out = FeaturizedExperiment {
        target_languages: targets,
        foreign_languages: foreigns,
        train: Vec::new(),
        test_clean: Vec::new(),
        test_noisy: BTreeMap::new(),
        test_sliced: BTreeMap::new(),
        foreign_train: Vec::new(),
    };
    for item in produced {
        let item = item?;
        if item.foreign {
            out.foreign_train.push(item.base);
            continue;
        }
        match item.base.split {
            Split::Train => out.train.push(item.base),
            Split::Test => out.test_clean.push(item.base),
        }
        for (cond, u) in item.noisy {
            out.test_noisy.entry(cond).or_default().push(u);
        }
        for (cond, u) in item.sliced {
            out.test_sliced.entry(cond).or_default().push(u);
        }
    }
    Ok(out)
}

/// Synthesize the corpus onto disk: WAVs plus manifest and alignment tables.
/// Derived noisy and sliced copies of the test utterances are materialized as
/// their own WAV files so downstream stages treat them uniformly.
pub fn build_corpus(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    master_seed: u64,
    frontend: &FrontendConfig,
) -> Result<CorpusManifest> {
    let inventory = PhoneInventory::standard(cfg.num_phones);
    let specs = cfg.language_specs(master_seed);
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir)?;

    struct Job<'a> {
        spec: &'a SyntheticLanguageSpec,
        split: Split,
        utt_no: usize,
        derive: bool,
    }
    let mut jobs = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let is_target = i < cfg.target_languages;
        let (n_train, n_test) = if is_target {
            (cfg.train_utts_per_language, cfg.test_utts_per_language)
        } else {
            (cfg.foreign_utts_per_language, 0)
        };
        for utt_no in 0..n_train {
            jobs.push(Job {
                spec,
                split: Split::Train,
                utt_no,
                derive: false,
            });
        }
        for utt_no in 0..n_test {
            jobs.push(Job {
                spec,
                split: Split::Test,
                utt_no,
                derive: true,
            });
        }
    }

    let results: Vec<Result<(Vec<ManifestEntry>, String, Vec<super::AlignSpan>)>> = jobs
        .par_iter()
        .map(|job| {
            let utt_id = format!(
                "{}_{}_{:04}",
                job.spec.language_id,
                job.split.as_str(),
                job.utt_no
            );
            let seed = utt_seed(master_seed, &utt_id);
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x5eed);
            let seconds =
                rand::Rng::gen_range::<f64, _>(&mut rng, cfg.utt_seconds.0..=cfg.utt_seconds.1);
            let utt = generate_utterance(
                &inventory,
                job.spec,
                &utt_id,
                seconds,
                frontend,
                cfg.sample_rate,
                seed,
            )?;
            let mut entries = Vec::new();
            let mut write = |u: &SynthUtt, condition: &str, split: Split| -> Result<()> {
                let rel = Path::new("wav").join(format!("{}.wav", u.utt_id));
                crate::dsp::write_wav(&out_dir.join(&rel), &u.wave)?;
                entries.push(ManifestEntry {
                    utt_id: u.utt_id.clone(),
                    language_id: u.language_id.clone(),
                    wav_path: rel,
                    split,
                    condition: condition.into(),
                });
                Ok(())
            };
            write(&utt, "clean", job.split)?;
            if job.derive {
                for &snr in &cfg.snr_db {
                    let cond = ExperimentConfig::condition_for_snr(snr);
                    let nid = format!("{}_{}", utt.utt_id, cond);
                    let nseed = utt_seed(master_seed, &nid);
                    let noise = white_noise(utt.wave.samples.len(), cfg.sample_rate, nseed);
                    let wave = add_noise(&utt.wave, &noise, snr, nseed)?;
                    write(
                        &SynthUtt {
                            utt_id: nid,
                            language_id: utt.language_id.clone(),
                            wave,
                            alignment: vec![],
                        },
                        &cond,
                        Split::Test,
                    )?;
                }
                if utt.wave.duration_seconds() >= cfg.min_slice_source_seconds {
                    for &dur in &cfg.duration_grid {
                        let cond = ExperimentConfig::condition_for_duration(dur);
                        let sid = format!("{}_{}", utt.utt_id, cond);
                        let sseed = utt_seed(master_seed, &sid);
                        let wave = slice_utterance(&utt.wave, dur, sseed)?;
                        write(
                            &SynthUtt {
                                utt_id: sid,
                                language_id: utt.language_id.clone(),
                                wave,
                                alignment: vec![],
                            },
                            &cond,
                            Split::Test,
                        )?;
                    }
                }
            }
            Ok((entries, utt.utt_id.clone(), utt.alignment))
        })
        .collect();

    let mut manifest = CorpusManifest::default();
    for r in results {
        let (entries, utt_id, alignment) = r?;
        manifest.entries.extend(entries);
        manifest.alignments.insert(utt_id, alignment);
    }
    manifest
        .entries
        .sort_by(|a, b| (&a.utt_id, &a.condition).cmp(&(&b.utt_id, &b.condition)));
    manifest.write(
        &out_dir.join("manifest.tsv"),
        &out_dir.join("alignments.tsv"),
    )?;
    Ok(manifest)
}
