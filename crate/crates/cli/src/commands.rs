use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use ptn_lid::dsp::{
    add_noise, fbank, mfcc, read_wav, slice_utterance, white_noise, write_archive, write_wav,
    ArchiveRecord, FeatureKind,
};
use ptn_lid::metrics::{self, DetPoint, MetricsReport};
use ptn_lid::model::{build_model, Model, ModelSpec, PhoneticTraining};
use ptn_lid::synth::experiment::{build_corpus, ExperimentConfig};
use ptn_lid::synth::{utt_seed, CorpusManifest, ManifestEntry, Split, SynthUtt};
use ptn_lid::tdnn::{TdnnConfig, TdnnStack};
use ptn_lid::train::train;

use crate::config::{FeatureKindOpt, RunConfig};
use crate::pipeline::{
    build_corpus_utts, load_feature_map, load_tdnn, read_scores_tsv, save_tdnn, select_entries,
    train_languages, write_scores_tsv, TdnnInit, TDNN_PREFIX,
};

/// Failures that mean the run was misconfigured rather than broken.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ValidationError {}

fn validation(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ValidationError(msg.into()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

fn require_input(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(validation(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn read_manifest(cfg: &RunConfig, with_alignments: bool) -> Result<(CorpusManifest, PathBuf)> {
    let manifest_path = cfg
        .paths
        .manifest
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.manifest"))?;
    require_input(manifest_path, "manifest")?;
    let alignments = if with_alignments {
        let p = cfg
            .paths
            .alignments
            .as_deref()
            .ok_or_else(|| validation("config is missing paths.alignments"))?;
        require_input(p, "alignments")?;
        Some(p)
    } else {
        None
    };
    let manifest = CorpusManifest::read(manifest_path, alignments)?;
    if manifest.entries.is_empty() {
        return Err(validation("manifest lists no utterances"));
    }
    let base = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    Ok((manifest, base))
}

pub fn synth(cfg: &RunConfig, dry_run: bool) -> Result<()> {
    let out_dir = cfg
        .paths
        .out_dir
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.out_dir"))?;
    if dry_run {
        println!("dry-run ok: would synthesize into {}", out_dir.display());
        return Ok(());
    }
    let manifest = build_corpus(&cfg.experiment, out_dir, cfg.seed, &cfg.frontend)?;
    println!(
        "synthesized {} utterances into {}",
        manifest.entries.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn featurize(cfg: &RunConfig, dry_run: bool) -> Result<()> {
    let out = cfg
        .paths
        .features
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.features"))?;
    let (manifest, base) = read_manifest(cfg, false)?;
    let phonetic_model = match cfg.featurize.kind {
        FeatureKindOpt::Phonetic => {
            let p = cfg
                .paths
                .phonetic_model
                .as_deref()
                .ok_or_else(|| validation("phonetic features need paths.phonetic_model"))?;
            require_input(p, "phonetic model")?;
            Some(p)
        }
        _ => None,
    };
    if dry_run {
        println!("dry-run ok: would featurize into {}", out.display());
        return Ok(());
    }
    let stack = match phonetic_model {
        Some(p) => Some(load_tdnn(p, TdnnInit::Pretrained)?.0),
        None => None,
    };
    let entries = select_entries(
        &manifest,
        &cfg.featurize.split,
        &cfg.featurize.condition,
        &[],
    );
    if entries.is_empty() {
        return Err(validation("featurize selection matched no utterances"));
    }
    let records: Vec<Result<ArchiveRecord>> = entries
        .par_iter()
        .map(|e| {
            let wave = read_wav(&base.join(&e.wav_path))?;
            let feats = match cfg.featurize.kind {
                FeatureKindOpt::Fbank => fbank(&wave, &cfg.frontend)?,
                FeatureKindOpt::Mfcc => mfcc(&wave, &cfg.frontend)?,
                FeatureKindOpt::Phonetic => {
                    let base_feats = fbank(&wave, &cfg.frontend)?;
                    stack
                        .as_ref()
                        .expect("loaded above")
                        .read_phonetic_feature(&base_feats, cfg.featurize.phonetic_tap)?
                }
            };
            Ok(ArchiveRecord {
                utt_id: e.utt_id.clone(),
                feats,
            })
        })
        .collect();
    let records: Vec<ArchiveRecord> = records.into_iter().collect::<Result<_>>()?;
    ensure_parent(out)?;
    write_archive(out, &records)?;
    println!("featurized {} utterances into {}", records.len(), out.display());
    Ok(())
}

fn resolve_languages(requested: &[String], manifest: &CorpusManifest) -> Result<Vec<String>> {
    let available = train_languages(manifest);
    if requested.is_empty() {
        return Ok(available);
    }
    let mut langs = requested.to_vec();
    langs.sort();
    langs.dedup();
    for l in &langs {
        if !available.contains(l) {
            return Err(validation(format!(
                "language {l} has no training utterances in the manifest"
            )));
        }
    }
    Ok(langs)
}

pub fn train_phonetic(cfg: &RunConfig, dry_run: bool) -> Result<()> {
    let model_out = cfg
        .paths
        .phonetic_model
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.phonetic_model"))?;
    let features_path = cfg
        .paths
        .features
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.features"))?;
    require_input(features_path, "feature archive")?;
    let (manifest, _) = read_manifest(cfg, true)?;
    let languages = resolve_languages(&cfg.tdnn.languages, &manifest)?;
    if dry_run {
        println!(
            "dry-run ok: would train a phonetic network on {} languages",
            languages.len()
        );
        return Ok(());
    }

    let features = load_feature_map(features_path)?;
    let entries = select_entries(&manifest, "train", "clean", &languages);
    let corpus = build_corpus_utts(
        &entries,
        &features,
        &languages,
        Some(&manifest.alignments),
        FeatureKind::Fbank,
    )?;
    if corpus.is_empty() {
        return Err(validation("no training utterances selected"));
    }
    let phone_classes = corpus
        .iter()
        .flat_map(|u| u.phones.as_ref().unwrap().iter())
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let input_dim = corpus[0].feats.dim();

    let tdnn_config = TdnnConfig {
        input_dim,
        input_splice_left: cfg.tdnn.splice_left,
        input_splice_right: cfg.tdnn.splice_right,
        layers: cfg.tdnn.layers.clone(),
        phone_classes,
        lid_classes: cfg.tdnn.multi_task_lid.then_some(languages.len()),
        svd_rank: (cfg.tdnn.svd_rank > 0).then_some(cfg.tdnn.svd_rank),
    };
    let mut stack = TdnnStack::new(tdnn_config, TDNN_PREFIX, cfg.seed)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    log::info!(
        "training phonetic network: {} utts, {} phones, lid head: {}",
        corpus.len(),
        phone_classes,
        cfg.tdnn.multi_task_lid
    );
    let log = train(&mut stack, &corpus, &train_cfg)?;
    if let Some(rank) = stack.config.svd_rank {
        stack.apply_svd_bottleneck(rank)?;
    }
    ensure_parent(model_out)?;
    save_tdnn(model_out, &stack, &languages)?;
    if let Some(log_path) = cfg.paths.train_log.as_deref() {
        ensure_parent(log_path)?;
        std::fs::write(log_path, log.to_tsv())?;
    }
    let last = log.entries.last().map(|e| e.loss).unwrap_or(f64::NAN);
    println!(
        "trained phonetic network ({} epochs, final loss {last:.4}) -> {}",
        cfg.train.epochs,
        model_out.display()
    );
    Ok(())
}

pub fn train_lid(cfg: &RunConfig, dry_run: bool) -> Result<()> {
    let model_out = cfg
        .paths
        .lid_model
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.lid_model"))?;
    let features_path = cfg
        .paths
        .features
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.features"))?;
    require_input(features_path, "feature archive")?;
    let needs_phonetic = cfg.model.input_mode.needs_phonetic();
    let phonetic_path = match (needs_phonetic, cfg.paths.phonetic_model.as_deref()) {
        (true, None) => {
            return Err(validation(format!(
                "input mode {:?} requires paths.phonetic_model",
                cfg.model.input_mode
            )))
        }
        (true, Some(p)) => {
            require_input(p, "phonetic model")?;
            Some(p)
        }
        (false, _) => None,
    };
    let multitask = cfg.model.phone_classes > 0;
    let (manifest, _) = read_manifest(cfg, multitask)?;
    let languages = resolve_languages(&cfg.model.languages, &manifest)?;
    if dry_run {
        println!(
            "dry-run ok: would train a {:?} classifier on {} languages",
            cfg.model.input_mode,
            languages.len()
        );
        return Ok(());
    }

    let features = load_feature_map(features_path)?;
    let entries = select_entries(&manifest, "train", "clean", &languages);
    let mut corpus = build_corpus_utts(
        &entries,
        &features,
        &languages,
        multitask.then_some(&manifest.alignments),
        FeatureKind::Fbank,
    )?;
    if corpus.is_empty() {
        return Err(validation("no training utterances selected"));
    }

    let phonetic = match phonetic_path {
        Some(p) => {
            let init = match cfg.model.phonetic_training {
                PhoneticTraining::JointRandomInit => TdnnInit::Random(cfg.seed ^ 0x7d00),
                _ => TdnnInit::Pretrained,
            };
            Some(load_tdnn(p, init)?.0)
        }
        None => None,
    };

    let spec = ModelSpec {
        input_mode: cfg.model.input_mode,
        lid_layers: cfg.model.lid_layers,
        cells: cfg.model.cells,
        proj: cfg.model.proj,
        feat_dim: corpus[0].feats.dim(),
        splice_left: cfg.model.splice_left,
        splice_right: cfg.model.splice_right,
        reset_every: cfg.model.reset_every,
        lid_classes: languages.len(),
        languages: languages.clone(),
        phone_classes: multitask.then_some(cfg.model.phone_classes),
        phonetic_tap: needs_phonetic.then_some(cfg.model.phonetic_tap),
        phonetic_dnn_training: cfg.model.phonetic_training,
    };
    let mut model = build_model(spec, phonetic, cfg.seed)?;

    // a frozen phonetic network's features never change: compute them once
    if needs_phonetic && cfg.model.phonetic_training == PhoneticTraining::Frozen {
        let phis: Vec<Result<ndarray::Array2<f64>>> = corpus
            .par_iter()
            .map(|u| {
                Ok(model
                    .phonetic_features(&u.feats)?
                    .expect("phonetic mode has a tap")
                    .data)
            })
            .collect();
        for (u, phi) in corpus.iter_mut().zip(phis) {
            u.phi = Some(phi?);
        }
    }

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    log::info!(
        "training {:?} classifier: {} utts, {} languages",
        cfg.model.input_mode,
        corpus.len(),
        languages.len()
    );
    let log = train(&mut model, &corpus, &train_cfg)?;
    ensure_parent(model_out)?;
    model.save(model_out)?;
    if let Some(log_path) = cfg.paths.train_log.as_deref() {
        ensure_parent(log_path)?;
        std::fs::write(log_path, log.to_tsv())?;
    }
    let last = log.entries.last().map(|e| e.loss).unwrap_or(f64::NAN);
    println!(
        "trained {:?} classifier (final loss {last:.4}) -> {}",
        cfg.model.input_mode,
        model_out.display()
    );
    Ok(())
}

pub fn score(cfg: &RunConfig, dry_run: bool) -> Result<()> {
    let scores_utt_path = cfg
        .paths
        .scores_utt
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.scores_utt"))?;
    let model_path = cfg
        .paths
        .lid_model
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.lid_model"))?;
    require_input(model_path, "classifier model")?;
    let features_path = cfg
        .paths
        .features
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.features"))?;
    require_input(features_path, "feature archive")?;
    let (manifest, _) = read_manifest(cfg, false)?;
    if dry_run {
        println!("dry-run ok: would score {} / {}", cfg.score.split, cfg.score.condition);
        return Ok(());
    }

    let model = Model::load(model_path)?;
    let languages = if model.spec.languages.is_empty() {
        train_languages(&manifest)
    } else {
        model.spec.languages.clone()
    };
    if languages.len() != model.spec.lid_classes {
        bail!(
            "{} languages for a {}-way classifier",
            languages.len(),
            model.spec.lid_classes
        );
    }
    let entries = select_entries(&manifest, &cfg.score.split, &cfg.score.condition, &languages);
    if entries.is_empty() {
        return Err(validation(format!(
            "no utterances for split {:?} condition {:?}",
            cfg.score.split, cfg.score.condition
        )));
    }
    let features = load_feature_map(features_path)?;

    struct Scored {
        utt_id: String,
        language_id: String,
        utt_scores: Vec<f64>,
        frame_rows: Vec<(String, Vec<f64>)>,
    }
    let want_frames = cfg.paths.scores_frame.is_some();
    let results: Vec<Result<Scored>> = entries
        .par_iter()
        .map(|e| {
            let feats = features
                .get(&e.utt_id)
                .ok_or_else(|| anyhow!("utterance {} missing from archive", e.utt_id))?;
            let pg = model.forward_utterance(&e.utt_id, feats)?;
            let mean = metrics::average_posteriors(&pg)?;
            let frame_rows = if want_frames {
                (0..pg.post.nrows())
                    .map(|t| (format!("{}#{t}", e.utt_id), pg.post.row(t).to_vec()))
                    .collect()
            } else {
                Vec::new()
            };
            Ok(Scored {
                utt_id: e.utt_id.clone(),
                language_id: e.language_id.clone(),
                utt_scores: mean.to_vec(),
                frame_rows,
            })
        })
        .collect();

    let mut utt_rows = Vec::new();
    let mut frame_rows = Vec::new();
    for r in results {
        let s = r?;
        utt_rows.push((s.utt_id, s.language_id.clone(), s.utt_scores));
        for (id, scores) in s.frame_rows {
            frame_rows.push((id, s.language_id.clone(), scores));
        }
    }
    ensure_parent(scores_utt_path)?;
    write_scores_tsv(scores_utt_path, &languages, &utt_rows)?;
    if let Some(frame_path) = cfg.paths.scores_frame.as_deref() {
        ensure_parent(frame_path)?;
        write_scores_tsv(frame_path, &languages, &frame_rows)?;
    }
    println!(
        "scored {} utterances ({}/{}) -> {}",
        utt_rows.len(),
        cfg.score.split,
        cfg.score.condition,
        scores_utt_path.display()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, dry_run: bool) -> Result<()> {
    let metrics_path = cfg
        .paths
        .metrics
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.metrics"))?;
    if cfg.eval.conditions.is_empty() {
        return Err(validation("config is missing [[eval.conditions]] entries"));
    }
    for c in &cfg.eval.conditions {
        require_input(&c.scores_utt, "scores file")?;
        if let Some(f) = &c.scores_frame {
            require_input(f, "frame scores file")?;
        }
    }
    if dry_run {
        println!("dry-run ok: would evaluate {} conditions", cfg.eval.conditions.len());
        return Ok(());
    }

    let mut reports: BTreeMap<String, MetricsReport> = BTreeMap::new();
    for c in &cfg.eval.conditions {
        let (_langs, utt) = read_scores_tsv(&c.scores_utt)?;
        utt.validate().map_err(|e| anyhow!("{}: {e}", c.name))?;
        let (targets, nontargets) = utt.pooled_trials();
        let det = metrics::det_curve(&targets, &nontargets)?;
        let eer_utt = metrics::eer(&targets, &nontargets)?;
        let cavg_utt = metrics::cavg(&utt, 0.5)?;
        let (cavg_frame, eer_frame) = match &c.scores_frame {
            Some(path) => {
                let (_, fr) = read_scores_tsv(path)?;
                let (t, n) = fr.pooled_trials();
                (Some(metrics::cavg(&fr, 0.5)?), Some(metrics::eer(&t, &n)?))
            }
            None => (None, None),
        };
        let report = MetricsReport {
            cavg_frame,
            cavg_utt,
            eer_frame_pct: eer_frame,
            eer_utt_pct: eer_utt,
            num_utts: utt.utt_ids.len(),
            num_langs: utt.num_langs(),
            det_points_utt: det,
        };
        println!(
            "{}: utt Cavg {:.4} EER {:.2}%{}",
            c.name,
            report.cavg_utt,
            report.eer_utt_pct,
            match (report.cavg_frame, report.eer_frame_pct) {
                (Some(c), Some(e)) => format!(" | frame Cavg {c:.4} EER {e:.2}%"),
                _ => String::new(),
            }
        );
        reports.insert(c.name.clone(), report);
    }

    ensure_parent(metrics_path)?;
    std::fs::write(metrics_path, serde_json::to_string_pretty(&reports)?)?;

    if let Some(det_path) = cfg.paths.det_csv.as_deref() {
        let mut out = String::from("x,y,condition\n");
        for (name, report) in &reports {
            for DetPoint { p_miss, p_fa } in &report.det_points_utt {
                out.push_str(&format!("{p_fa:.9},{p_miss:.9},{name}\n"));
            }
        }
        ensure_parent(det_path)?;
        std::fs::write(det_path, out)?;
    }

    if let Some(deg_path) = cfg.paths.degradation_csv.as_deref() {
        let reference = if cfg.eval.reference.is_empty() {
            "clean".to_string()
        } else {
            cfg.eval.reference.clone()
        };
        let clean = reports
            .get(&reference)
            .ok_or_else(|| validation(format!("degradation needs condition {reference:?}")))?;
        let mut out = String::from("condition,metric,clean,noisy,rate_pct\n");
        for (name, report) in &reports {
            if name == &reference {
                continue;
            }
            for row in metrics::degradation_rate(name, clean, report)? {
                out.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6}\n",
                    row.condition, row.metric, row.clean, row.noisy, row.rate_pct
                ));
            }
        }
        ensure_parent(deg_path)?;
        std::fs::write(deg_path, out)?;
    }
    println!("wrote metrics for {} conditions -> {}", reports.len(), metrics_path.display());
    Ok(())
}

/// Shared shape of augment/slice: derive new waveforms from a manifest
/// selection and write a stand-alone derived test set.
fn derive_set(
    cfg: &RunConfig,
    split: &str,
    condition: &str,
    dry_run: bool,
    what: &str,
    derive: impl Fn(&SynthUtt, u64) -> Result<Vec<(String, ptn_lid::Waveform)>> + Sync,
) -> Result<()> {
    let out_dir = cfg
        .paths
        .out_dir
        .as_deref()
        .ok_or_else(|| validation("config is missing paths.out_dir"))?;
    let (manifest, base) = read_manifest(cfg, false)?;
    let entries = select_entries(&manifest, split, condition, &[]);
    if entries.is_empty() {
        return Err(validation("selection matched no utterances"));
    }
    if dry_run {
        println!("dry-run ok: would {what} {} utterances", entries.len());
        return Ok(());
    }
    std::fs::create_dir_all(out_dir.join("wav"))?;
    let produced: Vec<Result<Vec<ManifestEntry>>> = entries
        .par_iter()
        .map(|e| {
            let wave = read_wav(&base.join(&e.wav_path))?;
            let utt = SynthUtt {
                utt_id: e.utt_id.clone(),
                language_id: e.language_id.clone(),
                wave,
                alignment: vec![],
            };
            let mut out = Vec::new();
            for (cond, wave) in derive(&utt, cfg.seed)? {
                let utt_id = format!("{}_{cond}", e.utt_id);
                let rel = Path::new("wav").join(format!("{utt_id}.wav"));
                write_wav(&out_dir.join(&rel), &wave)?;
                out.push(ManifestEntry {
                    utt_id,
                    language_id: e.language_id.clone(),
                    wav_path: rel,
                    split: Split::Test,
                    condition: cond,
                });
            }
            Ok(out)
        })
        .collect();
    let mut out_manifest = CorpusManifest::default();
    for p in produced {
        out_manifest.entries.extend(p?);
    }
    out_manifest
        .entries
        .sort_by(|a, b| (&a.utt_id, &a.condition).cmp(&(&b.utt_id, &b.condition)));
    out_manifest.write(
        &out_dir.join("manifest.tsv"),
        &out_dir.join("alignments.tsv"),
    )?;
    println!(
        "derived {} utterances -> {}",
        out_manifest.entries.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn augment(cfg: &RunConfig, dry_run: bool) -> Result<()> {
    let snrs = cfg.augment.snr_db.clone();
    if snrs.is_empty() {
        return Err(validation("augment.snr_db is empty"));
    }
    derive_set(
        cfg,
        &cfg.augment.split,
        &cfg.augment.condition,
        dry_run,
        "add noise to",
        move |utt, master_seed| {
            let mut out = Vec::new();
            for &snr in &snrs {
                let cond = ExperimentConfig::condition_for_snr(snr);
                let seed = utt_seed(master_seed, &format!("{}_{cond}", utt.utt_id));
                let noise = white_noise(utt.wave.samples.len(), utt.wave.sample_rate, seed);
                out.push((cond, add_noise(&utt.wave, &noise, snr, seed)?));
            }
            Ok(out)
        },
    )
}

pub fn slice(cfg: &RunConfig, dry_run: bool) -> Result<()> {
    let durations = cfg.slice.durations.clone();
    if durations.is_empty() {
        return Err(validation("slice.durations is empty"));
    }
    let min_source = cfg.slice.min_source_seconds;
    derive_set(
        cfg,
        &cfg.slice.split,
        &cfg.slice.condition,
        dry_run,
        "slice",
        move |utt, master_seed| {
            let mut out = Vec::new();
            if utt.wave.duration_seconds() < min_source {
                return Ok(out);
            }
            for &dur in &durations {
                let cond = ExperimentConfig::condition_for_duration(dur);
                let seed = utt_seed(master_seed, &format!("{}_{cond}", utt.utt_id));
                out.push((cond, slice_utterance(&utt.wave, dur, seed)?));
            }
            Ok(out)
        },
    )
}

pub fn gradcheck() -> Result<()> {
    let started = std::time::Instant::now();
    let results = ptn_lid::suite::full_gradient_suite();
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<28} max rel err {:>12.3e}  (tol {:.0e})  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed += 1;
        }
    }
    println!("gradient suite finished in {:.2?}", started.elapsed());
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}
