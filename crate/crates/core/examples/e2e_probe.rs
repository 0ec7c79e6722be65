// Experiment-tuning probe: runs the default synthetic experiment end to end
// for one seed and prints every metric the acceptance orderings care about.

use std::collections::BTreeMap;
use std::time::Instant;

use ptn_lid::dsp::FrontendConfig;
use ptn_lid::metrics::{self, MetricsReport};
use ptn_lid::model::{build_model, InputMode, Model, ModelSpec, PhoneticTraining, Posteriorgram};
use ptn_lid::synth::experiment::{featurize_experiment, ExperimentConfig, FeaturizedUtt};
use ptn_lid::tdnn::{Tap, TdnnConfig, TdnnLayerSpec, TdnnStack};
use ptn_lid::train::{train, TrainConfig, TrainUtt, Trainable};
use rayon::prelude::*;

fn desk_tdnn_config(num_phones: usize, lid_classes: Option<usize>) -> TdnnConfig {
    TdnnConfig {
        input_dim: 23,
        input_splice_left: 4,
        input_splice_right: 4,
        layers: vec![
            TdnnLayerSpec { context_offsets: vec![-2, -1, 0, 1, 2], hidden_dim: 128, pnorm_group: 4 },
            TdnnLayerSpec { context_offsets: vec![-1, 0, 1], hidden_dim: 128, pnorm_group: 4 },
            TdnnLayerSpec { context_offsets: vec![0], hidden_dim: 128, pnorm_group: 4 },
        ],
        phone_classes: num_phones,
        lid_classes,
        svd_rank: None,
    }
}

fn desk_model_spec(mode: InputMode, k: usize, phones: Option<usize>, tap: bool) -> ModelSpec {
    ModelSpec {
        input_mode: mode,
        lid_layers: 1,
        cells: 64,
        proj: 32,
        feat_dim: 23,
        splice_left: 2,
        splice_right: 2,
        reset_every: 20,
        lid_classes: k,
        languages: vec![],
        phone_classes: phones,
        phonetic_tap: tap.then_some(Tap::LastHidden),
        phonetic_dnn_training: PhoneticTraining::Frozen,
    }
}

fn to_train_utts(utts: &[FeaturizedUtt], with_phones: bool) -> Vec<TrainUtt> {
    utts.iter()
        .map(|u| TrainUtt {
            utt_id: u.utt_id.clone(),
            lang: u.lang_index,
            feats: u.fbank.clone(),
            phones: if with_phones { u.frame_phones.clone() } else { None },
            phi: None,
        })
        .collect()
}

fn precompute_phi(model: &Model, corpus: &mut [TrainUtt]) {
    let phis: Vec<ndarray::Array2<f64>> = corpus
        .par_iter()
        .map(|u| model.phonetic_features(&u.feats).unwrap().unwrap().data)
        .collect();
    for (u, phi) in corpus.iter_mut().zip(phis) {
        u.phi = Some(phi);
    }
}

fn score_condition(model: &Model, utts: &[FeaturizedUtt]) -> MetricsReport {
    let pgs: Vec<Posteriorgram> = utts
        .par_iter()
        .map(|u| model.forward_utterance(&u.utt_id, &u.fbank).unwrap())
        .collect();
    let labels: Vec<usize> = utts.iter().map(|u| u.lang_index).collect();
    metrics::evaluate(&pgs, &labels).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.2);

    let t0 = Instant::now();
    let exp_cfg = ExperimentConfig::default();
    let frontend = FrontendConfig::default();
    let exp = featurize_experiment(&exp_cfg, &frontend, seed).unwrap();
    println!(
        "[{:?}] synthesized+featurized: train {} test {} foreign {} noisy {:?} sliced {:?}",
        t0.elapsed(),
        exp.train.len(),
        exp.test_clean.len(),
        exp.foreign_train.len(),
        exp.test_noisy.iter().map(|(k, v)| (k.clone(), v.len())).collect::<Vec<_>>(),
        exp.test_sliced.iter().map(|(k, v)| (k.clone(), v.len())).collect::<Vec<_>>(),
    );

    let k = exp.target_languages.len();
    let p = exp_cfg.num_phones;
    let tcfg = TrainConfig {
        lr,
        momentum: 0.9,
        epochs,
        batch_utts: 8,
        seed,
        multitask_lambda: 1.0,
        max_grad_norm: 5.0,
        eval_holdout_fraction: 0.05,
    };

    // phonetic networks
    let t1 = Instant::now();
    let mut tdnn_native = TdnnStack::new(desk_tdnn_config(p, Some(k)), "tdnn.", seed).unwrap();
    let corpus_native = to_train_utts(&exp.train, true);
    let log = train(&mut tdnn_native, &corpus_native, &TrainConfig { epochs: 4, lr: 0.1, ..tcfg.clone() }).unwrap();
    println!("[{:?}] native TDNN: {}", t1.elapsed(), summarize(&log));

    let t1 = Instant::now();
    let mut tdnn_foreign = TdnnStack::new(desk_tdnn_config(p, None), "tdnn.", seed ^ 1).unwrap();
    let corpus_foreign = to_train_utts(&exp.foreign_train, true);
    let log = train(&mut tdnn_foreign, &corpus_foreign, &TrainConfig { epochs: 4, lr: 0.1, ..tcfg.clone() }).unwrap();
    println!("[{:?}] foreign TDNN: {}", t1.elapsed(), summarize(&log));

    // classifiers
    let mut reports: BTreeMap<String, BTreeMap<String, MetricsReport>> = BTreeMap::new();
    let lid_corpus_plain = to_train_utts(&exp.train, false);
    let lid_corpus_mlt = to_train_utts(&exp.train, true);

    let mut run_model = |name: &str, mut model: Model, corpus: &mut Vec<TrainUtt>| {
        let t1 = Instant::now();
        if model.spec.input_mode.needs_phonetic() {
            precompute_phi(&model, corpus);
        }
        let log = train(&mut model, corpus, &tcfg).unwrap();
        let mut conds = BTreeMap::new();
        conds.insert("clean".to_string(), score_condition(&model, &exp.test_clean));
        for (cond, utts) in &exp.test_noisy {
            conds.insert(cond.clone(), score_condition(&model, utts));
        }
        for (cond, utts) in &exp.test_sliced {
            conds.insert(cond.clone(), score_condition(&model, utts));
        }
        println!(
            "[{:?}] {name}: train {} | clean utt EER {:.2}% frame EER {:.2}% Cavg {:.4}",
            t1.elapsed(),
            summarize(&log),
            conds["clean"].eer_utt_pct,
            conds["clean"].eer_frame_pct.unwrap(),
            conds["clean"].cavg_utt,
        );
        reports.insert(name.to_string(), conds);
    };

    run_model(
        "acoustic",
        build_model(desk_model_spec(InputMode::Acoustic, k, None, false), None, seed).unwrap(),
        &mut lid_corpus_plain.clone(),
    );
    run_model(
        "mlt",
        build_model(desk_model_spec(InputMode::Acoustic, k, Some(p), false), None, seed).unwrap(),
        &mut lid_corpus_mlt.clone(),
    );
    run_model(
        "ptn",
        build_model(desk_model_spec(InputMode::Ptn, k, None, true), Some(tdnn_native.clone()), seed).unwrap(),
        &mut lid_corpus_plain.clone(),
    );
    run_model(
        "ptn_foreign",
        build_model(desk_model_spec(InputMode::Ptn, k, None, true), Some(tdnn_foreign.clone()), seed).unwrap(),
        &mut lid_corpus_plain.clone(),
    );

    println!("\n=== seed {seed} summary (total {:?}) ===", t0.elapsed());
    for (name, conds) in &reports {
        let clean = &conds["clean"];
        print!(
            "{name:<12} clean: utt {:>6.2}% fr {:>6.2}%  | noisy utt EER:",
            clean.eer_utt_pct,
            clean.eer_frame_pct.unwrap()
        );
        for snr in ["snr30", "snr20", "snr10"] {
            if let Some(r) = conds.get(snr) {
                let rate = (r.eer_utt_pct - clean.eer_utt_pct) / clean.eer_utt_pct * 100.0;
                print!(" {snr} {:.2}% (deg {:.0}%)", r.eer_utt_pct, rate);
            }
        }
        println!();
        if name == "ptn" {
            print!("             durations:");
            for (cond, r) in conds.iter().filter(|(c, _)| c.starts_with("dur")) {
                print!(" {cond} {:.2}%", r.eer_utt_pct);
            }
            println!();
        }
    }
}

fn summarize(log: &ptn_lid::train::TrainLog) -> String {
    let train_losses = log.losses("train");
    let accs: Vec<f64> = log
        .entries
        .iter()
        .filter(|e| e.split == "train")
        .map(|e| e.frame_accuracy)
        .collect();
    format!(
        "loss {:.3}->{:.3} acc {:.3}",
        train_losses.first().unwrap_or(&f64::NAN),
        train_losses.last().unwrap_or(&f64::NAN),
        accs.last().unwrap_or(&f64::NAN)
    )
}
