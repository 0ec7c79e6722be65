// temporary probe
use ptn_lid::model::{build_model, InputMode, ModelSpec, PhoneticTraining};
use ptn_lid::train::{train, TrainConfig, TrainUtt};
use ptn_lid::dsp::{FeatureKind, FeatureMatrix};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut corpus = Vec::new();
    for lang in 0..2usize {
        let shift = if lang == 0 { 0.8 } else { -0.8 };
        for u in 0..12 {
            let data = Array2::from_shape_fn((30, 4), |(_, d)| {
                let base: f64 = rng.gen_range(-0.5..0.5);
                if d == 0 { base + shift } else { base }
            });
            corpus.push(TrainUtt {
                utt_id: format!("l{lang}u{u}"),
                lang,
                feats: FeatureMatrix { data, kind: FeatureKind::Fbank, frame_shift: 0.01 },
                phones: None,
                phi: None,
            });
        }
    }
    for (lr, mom, epochs) in [(0.3, 0.9, 20), (0.1, 0.9, 20), (0.5, 0.5, 30), (1.0, 0.0, 30), (2.0, 0.5, 40)] {
        let spec = ModelSpec {
            input_mode: InputMode::Acoustic, lid_layers: 1, cells: 5, proj: 3,
            feat_dim: 4, splice_left: 1, splice_right: 1, reset_every: 20,
            lid_classes: 2, phone_classes: None, phonetic_tap: None,
            phonetic_dnn_training: PhoneticTraining::Frozen,
        };
        let mut model = build_model(spec, None, 8).unwrap();
        let cfg = TrainConfig { lr, momentum: mom, epochs, batch_utts: 4, seed: 9,
            multitask_lambda: 0.0, max_grad_norm: 5.0, eval_holdout_fraction: 0.25 };
        match train(&mut model, &corpus, &cfg) {
            Ok(log) => {
                let tl: Vec<String> = log.entries.iter().filter(|e| e.split == "train").map(|e| format!("{:.3}", e.loss)).collect();
                let acc = log.entries.iter().rev().find(|e| e.split == "holdout").map(|e| e.frame_accuracy).unwrap_or(0.0);
                println!("lr={lr} mom={mom}: acc={acc:.3} losses={}", tl.join(","));
            }
            Err(e) => println!("lr={lr} mom={mom}: ERR {e}"),
        }
    }
}
