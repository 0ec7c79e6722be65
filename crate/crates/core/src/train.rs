//! Mini-batch SGD with classical momentum for the phonetic networks and the
//! recurrent classifiers.
//!
//! Batches group whole utterances. Per-utterance gradients may fan out across
//! threads; they are reduced in batch order, so the result does not depend on
//! the thread count. The loss is the per-frame mean of the language
//! cross-entropy plus `multitask_lambda` times the phone cross-entropy where
//! both output groups exist.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::FeatureMatrix;
use crate::model::{Model, PhoneticTraining};
use crate::nn::{flatten_grads, softmax_xent, zero_grads, ParamRef, ParamRefMut, ParamSet};
use crate::tdnn::TdnnStack;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("holdout fraction {0} leaves no training utterances")]
    HoldoutTooLarge(f64),
    #[error("utterance {utt}: {what}")]
    LabelMismatch { utt: String, what: String },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Tdnn(#[from] crate::tdnn::TdnnError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_utts: usize,
    pub seed: u64,
    /// Weight of the phone cross-entropy when a network has both output
    /// groups; a network with only a phone head always trains at weight 1.
    pub multitask_lambda: f64,
    pub max_grad_norm: f64,
    pub eval_holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 10,
            batch_utts: 8,
            seed: 0,
            multitask_lambda: 1.0,
            max_grad_norm: 5.0,
            eval_holdout_fraction: 0.1,
        }
    }
}

/// One training utterance. `feats` is whatever the network consumes directly:
/// raw fbanks for the recurrent classifiers (which splice internally), or
/// pre-spliced features for the time-delay network. `phi`, when present,
/// short-circuits the phonetic tap of a frozen phonetic network.
#[derive(Debug, Clone)]
pub struct TrainUtt {
    pub utt_id: String,
    pub lang: usize,
    pub feats: FeatureMatrix,
    pub phones: Option<Vec<usize>>,
    pub phi: Option<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub loss_sum: f64,
    pub frames: usize,
    pub correct: usize,
}

impl LossStats {
    fn merge(&mut self, other: LossStats) {
        self.loss_sum += other.loss_sum;
        self.frames += other.frames;
        self.correct += other.correct;
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.frames.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.frames.max(1) as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub frame_accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tsplit\tloss\tframe_accuracy\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\n",
                e.epoch, e.split, e.loss, e.frame_accuracy
            ));
        }
        out
    }

    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.loss)
            .collect()
    }
}

/// A network the SGD loop can drive.
pub trait Trainable: ParamSet + Clone + Send + Sync {
    /// Accumulate gradients of the summed per-frame loss for one utterance
    /// into the grad buffers.
    fn accumulate(&mut self, utt: &TrainUtt, lambda: f64) -> Result<LossStats>;

    /// Loss and accuracy without gradients.
    fn evaluate(&self, utt: &TrainUtt, lambda: f64) -> Result<LossStats>;

    /// Parameters excluded from updates (frozen subnetworks).
    fn is_trainable(&self, name: &str) -> bool {
        let _ = name;
        true
    }
}

impl Trainable for Model {
    fn accumulate(&mut self, utt: &TrainUtt, lambda: f64) -> Result<LossStats> {
        let phi_override = match self.spec.phonetic_dnn_training {
            PhoneticTraining::Frozen => utt.phi.as_ref(),
            _ => None,
        };
        let fwd = self.forward_cached(&utt.feats, phi_override)?;
        let (d_logits, stats) = self.frame_losses(utt, &fwd.logits, lambda)?;
        self.backward(&fwd, &d_logits)?;
        Ok(stats)
    }

    fn evaluate(&self, utt: &TrainUtt, lambda: f64) -> Result<LossStats> {
        let phi_override = match self.spec.phonetic_dnn_training {
            PhoneticTraining::Frozen => utt.phi.as_ref(),
            _ => None,
        };
        let fwd = self.forward_cached(&utt.feats, phi_override)?;
        let (_, stats) = self.frame_losses(utt, &fwd.logits, lambda)?;
        Ok(stats)
    }

    fn is_trainable(&self, name: &str) -> bool {
        !(self.spec.phonetic_dnn_training == PhoneticTraining::Frozen
            && name.starts_with("tdnn."))
    }
}

impl Model {
    fn frame_losses(
        &self,
        utt: &TrainUtt,
        logits: &Array2<f64>,
        lambda: f64,
    ) -> Result<(Array2<f64>, LossStats)> {
        let k = self.spec.lid_classes;
        if utt.lang >= k {
            return Err(TrainError::LabelMismatch {
                utt: utt.utt_id.clone(),
                what: format!("language label {} with {k} classes", utt.lang),
            });
        }
        let phones = match (self.spec.phone_classes, lambda != 0.0) {
            (Some(_), true) => Some(utt.phones.as_ref().ok_or_else(|| {
                TrainError::LabelMismatch {
                    utt: utt.utt_id.clone(),
                    what: "multi-task head needs per-frame phone labels".into(),
                }
            })?),
            _ => None,
        };
        let t_max = logits.nrows();
        if let Some(ph) = phones {
            if ph.len() != t_max {
                return Err(TrainError::LabelMismatch {
                    utt: utt.utt_id.clone(),
                    what: format!("{} phone labels for {t_max} frames", ph.len()),
                });
            }
        }
        let mut d = Array2::zeros(logits.raw_dim());
        let mut stats = LossStats::default();
        for t in 0..t_max {
            let row = logits.row(t);
            let (loss, dl) = softmax_xent(row.slice(ndarray::s![0..k]), utt.lang)?;
            stats.loss_sum += loss;
            d.row_mut(t).slice_mut(ndarray::s![0..k]).assign(&dl);
            if argmax(row.slice(ndarray::s![0..k]).as_slice().unwrap()) == utt.lang {
                stats.correct += 1;
            }
            if let Some(ph) = phones {
                let (loss_p, dp) = softmax_xent(row.slice(ndarray::s![k..]), ph[t])?;
                stats.loss_sum += lambda * loss_p;
                d.row_mut(t)
                    .slice_mut(ndarray::s![k..])
                    .assign(&(dp * lambda));
            }
            stats.frames += 1;
        }
        Ok((d, stats))
    }
}

impl Trainable for TdnnStack {
    fn accumulate(&mut self, utt: &TrainUtt, lambda: f64) -> Result<LossStats> {
        let fwd = self.forward_frames(&utt.feats.data)?;
        let (d_phone, d_lid, stats) = tdnn_frame_losses(self, utt, &fwd, lambda)?;
        self.backward(&fwd, Some(&d_phone), d_lid.as_ref(), None)?;
        Ok(stats)
    }

    fn evaluate(&self, utt: &TrainUtt, lambda: f64) -> Result<LossStats> {
        let fwd = self.forward_frames(&utt.feats.data)?;
        let (_, _, stats) = tdnn_frame_losses(self, utt, &fwd, lambda)?;
        Ok(stats)
    }
}

fn tdnn_frame_losses(
    stack: &TdnnStack,
    utt: &TrainUtt,
    fwd: &crate::tdnn::TdnnForward,
    lambda: f64,
) -> Result<(Array2<f64>, Option<Array2<f64>>, LossStats)> {
    let phones = utt.phones.as_ref().ok_or_else(|| TrainError::LabelMismatch {
        utt: utt.utt_id.clone(),
        what: "phonetic network training needs per-frame phone labels".into(),
    })?;
    let t_max = fwd.phone_logits.nrows();
    if phones.len() != t_max {
        return Err(TrainError::LabelMismatch {
            utt: utt.utt_id.clone(),
            what: format!("{} phone labels for {t_max} frames", phones.len()),
        });
    }
    // with both output groups the phone group carries weight lambda; a pure
    // phone network always trains at weight 1
    let phone_weight = if stack.has_lid_head() { lambda } else { 1.0 };
    let mut d_phone = Array2::zeros(fwd.phone_logits.raw_dim());
    let mut d_lid = fwd.lid_logits.as_ref().map(|l| Array2::zeros(l.raw_dim()));
    let mut stats = LossStats::default();
    for t in 0..t_max {
        let (loss, dp) = softmax_xent(fwd.phone_logits.row(t), phones[t])?;
        stats.loss_sum += phone_weight * loss;
        d_phone.row_mut(t).assign(&(dp * phone_weight));
        if argmax(fwd.phone_logits.row(t).as_slice().unwrap()) == phones[t] {
            stats.correct += 1;
        }
        if let (Some(lid_logits), Some(d_lid)) = (fwd.lid_logits.as_ref(), d_lid.as_mut()) {
            let (loss_l, dl) = softmax_xent(lid_logits.row(t), utt.lang)?;
            stats.loss_sum += loss_l;
            d_lid.row_mut(t).assign(&dl);
        }
        stats.frames += 1;
    }
    Ok((d_phone, d_lid, stats))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Train in place, returning the per-epoch loss log.
pub fn train<M: Trainable>(
    network: &mut M,
    corpus: &[TrainUtt],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    indices.shuffle(&mut rng);
    let n_holdout = ((corpus.len() as f64) * cfg.eval_holdout_fraction).floor() as usize;
    if n_holdout >= corpus.len() {
        return Err(TrainError::HoldoutTooLarge(cfg.eval_holdout_fraction));
    }
    let (holdout_idx, train_idx) = indices.split_at(n_holdout);
    let holdout: Vec<&TrainUtt> = holdout_idx.iter().map(|&i| &corpus[i]).collect();
    let mut train_order: Vec<usize> = train_idx.to_vec();

    let layout = param_layout(network);
    let n_coords: usize = layout.iter().map(|(_, len)| len).sum();
    let mut velocity = vec![0.0f64; n_coords];
    let mut lr = cfg.lr;
    let mut best_loss = f64::INFINITY;
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        train_order.shuffle(&mut rng);
        let mut epoch_stats = LossStats::default();
        for (batch_no, batch) in train_order.chunks(cfg.batch_utts.max(1)).enumerate() {
            let per_utt: Vec<Result<(Vec<f64>, LossStats)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut worker = network.clone();
                    zero_grads(&mut worker);
                    let stats = worker.accumulate(&corpus[i], cfg.multitask_lambda)?;
                    Ok((flatten_grads(&worker), stats))
                })
                .collect();
            let mut grad = vec![0.0f64; n_coords];
            let mut batch_stats = LossStats::default();
            for r in per_utt {
                let (g, stats) = match r {
                    Ok(v) => v,
                    Err(e) if is_non_finite(&e) => {
                        return Err(TrainError::Diverged {
                            epoch,
                            batch: batch_no,
                            loss: f64::NAN,
                        })
                    }
                    Err(e) => return Err(e),
                };
                for (acc, v) in grad.iter_mut().zip(&g) {
                    *acc += v;
                }
                batch_stats.merge(stats);
            }
            if !batch_stats.loss_sum.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_no,
                    loss: batch_stats.mean_loss(),
                });
            }
            let scale = 1.0 / batch_stats.frames.max(1) as f64;
            for g in grad.iter_mut() {
                *g *= scale;
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.max_grad_norm {
                let s = cfg.max_grad_norm / norm;
                for g in grad.iter_mut() {
                    *g *= s;
                }
            }
            apply_update(network, &layout, &mut velocity, &grad, lr, cfg.momentum);
            epoch_stats.merge(batch_stats);
        }

        log.entries.push(EpochLog {
            epoch,
            split: "train".into(),
            loss: epoch_stats.mean_loss(),
            frame_accuracy: epoch_stats.accuracy(),
        });
        let watched = if holdout.is_empty() {
            epoch_stats.mean_loss()
        } else {
            let mut h = LossStats::default();
            let parts: Vec<Result<LossStats>> = holdout
                .par_iter()
                .map(|utt| network.evaluate(utt, cfg.multitask_lambda))
                .collect();
            for p in parts {
                h.merge(p?);
            }
            log.entries.push(EpochLog {
                epoch,
                split: "holdout".into(),
                loss: h.mean_loss(),
                frame_accuracy: h.accuracy(),
            });
            h.mean_loss()
        };
        if !watched.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                batch: 0,
                loss: watched,
            });
        }
        // constant rate; halving is a recovery valve for clear overshoot,
        // not a fine-tuning schedule
        if watched < best_loss {
            best_loss = watched;
        } else if watched > best_loss * 1.2 {
            lr = (lr * 0.5).max(1e-6);
            log::debug!("epoch {epoch}: loss blew past its best, lr halved to {lr}");
        }
    }
    Ok(log)
}

fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Model(crate::model::ModelError::Lstmp(
            crate::lstmp::LstmpError::NonFinite(_)
        )) | TrainError::Model(crate::model::ModelError::Nn(crate::nn::NnError::NonFinite(_)))
            | TrainError::Nn(crate::nn::NnError::NonFinite(_))
    )
}

fn param_layout<M: ParamSet>(network: &M) -> Vec<(String, usize)> {
    let mut layout = Vec::new();
    network.visit(&mut |p: ParamRef| {
        layout.push((p.name().to_string(), p.len()));
    });
    layout
}

fn apply_update<M: Trainable>(
    network: &mut M,
    layout: &[(String, usize)],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
) {
    let trainable: Vec<bool> = layout
        .iter()
        .map(|(name, _)| network.is_trainable(name))
        .collect();
    let mut offset = 0;
    let mut param_no = 0;
    network.visit_mut(&mut |p: ParamRefMut| {
        let (len, on) = (layout[param_no].1, trainable[param_no]);
        if on {
            let mut apply = |vals: &mut dyn Iterator<Item = &mut f64>| {
                for (j, v) in vals.enumerate() {
                    let idx = offset + j;
                    velocity[idx] = momentum * velocity[idx] + grad[idx];
                    *v -= lr * velocity[idx];
                }
            };
            match p {
                ParamRefMut::Mat(m) => apply(&mut m.value.iter_mut()),
                ParamRefMut::Vec(v) => apply(&mut v.value.iter_mut()),
            }
        }
        offset += len;
        param_no += 1;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureKind;
    use crate::model::{build_model, InputMode, ModelSpec, PhoneticTraining};
    use crate::nn::flatten_values;
    use rand::Rng;

    fn toy_spec(k: usize, phones: Option<usize>) -> ModelSpec {
        ModelSpec {
            input_mode: InputMode::Acoustic,
            lid_layers: 1,
            cells: 5,
            proj: 3,
            feat_dim: 4,
            splice_left: 1,
            splice_right: 1,
            reset_every: 20,
            lid_classes: k,
            languages: Vec::new(),
            phone_classes: phones,
            phonetic_tap: None,
            phonetic_dnn_training: PhoneticTraining::Frozen,
        }
    }

    /// Two languages whose features live on opposite sides of a hyperplane,
    /// with noise: linearly separable by construction.
    fn separable_corpus(n_per_lang: usize, t_frames: usize, seed: u64) -> Vec<TrainUtt> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corpus = Vec::new();
        for lang in 0..2usize {
            let shift = if lang == 0 { 0.8 } else { -0.8 };
            for u in 0..n_per_lang {
                let data = Array2::from_shape_fn((t_frames, 4), |(_, d)| {
                    let base: f64 = rng.gen_range(-0.5..0.5);
                    if d == 0 {
                        base + shift
                    } else {
                        base
                    }
                });
                corpus.push(TrainUtt {
                    utt_id: format!("l{lang}u{u}"),
                    lang,
                    feats: FeatureMatrix {
                        data,
                        kind: FeatureKind::Fbank,
                        frame_shift: 0.01,
                    },
                    phones: None,
                    phi: None,
                });
            }
        }
        corpus
    }

    /// Logistic-regression oracle on raw frames: verifies the corpus really
    /// is separable before the recurrent model is blamed for failing on it.
    fn logistic_oracle_accuracy(corpus: &[TrainUtt]) -> f64 {
        let mut w = vec![0.0f64; 5]; // 4 dims + bias
        for _ in 0..200 {
            for utt in corpus {
                for row in utt.feats.data.rows() {
                    let z: f64 =
                        w[4] + row.iter().enumerate().map(|(d, &x)| w[d] * x).sum::<f64>();
                    let p = 1.0 / (1.0 + (-z).exp());
                    let target = utt.lang as f64;
                    let g = p - target;
                    for (d, &x) in row.iter().enumerate() {
                        w[d] -= 0.1 * g * x;
                    }
                    w[4] -= 0.1 * g;
                }
            }
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for utt in corpus {
            for row in utt.feats.data.rows() {
                let z: f64 = w[4] + row.iter().enumerate().map(|(d, &x)| w[d] * x).sum::<f64>();
                let decided = usize::from(z > 0.0);
                if decided == utt.lang {
                    correct += 1;
                }
                total += 1;
            }
        }
        correct as f64 / total as f64
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut model = build_model(toy_spec(2, None), None, 1).unwrap();
        let before = flatten_values(&model);
        let corpus = separable_corpus(4, 15, 2);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            eval_holdout_fraction: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        train(&mut model, &corpus, &cfg).unwrap();
        assert_eq!(flatten_values(&model), before);
    }

    #[test]
    fn single_step_matches_manual_update() {
        let corpus = separable_corpus(1, 10, 4);
        let corpus = vec![corpus[0].clone()];
        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            epochs: 1,
            batch_utts: 1,
            seed: 5,
            multitask_lambda: 0.0,
            max_grad_norm: 1e9,
            eval_holdout_fraction: 0.0,
        };

        let model0 = build_model(toy_spec(2, None), None, 6).unwrap();

        // manual: p <- p - lr * (momentum * v + g), v starting at zero
        let mut probe = model0.clone();
        zero_grads(&mut probe);
        let stats = probe.accumulate(&corpus[0], 0.0).unwrap();
        let g: Vec<f64> = flatten_grads(&probe)
            .iter()
            .map(|v| v / stats.frames as f64)
            .collect();
        let expected: Vec<f64> = flatten_values(&model0)
            .iter()
            .zip(&g)
            .map(|(p, g)| p - 0.1 * g)
            .collect();

        let mut trained = model0;
        train(&mut trained, &corpus, &cfg).unwrap();
        let got = flatten_values(&trained);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn separable_corpus_reaches_95_percent() {
        let corpus = separable_corpus(12, 30, 7);
        // the oracle must confirm separability first
        assert!(
            logistic_oracle_accuracy(&corpus) > 0.95,
            "oracle says the toy corpus is not separable"
        );
        let mut model = build_model(toy_spec(2, None), None, 8).unwrap();
        let cfg = TrainConfig {
            lr: 0.5,
            momentum: 0.5,
            epochs: 20,
            batch_utts: 4,
            seed: 9,
            multitask_lambda: 0.0,
            max_grad_norm: 5.0,
            eval_holdout_fraction: 0.25,
        };
        let log = train(&mut model, &corpus, &cfg).unwrap();
        let last_holdout = log
            .entries
            .iter()
            .rev()
            .find(|e| e.split == "holdout")
            .unwrap();
        assert!(
            last_holdout.frame_accuracy > 0.95,
            "holdout accuracy {}",
            last_holdout.frame_accuracy
        );
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = separable_corpus(6, 12, 10);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut a = build_model(toy_spec(2, None), None, 12).unwrap();
        let mut b = build_model(toy_spec(2, None), None, 12).unwrap();
        train(&mut a, &corpus, &cfg).unwrap();
        train(&mut b, &corpus, &cfg).unwrap();
        assert_eq!(flatten_values(&a), flatten_values(&b));
    }

    #[test]
    fn loss_decreases_over_epochs() {
        let corpus = separable_corpus(10, 20, 13);
        let mut model = build_model(toy_spec(2, None), None, 14).unwrap();
        let cfg = TrainConfig {
            lr: 0.5,
            momentum: 0.5,
            epochs: 15,
            seed: 15,
            eval_holdout_fraction: 0.0,
            ..TrainConfig::default()
        };
        let log = train(&mut model, &corpus, &cfg).unwrap();
        let losses = log.losses("train");
        assert!(
            losses[14] < losses[0],
            "no progress: {} -> {}",
            losses[0],
            losses[14]
        );
    }

    #[test]
    fn lambda_zero_equals_single_task() {
        // multi-task corpus with phone labels
        let mut corpus = separable_corpus(6, 12, 16);
        for utt in &mut corpus {
            utt.phones = Some((0..12).map(|t| t % 3).collect());
        }
        let cfg = TrainConfig {
            epochs: 3,
            seed: 17,
            multitask_lambda: 0.0,
            ..TrainConfig::default()
        };
        let seed = 18;
        let mut single = build_model(toy_spec(2, None), None, seed).unwrap();
        let mut multi = build_model(toy_spec(2, Some(3)), None, seed).unwrap();
        train(&mut single, &corpus, &cfg).unwrap();
        train(&mut multi, &corpus, &cfg).unwrap();

        // identical posteriors on held data
        let probe = &separable_corpus(1, 25, 19)[0];
        let pg_s = single.forward_utterance("p", &probe.feats).unwrap();
        let pg_m = multi.forward_utterance("p", &probe.feats).unwrap();
        assert_eq!(pg_s.post, pg_m.post);
    }

    #[test]
    fn empty_corpus_and_bad_labels_are_rejected() {
        let mut model = build_model(toy_spec(2, None), None, 20).unwrap();
        assert!(matches!(
            train(&mut model, &[], &TrainConfig::default()),
            Err(TrainError::EmptyCorpus)
        ));

        let mut corpus = separable_corpus(2, 8, 21);
        corpus[0].lang = 7;
        let cfg = TrainConfig {
            epochs: 1,
            eval_holdout_fraction: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut model, &corpus, &cfg),
            Err(TrainError::LabelMismatch { .. })
        ));

        // multi-task model without phone labels
        let mut multi = build_model(toy_spec(2, Some(3)), None, 22).unwrap();
        let corpus = separable_corpus(2, 8, 23);
        assert!(matches!(
            train(&mut multi, &corpus, &cfg),
            Err(TrainError::LabelMismatch { .. })
        ));
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let corpus = separable_corpus(4, 10, 24);
        let mut model = build_model(toy_spec(2, None), None, 25).unwrap();
        let cfg = TrainConfig {
            lr: 1e200,
            max_grad_norm: f64::INFINITY,
            epochs: 50,
            eval_holdout_fraction: 0.0,
            seed: 26,
            ..TrainConfig::default()
        };
        match train(&mut model, &corpus, &cfg) {
            Err(TrainError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
