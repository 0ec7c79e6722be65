//! Frame-to-utterance score aggregation and detection metrics.
//!
//! Scores are pooled into target/non-target trials (one trial per utterance
//! per language) for the equal error rate; the average detection cost uses
//! hard max-posterior decisions. Both are pure functions of the score sets,
//! independent of utterance ordering.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Posteriorgram;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty {0} score set")]
    EmptyScores(&'static str),
    #[error("empty posteriorgram for {0}")]
    EmptyPosteriorgram(String),
    #[error("language {0} has no utterances")]
    EmptyLanguage(usize),
    #[error("need at least 2 languages, got {0}")]
    TooFewLanguages(usize),
    #[error("clean metric {0} is zero; degradation rate undefined")]
    ZeroCleanMetric(&'static str),
    #[error("score matrix: {0}")]
    BadScores(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Per-utterance posterior scores with ground truth.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub utt_ids: Vec<String>,
    pub true_lang: Vec<usize>,
    /// U x K posteriors (any monotone rescaling works for the metrics).
    pub scores: Array2<f64>,
}

impl ScoreMatrix {
    pub fn num_langs(&self) -> usize {
        self.scores.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.utt_ids.len() != self.scores.nrows() || self.true_lang.len() != self.scores.nrows()
        {
            return Err(MetricsError::BadScores(format!(
                "{} ids, {} labels, {} rows",
                self.utt_ids.len(),
                self.true_lang.len(),
                self.scores.nrows()
            )));
        }
        if let Some(&l) = self.true_lang.iter().find(|&&l| l >= self.num_langs()) {
            return Err(MetricsError::BadScores(format!(
                "label {l} out of range for {} languages",
                self.num_langs()
            )));
        }
        if self.scores.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::BadScores("non-finite score".into()));
        }
        Ok(())
    }

    /// Pool every (utterance, language) pair into detection trials.
    pub fn pooled_trials(&self) -> (Vec<f64>, Vec<f64>) {
        let mut targets = Vec::new();
        let mut nontargets = Vec::new();
        for (u, &truth) in self.true_lang.iter().enumerate() {
            for k in 0..self.num_langs() {
                if k == truth {
                    targets.push(self.scores[[u, k]]);
                } else {
                    nontargets.push(self.scores[[u, k]]);
                }
            }
        }
        (targets, nontargets)
    }
}

/// One operating point of the detection staircase.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DetPoint {
    pub p_miss: f64,
    pub p_fa: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cavg_frame: Option<f64>,
    pub cavg_utt: f64,
    pub eer_frame_pct: Option<f64>,
    pub eer_utt_pct: f64,
    pub num_utts: usize,
    pub num_langs: usize,
    pub det_points_utt: Vec<DetPoint>,
}

/// Mean of the frame posteriors; the utterance-level posterior.
pub fn average_posteriors(pg: &Posteriorgram) -> Result<Array1<f64>> {
    if pg.post.nrows() == 0 {
        return Err(MetricsError::EmptyPosteriorgram(pg.utt_id.clone()));
    }
    Ok(pg.post.mean_axis(ndarray::Axis(0)).unwrap())
}

/// Operating points of the miss/false-alarm staircase, swept over every
/// distinct score threshold (plus the all-accept and all-reject ends).
///
/// At threshold t: a trial scores a miss when its target score is < t, and a
/// false alarm when a non-target score is >= t.
pub fn det_curve(targets: &[f64], nontargets: &[f64]) -> Result<Vec<DetPoint>> {
    if targets.is_empty() {
        return Err(MetricsError::EmptyScores("target"));
    }
    if nontargets.is_empty() {
        return Err(MetricsError::EmptyScores("non-target"));
    }
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let n_t = targets.len() as f64;
    let n_n = nontargets.len() as f64;
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    for &t in &thresholds {
        let miss = targets.iter().filter(|&&s| s < t).count() as f64 / n_t;
        let fa = nontargets.iter().filter(|&&s| s >= t).count() as f64 / n_n;
        points.push(DetPoint {
            p_miss: miss,
            p_fa: fa,
        });
    }
    // threshold above every score: everything rejected
    points.push(DetPoint {
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Equal error rate in percent: the crossing of the miss and false-alarm
/// staircases, linearly interpolated between the bracketing operating points.
pub fn eer(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    let points = det_curve(targets, nontargets)?;
    Ok(eer_from_points(&points))
}

fn eer_from_points(points: &[DetPoint]) -> f64 {
    // p_miss - p_fa goes from <= 0 toward >= 0 as the threshold rises
    let mut prev = points[0];
    for &p in points.iter().skip(1) {
        let d_prev = prev.p_miss - prev.p_fa;
        let d_cur = p.p_miss - p.p_fa;
        if d_prev <= 0.0 && d_cur >= 0.0 {
            if d_cur == d_prev {
                return 100.0 * prev.p_miss;
            }
            let t = -d_prev / (d_cur - d_prev);
            return 100.0 * (prev.p_miss + t * (p.p_miss - prev.p_miss));
        }
        prev = p;
    }
    // degenerate: no crossing found (identical constant rates)
    100.0 * prev.p_miss.min(prev.p_fa)
}

/// Average detection cost over languages with hard max-posterior decisions
/// and unit costs. Ties at the argmax break toward the lowest index.
pub fn cavg(scores: &ScoreMatrix, p_target: f64) -> Result<f64> {
    scores.validate().map_err(|e| e)?;
    let k = scores.num_langs();
    if k < 2 {
        return Err(MetricsError::TooFewLanguages(k));
    }
    let mut count = vec![0usize; k];
    for &l in &scores.true_lang {
        count[l] += 1;
    }
    if let Some(l) = count.iter().position(|&c| c == 0) {
        return Err(MetricsError::EmptyLanguage(l));
    }

    let decisions: Vec<usize> = scores
        .scores
        .rows()
        .into_iter()
        .map(|row| argmax_lowest_tie(row.as_slice().unwrap()))
        .collect();

    let mut total = 0.0;
    for lang in 0..k {
        let missed = scores
            .true_lang
            .iter()
            .zip(&decisions)
            .filter(|(&t, &d)| t == lang && d != lang)
            .count();
        let p_miss = missed as f64 / count[lang] as f64;
        let mut fa_sum = 0.0;
        for other in 0..k {
            if other == lang {
                continue;
            }
            let fas = scores
                .true_lang
                .iter()
                .zip(&decisions)
                .filter(|(&t, &d)| t == other && d == lang)
                .count();
            fa_sum += fas as f64 / count[other] as f64;
        }
        total += p_target * p_miss + (1.0 - p_target) / (k as f64 - 1.0) * fa_sum;
    }
    Ok(total / k as f64)
}

fn argmax_lowest_tie(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Expand posteriorgrams into frame-level trials: every frame contributes one
/// trial per language. Also returns the frame-level score matrix (each frame
/// treated as an utterance) for the frame-level cost.
pub fn frame_trials(
    posteriorgrams: &[Posteriorgram],
    labels: &[usize],
) -> Result<(Vec<f64>, Vec<f64>, ScoreMatrix)> {
    if posteriorgrams.is_empty() || posteriorgrams.len() != labels.len() {
        return Err(MetricsError::BadScores(format!(
            "{} posteriorgrams, {} labels",
            posteriorgrams.len(),
            labels.len()
        )));
    }
    let k = posteriorgrams[0].post.ncols();
    let total_frames: usize = posteriorgrams.iter().map(|p| p.post.nrows()).sum();
    let mut scores = Array2::zeros((total_frames, k));
    let mut utt_ids = Vec::with_capacity(total_frames);
    let mut true_lang = Vec::with_capacity(total_frames);
    let mut row = 0;
    for (pg, &label) in posteriorgrams.iter().zip(labels) {
        for t in 0..pg.post.nrows() {
            scores.row_mut(row).assign(&pg.post.row(t));
            utt_ids.push(format!("{}#{t}", pg.utt_id));
            true_lang.push(label);
            row += 1;
        }
    }
    let mat = ScoreMatrix {
        utt_ids,
        true_lang,
        scores,
    };
    let (targets, nontargets) = mat.pooled_trials();
    Ok((targets, nontargets, mat))
}

/// Full report for one condition: utterance-level metrics from the mean
/// posteriors, frame-level metrics from per-frame trials.
pub fn evaluate(posteriorgrams: &[Posteriorgram], labels: &[usize]) -> Result<MetricsReport> {
    if posteriorgrams.is_empty() {
        return Err(MetricsError::EmptyScores("utterance"));
    }
    let k = posteriorgrams[0].post.ncols();
    let mut utt_scores = Array2::zeros((posteriorgrams.len(), k));
    for (u, pg) in posteriorgrams.iter().enumerate() {
        utt_scores.row_mut(u).assign(&average_posteriors(pg)?);
    }
    let utt = ScoreMatrix {
        utt_ids: posteriorgrams.iter().map(|p| p.utt_id.clone()).collect(),
        true_lang: labels.to_vec(),
        scores: utt_scores,
    };
    let (t_utt, n_utt) = utt.pooled_trials();
    let (t_fr, n_fr, frame_mat) = frame_trials(posteriorgrams, labels)?;
    Ok(MetricsReport {
        cavg_frame: Some(cavg(&frame_mat, 0.5)?),
        cavg_utt: cavg(&utt, 0.5)?,
        eer_frame_pct: Some(eer(&t_fr, &n_fr)?),
        eer_utt_pct: eer(&t_utt, &n_utt)?,
        num_utts: posteriorgrams.len(),
        num_langs: k,
        det_points_utt: det_curve(&t_utt, &n_utt)?,
    })
}

/// Relative worsening of a noisy condition versus clean, in percent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationRow {
    pub condition: String,
    pub metric: String,
    pub clean: f64,
    pub noisy: f64,
    pub rate_pct: f64,
}

pub fn degradation_rate(
    condition: &str,
    clean: &MetricsReport,
    noisy: &MetricsReport,
) -> Result<Vec<DegradationRow>> {
    let mut rows = Vec::new();
    let pairs: [(&str, f64, f64); 2] = [
        ("cavg_utt", clean.cavg_utt, noisy.cavg_utt),
        ("eer_utt_pct", clean.eer_utt_pct, noisy.eer_utt_pct),
    ];
    for (metric, c, n) in pairs {
        if c == 0.0 {
            return Err(MetricsError::ZeroCleanMetric(match metric {
                "cavg_utt" => "cavg_utt",
                _ => "eer_utt_pct",
            }));
        }
        rows.push(DegradationRow {
            condition: condition.to_string(),
            metric: metric.to_string(),
            clean: c,
            noisy: n,
            rate_pct: (n - c) / c * 100.0,
        });
    }
    Ok(rows)
}
