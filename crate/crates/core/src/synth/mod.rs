//! Synthetic languages for desk-scale evaluation.
//!
//! A language is a Markov chain over a shared phone inventory. Each phone is
//! rendered as damped-sinusoid formant resonators driven by a pulse train
//! (voiced) or noise (unvoiced), with per-utterance speaker jitter on pitch,
//! vocal-tract scale and gain. Ground-truth phone alignments come out with
//! every utterance.
//!
//! The default experiment gives every language the same phone inventory and
//! transition matrices that share the uniform stationary distribution, so the
//! long-run phone histograms of all languages coincide and only the temporal
//! patterns carry language information.

pub mod experiment;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{FrontendConfig, Waveform};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("language {0}: empty phone subset")]
    EmptySubset(String),
    #[error("language {id}: transition row {row} sums to {sum}, want 1")]
    BadTransitionRow { id: String, row: usize, sum: f64 },
    #[error("language {id}: formant {freq} Hz at or above Nyquist {nyquist} Hz")]
    FormantAboveNyquist { id: String, freq: f64, nyquist: f64 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Formant {
    pub freq_hz: f64,
    pub bandwidth_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phone {
    pub formants: Vec<Formant>,
    pub voiced: bool,
}

/// Global phone inventory shared by every language.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhoneInventory {
    pub phones: Vec<Phone>,
}

impl PhoneInventory {
    /// A spread of distinct three-formant phones; formant triples never
    /// collide for up to 126 phones.
    pub fn standard(num_phones: usize) -> Self {
        let phones = (0..num_phones)
            .map(|i| Phone {
                formants: vec![
                    Formant {
                        freq_hz: 280.0 + 55.0 * (i % 7) as f64,
                        bandwidth_hz: 70.0,
                        amplitude: 1.0,
                    },
                    Formant {
                        freq_hz: 900.0 + 130.0 * ((i * 3) % 9) as f64,
                        bandwidth_hz: 110.0,
                        amplitude: 0.6,
                    },
                    Formant {
                        freq_hz: 2300.0 + 160.0 * ((i * 5) % 6) as f64,
                        bandwidth_hz: 170.0,
                        amplitude: 0.25,
                    },
                ],
                voiced: i % 3 != 2,
            })
            .collect();
        PhoneInventory { phones }
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }
}

/// Markov chain over a subset of the global inventory, with per-phone
/// duration ranges in frames.
#[derive(Debug, Clone)]
pub struct SyntheticLanguageSpec {
    pub language_id: String,
    /// Indices into the global inventory.
    pub phone_subset: Vec<usize>,
    /// Row-stochastic over the subset.
    pub transition: Array2<f64>,
    /// Per-subset-phone (min, max) duration in frames, inclusive.
    pub duration_frames: Vec<(usize, usize)>,
}

impl SyntheticLanguageSpec {
    pub fn validate(&self, inventory: &PhoneInventory, sample_rate: u32) -> Result<()> {
        if self.phone_subset.is_empty() {
            return Err(SynthError::EmptySubset(self.language_id.clone()));
        }
        for (row, r) in self.transition.rows().into_iter().enumerate() {
            let sum: f64 = r.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(SynthError::BadTransitionRow {
                    id: self.language_id.clone(),
                    row,
                    sum,
                });
            }
        }
        let nyquist = sample_rate as f64 / 2.0;
        for &p in &self.phone_subset {
            for f in &inventory.phones[p].formants {
                // leave room for the vocal-tract jitter
                if f.freq_hz * 1.1 >= nyquist {
                    return Err(SynthError::FormantAboveNyquist {
                        id: self.language_id.clone(),
                        freq: f.freq_hz,
                        nyquist,
                    });
                }
            }
        }
        Ok(())
    }

    /// Doubly stochastic transitions: a mix of two seeded permutations plus
    /// uniform smoothing. Every such matrix keeps the uniform distribution
    /// stationary, so languages built this way differ only temporally.
    pub fn with_permutation_mix(
        language_id: impl Into<String>,
        phone_subset: Vec<usize>,
        seed: u64,
    ) -> Self {
        let p = phone_subset.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm1: Vec<usize> = (0..p).collect();
        let mut perm2: Vec<usize> = (0..p).collect();
        use rand::seq::SliceRandom;
        perm1.shuffle(&mut rng);
        perm2.shuffle(&mut rng);
        let mut t = Array2::from_elem((p, p), 0.2 / p as f64);
        for i in 0..p {
            t[[i, perm1[i]]] += 0.45;
            t[[i, perm2[i]]] += 0.35;
        }
        let duration_frames = (0..p).map(|i| (8 + i % 5, 18 + i % 7)).collect();
        SyntheticLanguageSpec {
            language_id: language_id.into(),
            phone_subset,
            transition: t,
            duration_frames,
        }
    }
}

/// One aligned phone span, in frame indices of the matching front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignSpan {
    pub start_frame: usize,
    pub end_frame: usize,
    /// Global inventory index.
    pub phone: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthUtt {
    pub utt_id: String,
    pub language_id: String,
    pub wave: Waveform,
    pub alignment: Vec<AlignSpan>,
}

impl SynthUtt {
    /// Expand the alignment into one phone label per frame.
    pub fn frame_phones(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for span in &self.alignment {
            for _ in span.start_frame..span.end_frame {
                out.push(span.phone);
            }
        }
        out
    }
}

/// Derive a per-utterance seed from the master seed and the utterance id, so
/// generation parallelizes without ordering effects.
pub fn utt_seed(master: u64, utt_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in utt_id.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    master ^ h
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    use std::f64::consts::PI;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Render one utterance of roughly `seconds` length.
pub fn generate_utterance(
    inventory: &PhoneInventory,
    spec: &SyntheticLanguageSpec,
    utt_id: &str,
    seconds: f64,
    frontend: &FrontendConfig,
    sample_rate: u32,
    seed: u64,
) -> Result<SynthUtt> {
    spec.validate(inventory, sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = frontend.frame_shift_samples(sample_rate);
    let flen = frontend.frame_length_samples(sample_rate);
    let total_samples_target = (seconds * sample_rate as f64).round() as usize;
    let total_frames = ((total_samples_target.max(flen) - flen) / shift + 1).max(1);

    // phone sequence from the chain, truncated to the frame budget
    let p = spec.phone_subset.len();
    let mut spans = Vec::new();
    let mut frame = 0usize;
    let mut cur = rng.gen_range(0..p);
    while frame < total_frames {
        let (lo, hi) = spec.duration_frames[cur];
        let dur = rng.gen_range(lo..=hi).min(total_frames - frame);
        spans.push(AlignSpan {
            start_frame: frame,
            end_frame: frame + dur,
            phone: spec.phone_subset[cur],
        });
        frame += dur;
        // next state
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        let mut next = p - 1;
        for j in 0..p {
            acc += spec.transition[[cur, j]];
            if draw < acc {
                next = j;
                break;
            }
        }
        cur = next;
    }

    // per-utterance speaker traits
    let f0 = rng.gen_range(95.0..165.0);
    let vt_scale = rng.gen_range(0.92..1.08);
    let gain = rng.gen_range(0.7..1.3);

    let total_samples = (total_frames - 1) * shift + flen;
    let mut samples = vec![0.0f64; total_samples];
    for (k, span) in spans.iter().enumerate() {
        let s0 = span.start_frame * shift;
        let s1 = if k + 1 == spans.len() {
            total_samples
        } else {
            span.end_frame * shift
        };
        render_phone(
            &mut samples[s0..s1],
            &inventory.phones[span.phone],
            sample_rate,
            f0,
            vt_scale,
            &mut rng,
        );
    }

    // normalize to a fixed RMS, apply the utterance gain, keep headroom
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt();
    if rms > 0.0 {
        let scale = 0.08 / rms * gain;
        for s in samples.iter_mut() {
            *s = (*s * scale).clamp(-1.0, 1.0);
        }
    }
    Ok(SynthUtt {
        utt_id: utt_id.to_string(),
        language_id: spec.language_id.clone(),
        wave: Waveform::new(samples, sample_rate),
        alignment: spans,
    })
}

/// Two-pole resonators summed per formant, excited by a jittered pulse train
/// (voiced) or white noise (unvoiced). Each span is RMS-normalized and gets a
/// short raised-cosine fade at both ends.
fn render_phone(
    buf: &mut [f64],
    phone: &Phone,
    sample_rate: u32,
    f0: f64,
    vt_scale: f64,
    rng: &mut ChaCha8Rng,
) {
    let n = buf.len();
    if n == 0 {
        return;
    }
    let sr = sample_rate as f64;
    let mut excitation = vec![0.0f64; n];
    if phone.voiced {
        let mut pos = rng.gen_range(0.0..sr / f0);
        while (pos as usize) < n {
            excitation[pos as usize] = 1.0;
            let jitter = 1.0 + 0.02 * gauss(rng);
            pos += sr / f0 * jitter.clamp(0.9, 1.1);
        }
    } else {
        for e in excitation.iter_mut() {
            *e = gauss(rng);
        }
    }

    let mut segment = vec![0.0f64; n];
    for f in &phone.formants {
        let freq = (f.freq_hz * vt_scale).min(0.45 * sr);
        let r = (-std::f64::consts::PI * f.bandwidth_hz / sr).exp();
        let w = 2.0 * std::f64::consts::PI * freq / sr;
        let a1 = 2.0 * r * w.cos();
        let a2 = -r * r;
        let mut y1 = 0.0;
        let mut y2 = 0.0;
        for i in 0..n {
            let y = excitation[i] + a1 * y1 + a2 * y2;
            segment[i] += f.amplitude * y;
            y2 = y1;
            y1 = y;
        }
    }

    let rms = (segment.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 0.0 };
    let ramp = (0.003 * sr) as usize;
    let ramp = ramp.min(n / 4).max(1);
    for (i, s) in segment.iter().enumerate() {
        let mut env = 1.0;
        if i < ramp {
            env = 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / ramp as f64).cos();
        } else if i + ramp >= n {
            let j = n - 1 - i;
            env = 0.5 - 0.5 * (std::f64::consts::PI * j as f64 / ramp as f64).cos();
        }
        buf[i] += s * scale * env;
    }
}

/// Generate a batch of utterances for one language with derived seeds.
pub fn generate_language(
    inventory: &PhoneInventory,
    spec: &SyntheticLanguageSpec,
    n_utts: usize,
    utt_seconds: (f64, f64),
    frontend: &FrontendConfig,
    sample_rate: u32,
    master_seed: u64,
) -> Result<Vec<SynthUtt>> {
    (0..n_utts)
        .map(|i| {
            let utt_id = format!("{}_{i:04}", spec.language_id);
            let seed = utt_seed(master_seed, &utt_id);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let seconds = rng.gen_range(utt_seconds.0..=utt_seconds.1);
            generate_utterance(
                inventory, spec, &utt_id, seconds, frontend, sample_rate, seed,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub language_id: String,
    /// Relative to the manifest's directory.
    pub wav_path: PathBuf,
    pub split: Split,
    pub condition: String,
}

/// On-disk corpus listing plus alignments for the clean utterances.
#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub alignments: BTreeMap<String, Vec<AlignSpan>>,
}

impl CorpusManifest {
    pub fn write(&self, manifest_path: &Path, alignments_path: &Path) -> Result<()> {
        let mut out = String::from("utt_id\tlanguage_id\twav_path\tsplit\tcondition\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.utt_id,
                e.language_id,
                e.wav_path.display(),
                e.split.as_str(),
                e.condition
            ));
        }
        std::fs::write(manifest_path, out)?;

        let mut out = String::from("utt_id\tframe_start\tframe_end\tphone_id\n");
        for (utt, spans) in &self.alignments {
            for s in spans {
                out.push_str(&format!(
                    "{utt}\t{}\t{}\t{}\n",
                    s.start_frame, s.end_frame, s.phone
                ));
            }
        }
        std::fs::write(alignments_path, out)?;
        Ok(())
    }

    pub fn read(manifest_path: &Path, alignments_path: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)?;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(SynthError::Manifest(format!(
                    "line {}: {} columns, want 5",
                    no + 1,
                    cols.len()
                )));
            }
            let split = match cols[3] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(SynthError::Manifest(format!(
                        "line {}: unknown split {other:?}",
                        no + 1
                    )))
                }
            };
            entries.push(ManifestEntry {
                utt_id: cols[0].to_string(),
                language_id: cols[1].to_string(),
                wav_path: PathBuf::from(cols[2]),
                split,
                condition: cols[4].to_string(),
            });
        }
        let mut alignments = BTreeMap::new();
        if let Some(path) = alignments_path {
            let text = std::fs::read_to_string(path)?;
            for (no, line) in text.lines().enumerate().skip(1) {
                if line.is_empty() {
                    continue;
                }
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 4 {
                    return Err(SynthError::Manifest(format!(
                        "alignments line {}: {} columns, want 4",
                        no + 1,
                        cols.len()
                    )));
                }
                let parse = |s: &str| -> Result<usize> {
                    s.parse()
                        .map_err(|_| SynthError::Manifest(format!("bad number {s:?}")))
                };
                alignments
                    .entry(cols[0].to_string())
                    .or_insert_with(Vec::new)
                    .push(AlignSpan {
                        start_frame: parse(cols[1])?,
                        end_frame: parse(cols[2])?,
                        phone: parse(cols[3])?,
                    });
            }
        }
        Ok(CorpusManifest {
            entries,
            alignments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::fbank;

    fn default_frontend() -> FrontendConfig {
        FrontendConfig::default()
    }

    #[test]
    fn single_phone_language_has_constant_alignment() {
        let inv = PhoneInventory::standard(4);
        let spec = SyntheticLanguageSpec {
            language_id: "mono".into(),
            phone_subset: vec![2],
            transition: Array2::from_elem((1, 1), 1.0),
            duration_frames: vec![(5, 9)],
        };
        let utt = generate_utterance(&inv, &spec, "m0", 1.0, &default_frontend(), 8000, 7)
            .unwrap();
        assert!(utt.alignment.iter().all(|s| s.phone == 2));
        let phones = utt.frame_phones();
        assert!(phones.iter().all(|&p| p == 2));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let inv = PhoneInventory::standard(6);
        let spec = SyntheticLanguageSpec::with_permutation_mix("l", (0..6).collect(), 3);
        let a = generate_language(&inv, &spec, 3, (1.0, 2.0), &default_frontend(), 8000, 42)
            .unwrap();
        let b = generate_language(&inv, &spec, 3, (1.0, 2.0), &default_frontend(), 8000, 42)
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.wave.samples, y.wave.samples);
            assert_eq!(x.alignment, y.alignment);
        }
    }

    #[test]
    fn empty_subset_is_rejected() {
        let inv = PhoneInventory::standard(4);
        let spec = SyntheticLanguageSpec {
            language_id: "bad".into(),
            phone_subset: vec![],
            transition: Array2::zeros((0, 0)),
            duration_frames: vec![],
        };
        assert!(matches!(
            generate_utterance(&inv, &spec, "x", 1.0, &default_frontend(), 8000, 0),
            Err(SynthError::EmptySubset(_))
        ));
    }

    #[test]
    fn bigram_frequencies_match_transition_matrix() {
        let p = 6;
        let inv = PhoneInventory::standard(p);
        let mut spec = SyntheticLanguageSpec::with_permutation_mix("big", (0..p).collect(), 11);
        // short phones pack more transitions per utterance
        spec.duration_frames = vec![(4, 7); p];
        let utts =
            generate_language(&inv, &spec, 500, (3.5, 4.5), &default_frontend(), 8000, 99)
                .unwrap();

        let mut counts = Array2::<f64>::zeros((p, p));
        for utt in &utts {
            for w in utt.alignment.windows(2) {
                counts[[w[0].phone, w[1].phone]] += 1.0;
            }
        }
        for i in 0..p {
            let row_total: f64 = counts.row(i).sum();
            assert!(row_total > 500.0, "row {i} has only {row_total} samples");
            let mut l1 = 0.0;
            for j in 0..p {
                l1 += (counts[[i, j]] / row_total - spec.transition[[i, j]]).abs();
            }
            assert!(l1 < 0.05, "row {i} empirical L1 distance {l1}");
        }
    }

    /// Power-iteration oracle for the stationary distribution.
    fn stationary(t: &Array2<f64>) -> Vec<f64> {
        let p = t.nrows();
        let mut pi: Vec<f64> = (0..p).map(|i| 1.0 + (i as f64 * 0.37).sin().abs()).collect();
        let z: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|v| *v /= z);
        for _ in 0..2000 {
            let mut next = vec![0.0; p];
            for i in 0..p {
                for j in 0..p {
                    next[j] += pi[i] * t[[i, j]];
                }
            }
            pi = next;
        }
        pi
    }

    #[test]
    fn languages_share_the_stationary_distribution() {
        let p = 8;
        let specs: Vec<SyntheticLanguageSpec> = (0..4)
            .map(|i| {
                SyntheticLanguageSpec::with_permutation_mix(
                    format!("lang{i}"),
                    (0..p).collect(),
                    100 + i as u64,
                )
            })
            .collect();
        for spec in &specs {
            let pi = stationary(&spec.transition);
            for v in &pi {
                assert!((v - 1.0 / p as f64).abs() < 1e-9, "stationary {pi:?}");
            }
        }
        // transitions themselves differ between languages
        for i in 0..specs.len() {
            for j in (i + 1)..specs.len() {
                let diff: f64 = (&specs[i].transition - &specs[j].transition)
                    .iter()
                    .map(|v| v.abs())
                    .sum();
                assert!(diff > 0.1, "languages {i} and {j} share transitions");
            }
        }
    }

    #[test]
    fn alignment_frames_equal_fbank_frames() {
        let inv = PhoneInventory::standard(5);
        let spec = SyntheticLanguageSpec::with_permutation_mix("al", (0..5).collect(), 21);
        let cfg = default_frontend();
        for seconds in [0.5, 1.7, 3.0] {
            let utt =
                generate_utterance(&inv, &spec, "a0", seconds, &cfg, 16_000, 5).unwrap();
            let feats = fbank(&utt.wave, &cfg).unwrap();
            let aligned: usize = utt.alignment.last().unwrap().end_frame;
            assert_eq!(feats.num_frames(), aligned, "at {seconds} s");
            assert_eq!(utt.frame_phones().len(), aligned);
        }
    }

    #[test]
    fn alignments_tile_without_gaps() {
        let inv = PhoneInventory::standard(6);
        let spec = SyntheticLanguageSpec::with_permutation_mix("tile", (0..6).collect(), 31);
        let utt =
            generate_utterance(&inv, &spec, "t0", 2.0, &default_frontend(), 8000, 9).unwrap();
        let mut expected_start = 0;
        for span in &utt.alignment {
            assert_eq!(span.start_frame, expected_start);
            assert!(span.end_frame > span.start_frame);
            expected_start = span.end_frame;
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = CorpusManifest {
            entries: vec![
                ManifestEntry {
                    utt_id: "a0".into(),
                    language_id: "target0".into(),
                    wav_path: "wav/a0.wav".into(),
                    split: Split::Train,
                    condition: "clean".into(),
                },
                ManifestEntry {
                    utt_id: "a1".into(),
                    language_id: "target1".into(),
                    wav_path: "wav/a1.wav".into(),
                    split: Split::Test,
                    condition: "snr10".into(),
                },
            ],
            alignments: BTreeMap::from([(
                "a0".to_string(),
                vec![AlignSpan {
                    start_frame: 0,
                    end_frame: 12,
                    phone: 3,
                }],
            )]),
        };
        let mpath = dir.path().join("manifest.tsv");
        let apath = dir.path().join("alignments.tsv");
        manifest.write(&mpath, &apath).unwrap();
        let back = CorpusManifest::read(&mpath, Some(&apath)).unwrap();
        assert_eq!(back.entries, manifest.entries);
        assert_eq!(back.alignments, manifest.alignments);
    }
}
