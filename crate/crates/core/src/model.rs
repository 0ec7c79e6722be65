//! Composition of the phonetic network and the recurrent classifier into the
//! system variants: the acoustic baseline, the phonetically aware model that
//! injects phonetic features into the cell-candidate nonlinearity, the
//! phonetic-only model whose recurrent input is the phonetic feature stream,
//! and the concatenated feature combination.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{splice, FeatureKind, FeatureMatrix};
use crate::lstmp::{LstmpDims, LstmpParams, SequenceCache, DEFAULT_RESET_EVERY};
use crate::nn::{self, softmax, ParamRefMut, ParamSet};
use crate::tdnn::{Tap, TdnnConfig, TdnnForward, TdnnStack};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("inconsistent spec: {0}")]
    InconsistentSpec(String),
    #[error("feature kind {0:?} does not match the model input")]
    BadFeatureKind(FeatureKind),
    #[error("feature dim {got}, model expects {want}")]
    DimMismatch { got: usize, want: usize },
    #[error(transparent)]
    Lstmp(#[from] crate::lstmp::LstmpError),
    #[error(transparent)]
    Tdnn(#[from] crate::tdnn::TdnnError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Spliced acoustic features only.
    Acoustic,
    /// Acoustic input with the phonetic feature injected into the
    /// cell-candidate nonlinearity.
    PhAwareG,
    /// Phonetic features as the only recurrent input.
    Ptn,
    /// Phonetic and spliced acoustic features concatenated (phonetic first).
    PhPlusFb,
}

impl InputMode {
    pub fn needs_phonetic(self) -> bool {
        !matches!(self, InputMode::Acoustic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhoneticTraining {
    /// Phonetic network untouched by classifier training.
    Frozen,
    /// Random phonetic network trained end to end with the classifier.
    JointRandomInit,
    /// Pretrained phonetic network fine-tuned with the classifier.
    JointPretrainedInit,
}

/// Declarative description of a classifier variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub input_mode: InputMode,
    pub lid_layers: usize,
    pub cells: usize,
    pub proj: usize,
    /// Raw acoustic feature dimension before splicing.
    pub feat_dim: usize,
    pub splice_left: usize,
    pub splice_right: usize,
    pub reset_every: usize,
    pub lid_classes: usize,
    /// Language ids behind the LID output indices, kept with the model so
    /// downstream scoring labels columns consistently. May be empty.
    pub languages: Vec<String>,
    /// Optional phone output group for multi-task training.
    pub phone_classes: Option<usize>,
    pub phonetic_tap: Option<Tap>,
    pub phonetic_dnn_training: PhoneticTraining,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_mode: InputMode::Acoustic,
            lid_layers: 1,
            cells: crate::lstmp::DEFAULT_CELL_DIM,
            proj: crate::lstmp::DEFAULT_PROJ_DIM,
            feat_dim: 23,
            splice_left: 2,
            splice_right: 2,
            reset_every: DEFAULT_RESET_EVERY,
            lid_classes: 2,
            languages: Vec::new(),
            phone_classes: None,
            phonetic_tap: None,
            phonetic_dnn_training: PhoneticTraining::Frozen,
        }
    }
}

impl ModelSpec {
    pub fn spliced_dim(&self) -> usize {
        self.feat_dim * (self.splice_left + self.splice_right + 1)
    }

    pub fn output_dim(&self) -> usize {
        self.lid_classes + self.phone_classes.unwrap_or(0)
    }
}

/// Per-frame language posteriors for one utterance.
#[derive(Debug, Clone)]
pub struct Posteriorgram {
    pub utt_id: String,
    pub post: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<LstmpParams>,
    pub phonetic: Option<TdnnStack>,
}

/// Wire a model from its spec. `phonetic` must be present exactly when the
/// input mode uses phonetic features. The injection matrix of the
/// phonetically aware mode starts at zero so training begins from the
/// acoustic baseline.
pub fn build_model(spec: ModelSpec, phonetic: Option<TdnnStack>, seed: u64) -> Result<Model> {
    if spec.input_mode.needs_phonetic() {
        if phonetic.is_none() || spec.phonetic_tap.is_none() {
            return Err(ModelError::InconsistentSpec(format!(
                "{:?} requires a phonetic network and tap",
                spec.input_mode
            )));
        }
    } else if phonetic.is_some() || spec.phonetic_tap.is_some() {
        return Err(ModelError::InconsistentSpec(
            "acoustic mode forbids a phonetic network".into(),
        ));
    }
    if spec.lid_layers == 0 {
        return Err(ModelError::InconsistentSpec("lid_layers must be >= 1".into()));
    }
    if !spec.languages.is_empty() && spec.languages.len() != spec.lid_classes {
        return Err(ModelError::InconsistentSpec(format!(
            "{} language ids for {} output classes",
            spec.languages.len(),
            spec.lid_classes
        )));
    }
    if matches!(
        spec.phonetic_dnn_training,
        PhoneticTraining::JointRandomInit | PhoneticTraining::JointPretrainedInit
    ) && spec.input_mode.needs_phonetic()
        && spec.phonetic_tap != Some(Tap::LastHidden)
    {
        return Err(ModelError::InconsistentSpec(
            "joint phonetic training backpropagates through the last hidden layer tap only"
                .into(),
        ));
    }

    let phi_dim = match (&phonetic, spec.phonetic_tap) {
        (Some(stack), Some(tap)) => stack.tap_dim(tap)?,
        _ => 0,
    };
    let (x_dim, inject_dim) = match spec.input_mode {
        InputMode::Acoustic => (spec.spliced_dim(), 0),
        InputMode::PhAwareG => (spec.spliced_dim(), phi_dim),
        InputMode::Ptn => (phi_dim, 0),
        InputMode::PhPlusFb => (phi_dim + spec.spliced_dim(), 0),
    };

    let mut layers = Vec::with_capacity(spec.lid_layers);
    for k in 0..spec.lid_layers {
        let dims = LstmpDims {
            input: if k == 0 { x_dim } else { spec.proj },
            cell: spec.cells,
            proj: spec.proj,
            output: if k + 1 == spec.lid_layers {
                spec.output_dim()
            } else {
                spec.proj
            },
            phi: if k == 0 { inject_dim } else { 0 },
        };
        let prefix = format!("lid{k}.");
        let layer = if dims.phi > 0 {
            LstmpParams::new_zero_phi(dims, &prefix, seed)
        } else {
            LstmpParams::new(dims, &prefix, seed)
        };
        layers.push(layer);
    }
    Ok(Model {
        spec,
        layers,
        phonetic,
    })
}

/// Everything a training step needs from the forward pass.
pub struct ModelForward {
    pub tdnn_fwd: Option<TdnnForward>,
    /// Tap output, frame-aligned with the input.
    pub phi: Option<Array2<f64>>,
    pub layer_caches: Vec<SequenceCache>,
    /// Final-layer per-frame outputs (LID logits, then phone logits).
    pub logits: Array2<f64>,
}

impl Model {
    pub fn input_dim(&self) -> usize {
        self.layers[0].dims.input
    }

    fn check_fbank(&self, fbank: &FeatureMatrix) -> Result<()> {
        if fbank.kind != FeatureKind::Fbank {
            return Err(ModelError::BadFeatureKind(fbank.kind));
        }
        if fbank.dim() != self.spec.feat_dim {
            return Err(ModelError::DimMismatch {
                got: fbank.dim(),
                want: self.spec.feat_dim,
            });
        }
        Ok(())
    }

    /// Tap the phonetic network, when the mode uses one.
    pub fn phonetic_features(&self, fbank: &FeatureMatrix) -> Result<Option<FeatureMatrix>> {
        match (&self.phonetic, self.spec.phonetic_tap) {
            (Some(stack), Some(tap)) => {
                Ok(Some(stack.read_phonetic_feature(fbank, tap)?))
            }
            _ => Ok(None),
        }
    }

    /// Assemble the recurrent input and the injected stream for one
    /// utterance. The phonetic-only mode ignores the acoustic features
    /// entirely by construction.
    fn assemble(
        &self,
        fbank: &FeatureMatrix,
        phi: Option<&Array2<f64>>,
    ) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        match self.spec.input_mode {
            InputMode::Acoustic => Ok((
                splice(fbank, self.spec.splice_left, self.spec.splice_right).data,
                None,
            )),
            InputMode::PhAwareG => {
                let phi = phi.expect("phonetic stream required");
                Ok((
                    splice(fbank, self.spec.splice_left, self.spec.splice_right).data,
                    Some(phi.clone()),
                ))
            }
            InputMode::Ptn => Ok((phi.expect("phonetic stream required").clone(), None)),
            InputMode::PhPlusFb => {
                let phi = phi.expect("phonetic stream required");
                let ac = splice(fbank, self.spec.splice_left, self.spec.splice_right).data;
                let mut x = Array2::zeros((ac.nrows(), phi.ncols() + ac.ncols()));
                x.slice_mut(s![.., 0..phi.ncols()]).assign(phi);
                x.slice_mut(s![.., phi.ncols()..]).assign(&ac);
                Ok((x, None))
            }
        }
    }

    /// Forward pass keeping caches for backpropagation. `phi_override`, when
    /// given, replaces the tap output (used by tests and by trainers that
    /// precompute features for a frozen phonetic network).
    pub fn forward_cached(
        &self,
        fbank: &FeatureMatrix,
        phi_override: Option<&Array2<f64>>,
    ) -> Result<ModelForward> {
        self.check_fbank(fbank)?;
        let (tdnn_fwd, phi) = match (&self.phonetic, self.spec.phonetic_tap, phi_override) {
            (_, _, Some(p)) => (None, Some(p.clone())),
            (Some(stack), Some(tap), None) => {
                if tap == Tap::LastHidden {
                    // keep the full forward for the joint backward path
                    let fwd = stack.forward(fbank)?;
                    let phi = fwd.hidden.last().cloned().expect("stack has layers");
                    (Some(fwd), Some(phi))
                } else {
                    (None, Some(stack.read_phonetic_feature(fbank, tap)?.data))
                }
            }
            _ => (None, None),
        };
        let (x, inject) = self.assemble(fbank, phi.as_ref())?;
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let inj = if k == 0 { inject.as_ref() } else { None };
            let (y, cache) = layer.forward(&cur, inj, self.spec.reset_every)?;
            layer_caches.push(cache);
            cur = y;
        }
        Ok(ModelForward {
            tdnn_fwd,
            phi,
            layer_caches,
            logits: cur,
        })
    }

    /// Backward pass from the final-layer gradient. Parameter gradients
    /// accumulate in place; the phonetic network only receives gradient under
    /// joint training.
    pub fn backward(&mut self, fwd: &ModelForward, d_logits: &Array2<f64>) -> Result<()> {
        let mut dy = d_logits.clone();
        let mut d_inject = None;
        for k in (0..self.layers.len()).rev() {
            let (dx, dphi) = self.layers[k].bptt(&fwd.layer_caches[k], &dy);
            if k == 0 {
                if self.layers[0].dims.phi > 0 {
                    d_inject = Some(dphi);
                }
                dy = dx;
            } else {
                dy = dx;
            }
        }
        // dy now holds the gradient on the assembled layer-0 input
        if self.spec.phonetic_dnn_training == PhoneticTraining::Frozen {
            return Ok(());
        }
        let Some(stack) = self.phonetic.as_mut() else {
            return Ok(());
        };
        let Some(tdnn_fwd) = fwd.tdnn_fwd.as_ref() else {
            return Ok(());
        };
        let phi_dim = fwd.phi.as_ref().map_or(0, |p| p.ncols());
        let d_phi: Array2<f64> = match self.spec.input_mode {
            InputMode::PhAwareG => d_inject.expect("injection gradient present"),
            InputMode::Ptn => dy,
            InputMode::PhPlusFb => dy.slice(s![.., 0..phi_dim]).to_owned(),
            InputMode::Acoustic => return Ok(()),
        };
        stack.backward(tdnn_fwd, None, None, Some(&d_phi))?;
        Ok(())
    }

    /// Run one utterance to per-frame language posteriors.
    pub fn forward_utterance(&self, utt_id: &str, fbank: &FeatureMatrix) -> Result<Posteriorgram> {
        let fwd = self.forward_cached(fbank, None)?;
        Ok(self.posteriorgram(utt_id, &fwd.logits))
    }

    /// Softmax over the LID output group only.
    pub fn posteriorgram(&self, utt_id: &str, logits: &Array2<f64>) -> Posteriorgram {
        let k = self.spec.lid_classes;
        let mut post = Array2::zeros((logits.nrows(), k));
        for (t, row) in logits.rows().into_iter().enumerate() {
            post.row_mut(t).assign(&softmax(row.slice(s![0..k])));
        }
        Posteriorgram {
            utt_id: utt_id.to_string(),
            post,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let header = SavedModelHeader {
            kind: "lid_model".into(),
            spec: self.spec.clone(),
            tdnn: self.phonetic.as_ref().map(|s| s.config.clone()),
        };
        let spec_json = serde_json::to_value(&header)
            .map_err(|e| crate::nn::NnError::ModelFile(e.to_string()))?;
        nn::save_params(path, spec_json, self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Model> {
        let (header, tensors) = nn::load_params(path)?;
        let parsed: SavedModelHeader = serde_json::from_value(header.spec)
            .map_err(|e| crate::nn::NnError::ModelFile(e.to_string()))?;
        let phonetic = match parsed.tdnn {
            Some(cfg) => Some(TdnnStack::new(cfg, "tdnn.", 0)?),
            None => None,
        };
        let mut model = build_model(parsed.spec, phonetic, 0)?;
        nn::load_params_into(&mut model, &tensors)?;
        // the factorization derives from the weights, so apply it only now
        if let Some(stack) = &mut model.phonetic {
            if let Some(rank) = stack.config.svd_rank {
                stack.apply_svd_bottleneck(rank)?;
            }
        }
        Ok(model)
    }

    /// Snapshot of the phonetic network's parameters (empty when absent).
    pub fn phonetic_param_values(&self) -> Vec<f64> {
        self.phonetic
            .as_ref()
            .map(nn::flatten_values)
            .unwrap_or_default()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedModelHeader {
    kind: String,
    spec: ModelSpec,
    tdnn: Option<TdnnConfig>,
}

impl ParamSet for Model {
    fn visit(&self, f: &mut dyn FnMut(crate::nn::ParamRef)) {
        for layer in &self.layers {
            layer.visit(f);
        }
        if let Some(stack) = &self.phonetic {
            stack.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamRefMut)) {
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
        if let Some(stack) = &mut self.phonetic {
            stack.visit_mut(f);
        }
    }
}
