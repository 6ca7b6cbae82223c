//! The graph VAE: an attention encoder from a user's example scenes to a
//! Gaussian over preference vectors, and an attention decoder from
//! (object semantics, preference vector) to object positions.

mod forward;
mod model;
mod train;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{PlateauConfig, Tensor, TensorError};
use crate::gnn::{Activation, Binder, DenseParams, DenseVars, GatParams, GatVars};
use crate::scene::SceneError;
use crate::semantics::SemanticsError;

pub use forward::{
    decode_positions, encode_user, infer_mean, kl_divergence, loss_on_tape, prepare_batch, reparameterize, vae_loss,
    vae_loss_with,
    BatchLosses, GraphInput, PreparedBatch, SemanticLayout, UserExample,
};
pub use model::{
    arrange_new_scene, no_prefs_variant, place_missing_object, reconstruct_scene, Model, MODEL_FORMAT,
    MODEL_VERSION,
};
pub use train::{batch_loss, batch_loss_and_grads, train, EpochRecord, TrainOutcome};

/// `ln(1e-8)`: floor on the predicted log-variance.
pub const LOGVAR_FLOOR: f64 = -18.420_680_743_952_367;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("a user needs at least one scene with a placed object")]
    NoScenes,
    #[error("template {0:?} is not in the model's registry")]
    UnknownTemplate(String),
    #[error("object {object} of scene {scene} does not exist")]
    MaskIndex { scene: usize, object: usize },
    #[error("dataset has no users with placed objects")]
    EmptyDataset,
    #[error("non-finite value in {0}")]
    NotFinite(&'static str),
    #[error("model does not match: {0}")]
    Mismatch(String),
    #[error("model bundle: {0}")]
    Bundle(String),
}

/// Network shape. Dense heads have two layers each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub position_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub graph_dim: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    /// Output width of the word-vector extractor.
    pub semantic_dim: usize,
    pub attention_slope: f64,
    pub head_slope: f64,
    pub elu_alpha: f64,
    /// Feed each node's input features to the node-wise head alongside the
    /// attention output.
    pub input_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            position_dim: 2,
            latent_dim: 2,
            encoder_hidden: 24,
            encoder_layers: 1,
            graph_dim: 20,
            decoder_hidden: 32,
            decoder_layers: 1,
            semantic_dim: 8,
            attention_slope: 0.2,
            head_slope: 0.2,
            elu_alpha: 1.0,
            input_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), VaeError> {
        let dims = [
            ("position_dim", self.position_dim),
            ("latent_dim", self.latent_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("encoder_layers", self.encoder_layers),
            ("graph_dim", self.graph_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("decoder_layers", self.decoder_layers),
            ("semantic_dim", self.semantic_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(VaeError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// How squared position errors are reduced to the reconstruction term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    /// Mean over every predicted coordinate in the batch.
    MeanCoordinate,
    /// Squared norm of each user's whole arrangement, averaged over users.
    #[default]
    SumPerUser,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Users per batch.
    pub batch_size: usize,
    pub beta: f64,
    /// Leading epochs trained with the KL weight at zero.
    #[serde(default)]
    pub kl_warmup: usize,
    #[serde(default)]
    pub reconstruction: Reconstruction,
    /// Global gradient-norm ceiling applied before each step.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Augmentation noise in metres per template; absent templates get none.
    pub augment_sigma: BTreeMap<String, f64>,
    pub node_mask_rate: f64,
    pub scene_mask_rate: f64,
    /// Redraws before a batch member falls back to an unmasked view.
    pub mask_retries: usize,
    pub seed: u64,
    pub plateau: PlateauConfig,
}

/// Named hyperparameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Abstract,
    Real,
    MissingObject,
    NewScene,
}

impl std::str::FromStr for Preset {
    type Err = VaeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abstract" => Ok(Preset::Abstract),
            "real" => Ok(Preset::Real),
            "missing_object" | "missing-object" => Ok(Preset::MissingObject),
            "new_scene" | "new-scene" => Ok(Preset::NewScene),
            other => Err(VaeError::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl Preset {
    pub fn configs(self) -> (ModelConfig, TrainConfig) {
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::abstract_scenes();
        match self {
            Preset::Abstract => {}
            Preset::Real => {
                model.graph_dim = 24;
                train = TrainConfig::real_scenes();
            }
            Preset::MissingObject => {
                model.graph_dim = 24;
                train = TrainConfig::real_scenes();
                train.lr = 0.012;
                train.batch_size = 6;
                train.node_mask_rate = 0.1;
            }
            Preset::NewScene => {
                train.lr = 0.012;
                train.batch_size = 6;
                train.scene_mask_rate = 0.2;
            }
        }
        (model, train)
    }
}

impl TrainConfig {
    /// KL weight in effect during `epoch` (zero-based).
    pub fn beta_at(&self, epoch: usize) -> f64 {
        if epoch < self.kl_warmup {
            0.0
        } else {
            self.beta
        }
    }

    pub fn abstract_scenes() -> Self {
        Self {
            epochs: 2000,
            lr: 0.010,
            momentum: 0.9,
            batch_size: 4,
            beta: 0.08,
            kl_warmup: 300,
            reconstruction: Reconstruction::default(),
            clip_norm: Some(1.0),
            augment_sigma: BTreeMap::new(),
            node_mask_rate: 0.0,
            scene_mask_rate: 0.0,
            mask_retries: 8,
            seed: 0,
            plateau: PlateauConfig::default(),
        }
    }

    pub fn real_scenes() -> Self {
        Self {
            lr: 0.008,
            beta: 0.01,
            augment_sigma: [("dining".to_string(), 0.02), ("office".to_string(), 0.05)].into(),
            ..Self::abstract_scenes()
        }
    }

    pub fn validate(&self) -> Result<(), VaeError> {
        let bad = |m: String| Err(VaeError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        for r in [self.node_mask_rate, self.scene_mask_rate] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("mask rate {r} outside [0, 1]"));
            }
        }
        if let Some(c) = self.clip_norm.filter(|c| !(*c > 0.0 && c.is_finite())) {
            return bad(format!("clip_norm must be positive, got {c}"));
        }
        if let Some((t, s)) = self.augment_sigma.iter().find(|(_, s)| !(**s >= 0.0)) {
            return bad(format!("augmentation sigma for {t} must be non-negative, got {s}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub gat: Vec<GatParams>,
    /// Node-wise head to the graph-encoding width.
    pub node_head: DenseParams,
    /// Pooled user encoding to `[mu || logvar]`.
    pub user_head: DenseParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub gat: Vec<GatParams>,
    pub head: DenseParams,
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    /// Word-vector extractor, shared by encoder and decoder.
    pub extractor: Option<DenseParams>,
}

pub(crate) struct ParamVars {
    pub enc_gat: Vec<GatVars>,
    pub node_head: DenseVars,
    pub user_head: DenseVars,
    pub dec_gat: Vec<GatVars>,
    pub dec_head: DenseVars,
    pub extractor: Option<DenseVars>,
}

fn gat_stack(input: usize, hidden: usize, layers: usize, slope: f64, rng: &mut impl Rng) -> Vec<GatParams> {
    (0..layers)
        .map(|l| GatParams::init(if l == 0 { input } else { hidden }, hidden, slope, rng))
        .collect()
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, layout: &SemanticLayout, rng: &mut impl Rng) -> Self {
        let sem = layout.width();
        let d = cfg.position_dim;
        let head = Activation::LeakyRelu(cfg.head_slope);
        let extractor = (layout.word_dim > 0).then(|| {
            DenseParams::init(&[layout.word_dim, layout.extracted, layout.extracted], head, rng)
        });
        let skip = |width: usize| if cfg.input_skip { width } else { 0 };
        let encoder = EncoderParams {
            gat: gat_stack(sem + d, cfg.encoder_hidden, cfg.encoder_layers, cfg.attention_slope, rng),
            node_head: DenseParams::init(
                &[cfg.encoder_hidden + skip(sem + d), cfg.graph_dim, cfg.graph_dim],
                head,
                rng,
            ),
            user_head: DenseParams::init(&[cfg.graph_dim, cfg.graph_dim, 2 * cfg.latent_dim], head, rng),
        };
        let decoder = DecoderParams {
            gat: gat_stack(sem + cfg.latent_dim, cfg.decoder_hidden, cfg.decoder_layers, cfg.attention_slope, rng),
            head: DenseParams::init(
                &[cfg.decoder_hidden + skip(sem + cfg.latent_dim), cfg.decoder_hidden, d],
                head,
                rng,
            ),
        };
        Self {
            encoder,
            decoder,
            extractor,
        }
    }

    /// All tensors in a fixed order shared with [`ModelParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for g in &self.encoder.gat {
            out.extend(g.params());
        }
        out.extend(self.encoder.node_head.params());
        out.extend(self.encoder.user_head.params());
        for g in &self.decoder.gat {
            out.extend(g.params());
        }
        out.extend(self.decoder.head.params());
        if let Some(e) = &self.extractor {
            out.extend(e.params());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for g in &mut self.encoder.gat {
            out.extend(g.params_mut());
        }
        out.extend(self.encoder.node_head.params_mut());
        out.extend(self.encoder.user_head.params_mut());
        for g in &mut self.decoder.gat {
            out.extend(g.params_mut());
        }
        out.extend(self.decoder.head.params_mut());
        if let Some(e) = &mut self.extractor {
            out.extend(e.params_mut());
        }
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn bind(&self, binder: &mut Binder<'_>) -> ParamVars {
        let enc_gat = self.encoder.gat.iter().map(|g| g.bind(binder)).collect();
        let node_head = self.encoder.node_head.bind(binder);
        let user_head = self.encoder.user_head.bind(binder);
        let dec_gat = self.decoder.gat.iter().map(|g| g.bind(binder)).collect();
        let dec_head = self.decoder.head.bind(binder);
        let extractor = self.extractor.as_ref().map(|e| e.bind(binder));
        ParamVars {
            enc_gat,
            node_head,
            user_head,
            dec_gat,
            dec_head,
            extractor,
        }
    }
}

/// `q(u | scenes)`: a diagonal Gaussian over the preference vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserPosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl UserPosterior {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| l.exp()).collect()
    }
}
