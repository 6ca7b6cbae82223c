use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, ParamVars, Reconstruction, UserPosterior, VaeError, LOGVAR_FLOOR};
use crate::autodiff::{Tape, Tensor, Var};
use crate::gnn::{dense_on_tape, gat_on_tape, Binder, DenseVars};
use crate::scene::{build_batch_supergraph, NodeSelection, ObjectInstance, Scene, SceneTemplate, Supergraph};
use crate::semantics::{EmbeddingTable, Semantics, SemanticsError};

/// Column blocks of a node's semantic vector:
/// `[features | one-hot | extracted word embedding]`, each zero-padded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticLayout {
    pub features: usize,
    pub one_hot: usize,
    /// Width of raw word vectors (0 when no object is named by a word).
    pub word_dim: usize,
    /// Width of the extractor output.
    pub extracted: usize,
}

impl SemanticLayout {
    pub fn from_templates(
        templates: &[SceneTemplate],
        table: Option<&EmbeddingTable>,
        semantic_dim: usize,
    ) -> Result<Self, VaeError> {
        let mut layout = Self {
            features: 0,
            one_hot: 0,
            word_dim: 0,
            extracted: 0,
        };
        for o in templates.iter().flat_map(|t| &t.objects) {
            match &o.semantics {
                Semantics::Features(v) => layout.features = layout.features.max(v.len()),
                Semantics::OneHot { size, .. } => layout.one_hot = layout.one_hot.max(*size),
                Semantics::Word(w) => {
                    let table = table.ok_or_else(|| SemanticsError::OutOfVocabulary(w.clone()))?;
                    table.lookup(w)?;
                    layout.word_dim = table.dim();
                    layout.extracted = semantic_dim;
                }
            }
        }
        Ok(layout)
    }

    pub fn width(&self) -> usize {
        self.features + self.one_hot + self.extracted
    }

    fn static_width(&self) -> usize {
        self.features + self.one_hot
    }

    /// Fixed part of the semantic vector and, for word-named objects, the
    /// raw word vector.
    fn resolve(&self, s: &Semantics, table: Option<&EmbeddingTable>) -> Result<(Vec<f64>, Option<Vec<f64>>), VaeError> {
        let mut fixed = vec![0.0; self.static_width()];
        match s {
            Semantics::Features(v) => {
                if v.len() > self.features {
                    return Err(SemanticsError::Width {
                        expected: self.features,
                        found: v.len(),
                    }
                    .into());
                }
                fixed[..v.len()].copy_from_slice(v);
                Ok((fixed, None))
            }
            Semantics::OneHot { index, size } => {
                if index >= size {
                    return Err(SemanticsError::OneHotRange {
                        index: *index,
                        size: *size,
                    }
                    .into());
                }
                if *size > self.one_hot {
                    return Err(SemanticsError::Width {
                        expected: self.one_hot,
                        found: *size,
                    }
                    .into());
                }
                fixed[self.features + index] = 1.0;
                Ok((fixed, None))
            }
            Semantics::Word(w) => {
                let table = table.ok_or_else(|| SemanticsError::OutOfVocabulary(w.clone()))?;
                let v = table.lookup(w)?;
                if self.word_dim == 0 || v.len() != self.word_dim {
                    return Err(SemanticsError::Width {
                        expected: self.word_dim,
                        found: v.len(),
                    }
                    .into());
                }
                Ok((fixed, Some(v.to_vec())))
            }
        }
    }
}

/// A supergraph plus the semantic inputs of its nodes.
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub graph: Supergraph,
    fixed: Tensor,
    /// Raw word vectors (zeros for other nodes) and a `nodes x 1` indicator.
    words: Option<(Tensor, Tensor)>,
}

impl GraphInput {
    pub fn build(
        layout: &SemanticLayout,
        table: Option<&EmbeddingTable>,
        users: &[Vec<&Scene>],
        select: NodeSelection,
    ) -> Result<Self, VaeError> {
        let graph = build_batch_supergraph(users, select)?;
        let mut fixed = Vec::with_capacity(graph.nodes() * layout.static_width());
        let mut words = Vec::new();
        let mut indicator = Vec::with_capacity(graph.nodes());
        let mut any_word = false;
        let nodes = users
            .iter()
            .flat_map(|scenes| scenes.iter())
            .flat_map(|s| s.objects.iter())
            .filter(|o| select == NodeSelection::All || o.placed);
        for o in nodes {
            let (f, w) = layout.resolve(&o.semantics, table)?;
            fixed.extend(f);
            match w {
                Some(w) => {
                    any_word = true;
                    words.extend(w);
                    indicator.push(1.0);
                }
                None => {
                    words.extend(std::iter::repeat_n(0.0, layout.word_dim));
                    indicator.push(0.0);
                }
            }
        }
        let n = graph.nodes();
        let fixed = Tensor::matrix(n, layout.static_width(), fixed)?;
        let words = if any_word {
            Some((Tensor::matrix(n, layout.word_dim, words)?, Tensor::column(&indicator)))
        } else {
            None
        };
        Ok(Self { graph, fixed, words })
    }

    pub fn nodes(&self) -> usize {
        self.graph.nodes()
    }
}

/// One user in a training batch: what the encoder sees and what the decoder
/// must reproduce.
#[derive(Clone, Debug)]
pub struct UserExample {
    pub view: Vec<Scene>,
    pub targets: Vec<Scene>,
}

#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub encoder: GraphInput,
    pub decoder: GraphInput,
    /// Decoder-node positions, `nodes x D`.
    pub targets: Tensor,
    pub users: usize,
    /// `users x 1`, reciprocal of each user's visible scene count.
    scene_weights: Tensor,
}

pub fn prepare_batch(
    layout: &SemanticLayout,
    table: Option<&EmbeddingTable>,
    examples: &[UserExample],
) -> Result<PreparedBatch, VaeError> {
    if examples.is_empty() {
        return Err(VaeError::EmptyDataset);
    }
    let views: Vec<Vec<&Scene>> = examples.iter().map(|e| e.view.iter().collect()).collect();
    let targets: Vec<Vec<&Scene>> = examples.iter().map(|e| e.targets.iter().collect()).collect();
    let encoder = GraphInput::build(layout, table, &views, NodeSelection::Placed)?;
    let decoder = GraphInput::build(layout, table, &targets, NodeSelection::Placed)?;
    let counts = encoder.graph.scenes_per_user();
    if counts.contains(&0) {
        return Err(VaeError::NoScenes);
    }
    let scene_weights = Tensor::column(&counts.iter().map(|&c| 1.0 / c as f64).collect::<Vec<_>>());
    Ok(PreparedBatch {
        targets: decoder.graph.positions.clone(),
        encoder,
        decoder,
        users: examples.len(),
        scene_weights,
    })
}

// ---- tape-level network -----------------------------------------------------

fn semantics_on_tape(tape: &mut Tape, input: &GraphInput, layout: &SemanticLayout, extractor: Option<&DenseVars>) -> Result<Var, VaeError> {
    let fixed = tape.constant(input.fixed.clone());
    if layout.extracted == 0 {
        return Ok(fixed);
    }
    let extracted = match (&input.words, extractor) {
        (Some((w, ind)), Some(ex)) => {
            let w = tape.constant(w.clone());
            let e = dense_on_tape(tape, w, ex)?;
            let ind = tape.constant(ind.clone());
            tape.mul_col(e, ind)?
        }
        (None, _) => tape.constant(Tensor::zeros(input.nodes(), layout.extracted)),
        (Some(_), None) => return Err(VaeError::Mismatch("word-named objects but no extractor".into())),
    };
    Ok(tape.concat_cols(&[fixed, extracted])?)
}

fn gat_stack_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    x: Var,
    input: &GraphInput,
    layers: &[crate::gnn::GatVars],
) -> Result<Var, VaeError> {
    let mut h = x;
    for g in layers {
        h = gat_on_tape(tape, h, &input.graph.edges, g)?.hidden;
        h = tape.elu(h, cfg.elu_alpha);
    }
    if cfg.input_skip {
        h = tape.concat_cols(&[h, x])?;
    }
    Ok(h)
}

/// Encoder pass: returns `(mu, logvar)`, each `users x d_u`.
pub(crate) fn encode_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    layout: &SemanticLayout,
    vars: &ParamVars,
    batch: &PreparedBatch,
) -> Result<(Var, Var), VaeError> {
    let input = &batch.encoder;
    if input.graph.positions.cols() != cfg.position_dim {
        return Err(VaeError::Mismatch(format!(
            "positions have {} coordinates, model expects {}",
            input.graph.positions.cols(),
            cfg.position_dim
        )));
    }
    let s = semantics_on_tape(tape, input, layout, vars.extractor.as_ref())?;
    let p = tape.constant(input.graph.positions.clone());
    let x = tape.concat_cols(&[s, p])?;
    let h = gat_stack_on_tape(tape, cfg, x, input, &vars.enc_gat)?;
    let h = dense_on_tape(tape, h, &vars.node_head)?;
    let per_scene = tape.scatter_add_rows(h, input.graph.node_scene.clone(), input.graph.scenes())?;
    let per_user = tape.scatter_add_rows(per_scene, input.graph.scene_user.clone(), batch.users)?;
    let w = tape.constant(batch.scene_weights.clone());
    let pooled = tape.mul_col(per_user, w)?;
    let out = dense_on_tape(tape, pooled, &vars.user_head)?;
    let d = cfg.latent_dim;
    let mu = tape.slice_cols(out, 0, d)?;
    let lv = tape.slice_cols(out, d, 2 * d)?;
    let lv = tape.clamp_min(lv, LOGVAR_FLOOR);
    Ok((mu, lv))
}

/// Decoder pass: `u` is `users x d_u`; returns `nodes x D` positions.
pub(crate) fn decode_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    layout: &SemanticLayout,
    vars: &ParamVars,
    input: &GraphInput,
    u: Var,
) -> Result<Var, VaeError> {
    let s = semantics_on_tape(tape, input, layout, vars.extractor.as_ref())?;
    let per_node = tape.gather_rows(u, input.graph.node_user.clone())?;
    let x = tape.concat_cols(&[s, per_node])?;
    let h = gat_stack_on_tape(tape, cfg, x, input, &vars.dec_gat)?;
    Ok(dense_on_tape(tape, h, &vars.dec_head)?)
}

/// `u = mu + exp(logvar / 2) * eps`.
pub(crate) fn reparameterize_on_tape(tape: &mut Tape, mu: Var, lv: Var, eps: Tensor) -> Result<Var, VaeError> {
    let half = tape.scale(lv, 0.5);
    let std = tape.exp(half);
    let eps = tape.constant(eps);
    let noise = tape.mul(std, eps)?;
    Ok(tape.add(mu, noise)?)
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Squared position error (reduced per `reduction`) plus `beta` times the KL
/// divergence to the standard normal, summed over latent dimensions and
/// averaged over users.
pub fn loss_on_tape(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    mu: Var,
    lv: Var,
    beta: f64,
    reduction: Reconstruction,
) -> Result<LossVars, VaeError> {
    let users = tape.value(mu).rows().max(1);
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.square(diff);
    let recon = match reduction {
        Reconstruction::MeanCoordinate => tape.mean(sq)?,
        Reconstruction::SumPerUser => {
            let total = tape.sum(sq);
            tape.scale(total, 1.0 / users as f64)
        }
    };
    let mu2 = tape.square(mu);
    let var = tape.exp(lv);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, lv)?;
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    let kl = tape.scale(s, 0.5 / users as f64);
    let weighted = tape.scale(kl, beta);
    let total = tape.add(recon, weighted)?;
    Ok(LossVars { total, recon, kl })
}

// ---- plain evaluation -------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLosses {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Evaluates the objective, with the reconstruction term as the mean squared
/// coordinate error, on fixed predictions and posteriors.
pub fn vae_loss(pred: &Tensor, target: &Tensor, posts: &[UserPosterior], beta: f64) -> Result<BatchLosses, VaeError> {
    vae_loss_with(pred, target, posts, beta, Reconstruction::MeanCoordinate)
}

pub fn vae_loss_with(
    pred: &Tensor,
    target: &Tensor,
    posts: &[UserPosterior],
    beta: f64,
    reduction: Reconstruction,
) -> Result<BatchLosses, VaeError> {
    if !pred.all_finite() || !target.all_finite() || beta.is_nan() {
        return Err(VaeError::NotFinite("loss inputs"));
    }
    if posts.iter().any(|p| p.mu.iter().chain(&p.logvar).any(|v| v.is_nan())) {
        return Err(VaeError::NotFinite("posterior"));
    }
    let d = posts.first().map_or(0, UserPosterior::dim);
    if posts.iter().any(|p| p.mu.len() != d || p.logvar.len() != d) {
        return Err(VaeError::Mismatch("posteriors have different widths".into()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let mu = tape.constant(Tensor::matrix(posts.len(), d, posts.iter().flat_map(|q| q.mu.clone()).collect())?);
    let lv = tape.constant(Tensor::matrix(posts.len(), d, posts.iter().flat_map(|q| q.logvar.clone()).collect())?);
    let l = loss_on_tape(&mut tape, p, target, mu, lv, beta, reduction)?;
    Ok(BatchLosses {
        total: tape.value(l.total).item(),
        recon: tape.value(l.recon).item(),
        kl: tape.value(l.kl).item(),
    })
}

/// KL divergence from `N(0, I)`, averaged over the given posteriors.
pub fn kl_divergence(posts: &[UserPosterior]) -> Result<f64, VaeError> {
    let zero = Tensor::zeros(1, 1);
    Ok(vae_loss(&zero, &zero, posts, 1.0)?.kl)
}

pub fn reparameterize(post: &UserPosterior, rng: &mut impl Rng) -> Vec<f64> {
    post.mu
        .iter()
        .zip(&post.logvar)
        .map(|(m, l)| {
            let e: f64 = StandardNormal.sample(rng);
            m + (0.5 * l).exp() * e
        })
        .collect()
}

pub fn infer_mean(post: &UserPosterior) -> Vec<f64> {
    post.mu.clone()
}

/// Posterior for one user from scenes in normalised coordinates.
pub fn encode_user(
    cfg: &ModelConfig,
    layout: &SemanticLayout,
    params: &ModelParams,
    table: Option<&EmbeddingTable>,
    scenes: &[Scene],
) -> Result<UserPosterior, VaeError> {
    let visible: Vec<Scene> = scenes.iter().filter(|s| s.placed_count() > 0).cloned().collect();
    if visible.is_empty() {
        return Err(VaeError::NoScenes);
    }
    let views: Vec<Vec<&Scene>> = vec![visible.iter().collect()];
    let encoder = GraphInput::build(layout, table, &views, NodeSelection::Placed)?;
    let count = encoder.graph.scenes() as f64;
    let batch = PreparedBatch {
        targets: Tensor::zeros(0, cfg.position_dim),
        decoder: encoder.clone(),
        encoder,
        users: 1,
        scene_weights: Tensor::column(&[1.0 / count]),
    };
    let mut tape = Tape::new();
    let vars = params.bind(&mut Binder::constants(&mut tape));
    let (mu, lv) = encode_on_tape(&mut tape, cfg, layout, &vars, &batch)?;
    Ok(UserPosterior {
        mu: tape.value(mu).data().to_vec(),
        logvar: tape.value(lv).data().to_vec(),
    })
}

/// Normalised positions for each object, given a preference vector.
pub fn decode_positions(
    cfg: &ModelConfig,
    layout: &SemanticLayout,
    params: &ModelParams,
    table: Option<&EmbeddingTable>,
    u: &[f64],
    semantics: &[Semantics],
) -> Result<Vec<Vec<f64>>, VaeError> {
    if u.len() != cfg.latent_dim {
        return Err(VaeError::Mismatch(format!(
            "preference vector has {} entries, model expects {}",
            u.len(),
            cfg.latent_dim
        )));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(VaeError::NotFinite("preference vector"));
    }
    let scene = Scene {
        template: String::new(),
        objects: semantics
            .iter()
            .map(|s| ObjectInstance {
                name: String::new(),
                semantics: s.clone(),
                position: vec![0.0; cfg.position_dim],
                placed: false,
            })
            .collect(),
    };
    let input = GraphInput::build(layout, table, &[vec![&scene]], NodeSelection::All)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut Binder::constants(&mut tape));
    let uv = tape.constant(Tensor::row(u));
    let out = decode_on_tape(&mut tape, cfg, layout, &vars, &input, uv)?;
    Ok(tape.value(out).to_rows())
}
