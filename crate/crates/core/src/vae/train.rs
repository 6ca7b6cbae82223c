use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::forward::{decode_on_tape, encode_on_tape, reparameterize_on_tape};
use super::{
    loss_on_tape, prepare_batch, BatchLosses, Reconstruction, Model, ModelConfig, ModelParams, PreparedBatch, SemanticLayout,
    TrainConfig, UserExample, VaeError,
};
use crate::autodiff::{PlateauScheduler, SgdMomentum, Tape, Tensor};
use crate::gnn::Binder;
use crate::scene::{augment_noise, mask, Dataset, NormalizationStats, Scene};
use crate::semantics::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

fn run_batch(
    cfg: &ModelConfig,
    layout: &SemanticLayout,
    params: &ModelParams,
    batch: &PreparedBatch,
    objective: (f64, Reconstruction),
    eps: &Tensor,
    trainable: bool,
) -> Result<(BatchLosses, Option<Vec<Tensor>>), VaeError> {
    let mut tape = Tape::new();
    let (vars, leaves) = {
        let mut binder = if trainable {
            Binder::trainable(&mut tape)
        } else {
            Binder::constants(&mut tape)
        };
        let vars = params.bind(&mut binder);
        (vars, binder.into_vars())
    };
    let (mu, lv) = encode_on_tape(&mut tape, cfg, layout, &vars, batch)?;
    let u = reparameterize_on_tape(&mut tape, mu, lv, eps.clone())?;
    let pred = decode_on_tape(&mut tape, cfg, layout, &vars, &batch.decoder, u)?;
    let loss = loss_on_tape(&mut tape, pred, &batch.targets, mu, lv, objective.0, objective.1)?;
    let losses = BatchLosses {
        total: tape.value(loss.total).item(),
        recon: tape.value(loss.recon).item(),
        kl: tape.value(loss.kl).item(),
    };
    if !losses.total.is_finite() {
        return Err(VaeError::NotFinite("training loss"));
    }
    if !trainable {
        return Ok((losses, None));
    }
    tape.backward(loss.total)?;
    let grads = leaves
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("trainable leaf has a gradient"))
        .collect();
    Ok((losses, Some(grads)))
}

/// Objective on one batch with the reparameterisation noise `eps`
/// (`users x d_u`) held fixed.
pub fn batch_loss(
    cfg: &ModelConfig,
    layout: &SemanticLayout,
    params: &ModelParams,
    batch: &PreparedBatch,
    beta: f64,
    reduction: Reconstruction,
    eps: &Tensor,
) -> Result<BatchLosses, VaeError> {
    Ok(run_batch(cfg, layout, params, batch, (beta, reduction), eps, false)?.0)
}

/// As [`batch_loss`], plus gradients in [`ModelParams::tensors`] order.
pub fn batch_loss_and_grads(
    cfg: &ModelConfig,
    layout: &SemanticLayout,
    params: &ModelParams,
    batch: &PreparedBatch,
    beta: f64,
    reduction: Reconstruction,
    eps: &Tensor,
) -> Result<(BatchLosses, Vec<Tensor>), VaeError> {
    let (l, g) = run_batch(cfg, layout, params, batch, (beta, reduction), eps, true)?;
    Ok((l, g.expect("gradients requested")))
}

/// Rescales `grads` so their joint L2 norm is at most `limit`.
pub fn clip_global_norm(grads: &mut [Tensor], limit: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > limit && norm > 0.0 {
        let k = limit / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

fn encoder_view(
    scenes: &[Scene],
    cfg: &TrainConfig,
    stats: &NormalizationStats,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Scene>, VaeError> {
    let mut noisy = Vec::with_capacity(scenes.len());
    for s in scenes {
        let sigma = cfg.augment_sigma.get(&s.template).copied().unwrap_or(0.0);
        let sigma = sigma / stats.get(&s.template)?.scale;
        noisy.push(augment_noise(s, sigma, rng)?);
    }
    if cfg.node_mask_rate == 0.0 && cfg.scene_mask_rate == 0.0 {
        return Ok(noisy);
    }
    for _ in 0..cfg.mask_retries.max(1) {
        if let Ok((visible, _, _)) = mask(&noisy, cfg.node_mask_rate, cfg.scene_mask_rate, rng) {
            return Ok(visible);
        }
    }
    Ok(noisy)
}

/// Fits a model to every user of `dataset` (positions in metres).
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    table: Option<&EmbeddingTable>,
) -> Result<TrainOutcome, VaeError> {
    model_cfg.validate()?;
    cfg.validate()?;
    if model_cfg.position_dim != dataset.dim {
        return Err(VaeError::Config(format!(
            "dataset is {}-dimensional, model expects {}",
            dataset.dim, model_cfg.position_dim
        )));
    }
    let users: Vec<Vec<Scene>> = dataset
        .users
        .iter()
        .map(|u| u.scenes.iter().filter(|s| s.placed_count() > 0).cloned().collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect();
    if users.is_empty() {
        return Err(VaeError::EmptyDataset);
    }
    let stats = NormalizationStats::fit(dataset)?;
    let users: Vec<Vec<Scene>> = users
        .iter()
        .map(|scenes| scenes.iter().map(|s| stats.apply(s)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;
    let layout = SemanticLayout::from_templates(&dataset.templates, table, model_cfg.semantic_dim)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(model_cfg, &layout, &mut rng);
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut scheduler = PlateauScheduler::new(cfg.plateau)?;
    let mut order: Vec<usize> = (0..users.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let beta = cfg.beta_at(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let mut examples = Vec::with_capacity(chunk.len());
            for &ui in chunk {
                examples.push(UserExample {
                    view: encoder_view(&users[ui], cfg, &stats, &mut rng)?,
                    targets: users[ui].clone(),
                });
            }
            let batch = prepare_batch(&layout, table, &examples)?;
            let eps: Vec<f64> = (0..batch.users * model_cfg.latent_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let eps = Tensor::matrix(batch.users, model_cfg.latent_dim, eps)?;
            let (losses, mut grads) = batch_loss_and_grads(model_cfg, &layout, &params, &batch, beta, cfg.reconstruction, &eps)?;
            if let Some(limit) = cfg.clip_norm {
                clip_global_norm(&mut grads, limit);
            }
            let mut tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
            opt.step(&mut tensors, &grads)?;
            for (dst, src) in params.tensors_mut().into_iter().zip(tensors) {
                *dst = src;
            }
            let w = chunk.len() as f64;
            sums[0] += losses.total * w;
            sums[1] += losses.recon * w;
            sums[2] += losses.kl * w;
        }
        let n = users.len() as f64;
        let record = EpochRecord {
            epoch,
            loss: sums[0] / n,
            recon: sums[1] / n,
            kl: sums[2] / n,
            lr: opt.lr,
        };
        if epoch + 1 >= cfg.kl_warmup {
            opt.lr = scheduler.step(record.loss, opt.lr)?;
        }
        history.push(record);
    }

    let model = Model::new(
        model_cfg.clone(),
        layout,
        params,
        stats,
        dataset.templates.clone(),
        table.filter(|_| layout.word_dim > 0).cloned(),
        Some(cfg.clone()),
    );
    Ok(TrainOutcome { model, history })
}
