#![allow(dead_code)]

use std::path::Path;
use std::process::Command;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use neatnet::autodiff::{Tape, Tensor, TensorError, Var};
use neatnet::baselines::BaselineConfig;
use neatnet::experiments::{self, Method, Resources};
use neatnet::gnn::{
    dense_forward, gat_forward, gat_on_tape, Activation, Binder, DenseLayer, DenseParams, EdgeList, GatParams,
    GatVars,
};
use neatnet::posegraph::{self, Gmm};
use neatnet::scene::{dist, Dataset, Scene};
use neatnet::semantics::EmbeddingTable;
use neatnet::synth::{generate_dataset, UserMix};
use neatnet::vae::{self, Model, ModelConfig, ModelParams, Preset, Reconstruction, SemanticLayout, UserExample, UserPosterior};

/// Detail line on success, reason on failure.
pub type Check = Result<String, String>;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut impl Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect()).unwrap()
}

/// Entries in `±[0.05, 1.5]`, clear of the kinks at zero.
pub fn off_kink(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Below this magnitude a gradient is compared absolutely: central
/// differences of an O(1) objective carry ~1e-10 of round-off at step 1e-5.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

// ---- gradients ----------------------------------------------------------------

/// Builds the graph under test from leaf tensors. With `trainable` the leaves
/// must be recorded as parameters; the returned vars are those leaves in
/// input order.
pub type Build<'a> = dyn Fn(&mut Tape, bool, &[Tensor]) -> Result<(Var, Vec<Var>), TensorError> + 'a;

pub fn leaves(tape: &mut Tape, trainable: bool, inputs: &[Tensor]) -> Vec<Var> {
    inputs
        .iter()
        .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect()
}

/// Worst relative error between the tape gradient of `sum(W * f(inputs))`
/// and its central difference, over every input entry.
pub fn grad_check(inputs: &[Tensor], build: &Build<'_>, seed: u64) -> Result<f64, String> {
    let mut tape = Tape::new();
    let (out, _) = build(&mut tape, false, inputs).map_err(|e| e.to_string())?;
    let shape = tape.value(out).shape().to_vec();
    let mut r = rng(seed);
    let weights = Tensor::new(shape.clone(), (0..shape.iter().product()).map(|_| normal(&mut r)).collect()).unwrap();

    let objective = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let (out, _) = build(&mut tape, false, inputs).expect("forward succeeded once");
        tape.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let (out, vars) = build(&mut tape, true, inputs).map_err(|e| e.to_string())?;
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).map_err(|e| e.to_string())?;
    let root = tape.sum(prod);
    tape.backward(root).map_err(|e| e.to_string())?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::new(inputs[k].shape().to_vec(), vec![0.0; inputs[k].len()]).unwrap());
        for e in 0..inputs[k].len() {
            let x = inputs[k].data()[e];
            probe[k].data_mut()[e] = x + FD_STEP;
            let up = objective(&probe);
            probe[k].data_mut()[e] = x - FD_STEP;
            let down = objective(&probe);
            probe[k].data_mut()[e] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
    }
    Ok(worst)
}

type Primitive = (&'static str, Vec<Tensor>, Box<Build<'static>>);

fn unary(f: fn(&mut Tape, Var) -> Var) -> Box<Build<'static>> {
    Box::new(move |t, tr, x| {
        let v = leaves(t, tr, x);
        Ok((f(t, v[0]), v))
    })
}

fn unary_r(f: fn(&mut Tape, Var) -> Result<Var, TensorError>) -> Box<Build<'static>> {
    Box::new(move |t, tr, x| {
        let v = leaves(t, tr, x);
        Ok((f(t, v[0])?, v))
    })
}

fn binary(f: fn(&mut Tape, Var, Var) -> Result<Var, TensorError>) -> Box<Build<'static>> {
    Box::new(move |t, tr, x| {
        let v = leaves(t, tr, x);
        Ok((f(t, v[0], v[1])?, v))
    })
}

/// One randomised instance of every differentiable tape operation.
pub fn primitives(seed: u64) -> Vec<Primitive> {
    let mut r = rng(seed);
    let r = &mut r;
    let positive = |rows, cols, r: &mut ChaCha8Rng| off_kink(rows, cols, r).map(|v| v.abs() + 0.2);
    let above_floor = {
        let t = off_kink(3, 4, r);
        t.map(|v| if (v - 0.1).abs() < 0.05 { v + 0.2 } else { v })
    };
    let segments: Rc<[usize]> = Rc::from(vec![0, 0, 1, 1, 1, 2]);
    let gather: Rc<[usize]> = Rc::from(vec![2, 0, 2, 1]);
    let scatter: Rc<[usize]> = Rc::from(vec![1, 0, 1, 2]);
    vec![
        ("add", vec![random_tensor(3, 4, r), random_tensor(3, 4, r)], binary(Tape::add)),
        ("sub", vec![random_tensor(3, 4, r), random_tensor(3, 4, r)], binary(Tape::sub)),
        ("mul", vec![random_tensor(3, 4, r), random_tensor(3, 4, r)], binary(Tape::mul)),
        ("scale", vec![random_tensor(3, 4, r)], unary(|t, a| t.scale(a, 1.7))),
        ("add_scalar", vec![random_tensor(3, 4, r)], unary(|t, a| t.add_scalar(a, 0.3))),
        ("matmul", vec![random_tensor(3, 4, r), random_tensor(4, 2, r)], binary(Tape::matmul)),
        ("matmul_nt", vec![random_tensor(3, 4, r), random_tensor(2, 4, r)], binary(Tape::matmul_nt)),
        ("add_row", vec![random_tensor(3, 4, r), random_tensor(1, 4, r)], binary(Tape::add_row)),
        ("mul_col", vec![random_tensor(3, 4, r), random_tensor(3, 1, r)], binary(Tape::mul_col)),
        ("concat_cols", vec![random_tensor(3, 2, r), random_tensor(3, 3, r)], binary(|t, a, b| t.concat_cols(&[a, b]))),
        ("concat_rows", vec![random_tensor(2, 3, r), random_tensor(4, 3, r)], binary(|t, a, b| t.concat_rows(&[a, b]))),
        ("exp", vec![random_tensor(3, 4, r)], unary(Tape::exp)),
        ("ln", vec![positive(3, 4, r)], unary(Tape::ln)),
        ("square", vec![random_tensor(3, 4, r)], unary(Tape::square)),
        ("sum", vec![random_tensor(3, 4, r)], unary(Tape::sum)),
        ("mean", vec![random_tensor(3, 4, r)], unary_r(Tape::mean)),
        ("sum_cols", vec![random_tensor(3, 4, r)], unary_r(Tape::sum_cols)),
        ("softmax_rows", vec![random_tensor(3, 4, r)], unary_r(Tape::softmax_rows)),
        (
            "segment_softmax",
            vec![random_tensor(6, 1, r)],
            Box::new(move |t, tr, x| {
                let v = leaves(t, tr, x);
                Ok((t.segment_softmax(v[0], segments.clone())?, v))
            }),
        ),
        ("leaky_relu", vec![off_kink(3, 4, r)], unary(|t, a| t.leaky_relu(a, 0.2))),
        ("elu", vec![off_kink(3, 4, r)], unary(|t, a| t.elu(a, 1.0))),
        ("elu_alpha_half", vec![off_kink(3, 4, r)], unary(|t, a| t.elu(a, 0.5))),
        ("clamp_min", vec![above_floor], unary(|t, a| t.clamp_min(a, 0.1))),
        ("slice_cols", vec![random_tensor(3, 4, r)], unary_r(|t, a| t.slice_cols(a, 1, 3))),
        (
            "gather_rows",
            vec![random_tensor(3, 2, r)],
            Box::new(move |t, tr, x| {
                let v = leaves(t, tr, x);
                Ok((t.gather_rows(v[0], gather.clone())?, v))
            }),
        ),
        (
            "scatter_add_rows",
            vec![random_tensor(4, 2, r)],
            Box::new(move |t, tr, x| {
                let v = leaves(t, tr, x);
                Ok((t.scatter_add_rows(v[0], scatter.clone(), 3)?, v))
            }),
        ),
    ]
}

/// GAT layer on two disjoint fully connected scenes, differentiated in the
/// node features, the weight and the attention vector.
pub fn gat_case(seed: u64) -> (Vec<Tensor>, Box<Build<'static>>) {
    let mut r = rng(seed);
    let inputs = vec![random_tensor(5, 3, &mut r), random_tensor(4, 3, &mut r), random_tensor(1, 8, &mut r)];
    let edges = EdgeList::fully_connected_blocks(&[2, 3]);
    let build: Box<Build<'static>> = Box::new(move |t, tr, x| {
        let v = leaves(t, tr, x);
        let p = GatVars {
            weight: v[1],
            attention: v[2],
            slope: 0.2,
        };
        Ok((gat_on_tape(t, v[0], &edges, &p)?.hidden, v))
    });
    (inputs, build)
}

/// Word-vector extractor: two dense layers with a LeakyReLU between,
/// differentiated in the word vectors and every weight and bias.
pub fn extractor_case(seed: u64) -> (Vec<Tensor>, Box<Build<'static>>) {
    let mut r = rng(seed);
    let template = DenseParams::init(&[6, 4, 3], Activation::LeakyRelu(0.2), &mut r);
    let mut inputs = vec![random_tensor(5, 6, &mut r)];
    inputs.extend(template.params().into_iter().cloned());
    let build: Box<Build<'static>> = Box::new(move |t, tr, x| {
        let words = if tr { t.param(x[0].clone()) } else { t.constant(x[0].clone()) };
        let params = DenseParams::new(
            x[1..]
                .chunks(2)
                .map(|c| DenseLayer {
                    weight: c[0].clone(),
                    bias: c[1].clone(),
                })
                .collect(),
            Activation::LeakyRelu(0.2),
        )?;
        let mut binder = if tr { Binder::trainable(t) } else { Binder::constants(t) };
        let vars = params.bind(&mut binder);
        let mut all = vec![words];
        all.extend(binder.into_vars());
        Ok((neatnet::gnn::dense_on_tape(t, words, &vars)?, all))
    });
    (inputs, build)
}

/// Small model over word-named (dining), feature (abstract) and mixed
/// scenes, with one batch of three users.
pub struct ToyLoss {
    pub cfg: ModelConfig,
    pub layout: SemanticLayout,
    pub params: ModelParams,
    pub table: EmbeddingTable,
    pub batch: vae::PreparedBatch,
    pub eps: Tensor,
}

pub fn toy_loss(seed: u64) -> ToyLoss {
    let table = EmbeddingTable::bundled();
    let ds = generate_dataset(3, &UserMix::default(), seed)
        .unwrap()
        .restrict_templates(&["dining", "abstract2"]);
    let cfg = ModelConfig {
        encoder_hidden: 4,
        graph_dim: 3,
        decoder_hidden: 4,
        semantic_dim: 3,
        ..ModelConfig::default()
    };
    let layout = SemanticLayout::from_templates(&ds.templates, Some(&table), cfg.semantic_dim).unwrap();
    let mut r = rng(seed);
    let params = ModelParams::init(&cfg, &layout, &mut r);
    let examples: Vec<UserExample> = ds
        .users
        .iter()
        .map(|u| UserExample {
            view: u.scenes.clone(),
            targets: u.scenes.clone(),
        })
        .collect();
    let batch = vae::prepare_batch(&layout, Some(&table), &examples).unwrap();
    let eps = random_tensor(examples.len(), cfg.latent_dim, &mut r);
    ToyLoss {
        cfg,
        layout,
        params,
        table,
        batch,
        eps,
    }
}

/// Worst relative error of the full objective's parameter gradient.
pub fn loss_grad_check(toy: &ToyLoss, beta: f64, reduction: Reconstruction) -> Result<(f64, usize), String> {
    let (_, grads) = vae::batch_loss_and_grads(&toy.cfg, &toy.layout, &toy.params, &toy.batch, beta, reduction, &toy.eps)
        .map_err(|e| e.to_string())?;
    let mut params = toy.params.clone();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let n = params.tensors().len();
    for k in 0..n {
        for e in 0..grads[k].len() {
            let x = params.tensors()[k].data()[e];
            let eval = |v: f64, params: &mut ModelParams| {
                params.tensors_mut()[k].data_mut()[e] = v;
                vae::batch_loss(&toy.cfg, &toy.layout, params, &toy.batch, beta, reduction, &toy.eps)
                    .unwrap()
                    .total
            };
            let up = eval(x + FD_STEP, &mut params);
            let down = eval(x - FD_STEP, &mut params);
            params.tensors_mut()[k].data_mut()[e] = x;
            worst = worst.max(relative_error(grads[k].data()[e], (up - down) / (2.0 * FD_STEP)));
            count += 1;
        }
    }
    Ok((worst, count))
}

pub fn gradient_suite() -> Check {
    let mut worst: (f64, String) = (0.0, String::new());
    let mut cases = 0;
    let mut record = |name: &str, err: f64| {
        cases += 1;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, name.to_string());
        }
    };
    for seed in 0..3 {
        for (name, inputs, build) in primitives(seed) {
            record(name, grad_check(&inputs, build.as_ref(), seed + 100)?);
        }
        let (inputs, build) = gat_case(seed);
        record("gat", grad_check(&inputs, build.as_ref(), seed + 200)?);
        let (inputs, build) = extractor_case(seed);
        record("extractor", grad_check(&inputs, build.as_ref(), seed + 300)?);
    }
    let toy = toy_loss(4);
    for (beta, red) in [(0.08, Reconstruction::SumPerUser), (0.5, Reconstruction::MeanCoordinate)] {
        let (err, _) = loss_grad_check(&toy, beta, red)?;
        record("vae_loss", err);
    }
    let (err, name) = worst;
    if err < GRAD_TOLERANCE {
        Ok(format!("{cases} cases, worst relative error {err:.2e} ({name})"))
    } else {
        Err(format!("{name}: relative error {err:.2e} exceeds {GRAD_TOLERANCE:e}"))
    }
}

// ---- closed forms and batching ---------------------------------------------------

pub fn kl_reference(post: &UserPosterior) -> f64 {
    0.5 * post
        .mu
        .iter()
        .zip(&post.logvar)
        .map(|(m, lv)| {
            let var = lv.exp();
            m * m + var - 1.0 - var.ln()
        })
        .sum::<f64>()
}

pub fn random_posterior(r: &mut impl Rng) -> UserPosterior {
    let d = r.random_range(1..=6);
    UserPosterior {
        mu: (0..d).map(|_| 2.0 * normal(r)).collect(),
        logvar: (0..d).map(|_| r.random_range(-4.0..3.0)).collect(),
    }
}

pub fn kl_closed_form() -> Check {
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let post = random_posterior(&mut r);
        let got = vae::kl_divergence(std::slice::from_ref(&post)).map_err(|e| e.to_string())?;
        let want = kl_reference(&post);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    if worst <= 1e-9 {
        Ok(format!("100 posteriors, worst deviation {worst:.1e}"))
    } else {
        Err(format!("KL deviates by {worst:.2e}"))
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A GAT layer plus node head on a supergraph of random scenes, against the
/// same layers run scene by scene.
pub fn layer_batching(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let sizes: Vec<usize> = (0..r.random_range(1..=5)).map(|_| r.random_range(1..=7)).collect();
    let width = 5;
    let gat = GatParams::init(width, 4, 0.2, &mut r);
    let head = DenseParams::init(&[4, 3, 3], Activation::LeakyRelu(0.2), &mut r);
    let scenes: Vec<Tensor> = sizes.iter().map(|&n| random_tensor(n, width, &mut r)).collect();
    let rows: Vec<Vec<f64>> = scenes.iter().flat_map(Tensor::to_rows).collect();
    let all = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
    let (h, _) = gat_forward(&all, &EdgeList::fully_connected_blocks(&sizes), &gat).map_err(|e| e.to_string())?;
    let batched = dense_forward(&h, &head).map_err(|e| e.to_string())?;
    let mut sequential = Vec::new();
    for (s, &n) in scenes.iter().zip(&sizes) {
        let (h, _) = gat_forward(s, &EdgeList::fully_connected_blocks(&[n]), &gat).map_err(|e| e.to_string())?;
        sequential.extend(dense_forward(&h, &head).map_err(|e| e.to_string())?.into_data());
    }
    Ok(max_abs_diff(batched.data(), &sequential))
}

/// The full objective on a batch of users, against the mean of the same
/// users run one at a time.
pub fn model_batching(model: &Model, ds: &Dataset, table: &EmbeddingTable, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let k = r.random_range(2..=5);
    let mut examples = Vec::new();
    for _ in 0..k {
        let u = &ds.users[r.random_range(0..ds.users.len())];
        let mut view: Vec<Scene> = u.scenes.iter().filter(|_| r.random_bool(0.7)).cloned().collect();
        if view.is_empty() {
            view.push(u.scenes[0].clone());
        }
        for s in &mut view {
            let placed: Vec<usize> = (0..s.objects.len()).filter(|&i| s.objects[i].placed).collect();
            for &i in &placed[1..] {
                if r.random_bool(0.2) {
                    s.objects[i].placed = false;
                }
            }
        }
        examples.push(UserExample {
            targets: u.scenes.clone(),
            view,
        });
    }
    let eps = random_tensor(k, model.latent_dim(), &mut r);
    let loss = |ex: &[UserExample], eps: &Tensor| -> Result<f64, String> {
        let b = vae::prepare_batch(&model.layout, Some(table), ex).map_err(|e| e.to_string())?;
        Ok(vae::batch_loss(&model.config, &model.layout, &model.params, &b, 0.3, Reconstruction::SumPerUser, eps)
            .map_err(|e| e.to_string())?
            .total)
    };
    let batched = loss(&examples, &eps)?;
    let mut mean = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        mean += loss(std::slice::from_ref(ex), &Tensor::row(eps.row_slice(i)))? / k as f64;
    }
    Ok((batched - mean).abs() / mean.abs().max(1.0))
}

pub fn batching_equivalence() -> Check {
    let table = EmbeddingTable::bundled();
    let ds = generate_dataset(12, &UserMix::default(), 5).unwrap();
    let (mc, mut tc) = Preset::Real.configs();
    tc.epochs = 1;
    let model = vae::train(&ds, &mc, &tc, Some(&table)).map_err(|e| e.to_string())?.model;
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        worst = worst.max(layer_batching(seed)?);
        worst = worst.max(model_batching(&model, &ds, &table, seed)?);
    }
    if worst <= 1e-9 {
        Ok(format!("50 batches, worst deviation {worst:.1e}"))
    } else {
        Err(format!("batched and sequential passes differ by {worst:.2e}"))
    }
}

// ---- trained experiments -----------------------------------------------------------

pub const TEST_USERS: usize = 8;

/// 75 synthetic users restricted to `templates`, split 67 / 8.
pub fn split(templates: &[&str]) -> (Dataset, Dataset) {
    generate_dataset(75, &UserMix::default(), 1)
        .unwrap()
        .restrict_templates(templates)
        .split_last(TEST_USERS)
}

pub fn train(train: &Dataset, preset: Preset) -> Result<Model, String> {
    let (mc, tc) = preset.configs();
    let table = EmbeddingTable::bundled();
    Ok(vae::train(train, &mc, &tc, Some(&table)).map_err(|e| e.to_string())?.model)
}

pub fn resources<'a>(model: &'a Model, train: &'a Dataset, table: &'a EmbeddingTable, cfg: &'a BaselineConfig) -> Resources<'a> {
    Resources {
        model: Some(model),
        train,
        table: Some(table),
        baseline: cfg,
        seed: 0,
        pop_size: posegraph::DEFAULT_POPULATION,
    }
}

pub struct SeparabilityRun {
    pub model: Model,
    pub check: Check,
}

pub fn latent_separability() -> SeparabilityRun {
    let (tr, te) = split(&["abstract1", "abstract2", "dining"]);
    let model = match train(&tr, Preset::Abstract) {
        Ok(m) => m,
        Err(e) => {
            return SeparabilityRun {
                model: train(&tr.restrict_templates(&["dining"]), Preset::Abstract).expect("fallback model"),
                check: Err(e),
            }
        }
    };
    let check = experiments::separability(&model, &tr.users, &te.users)
        .map_err(|e| e.to_string())
        .and_then(|r| {
            let line = format!(
                "handedness {:.3} grouping {:.3} on {} held-out users",
                r.handedness_test, r.grouping_test, TEST_USERS
            );
            if r.handedness_test >= 0.9 && r.grouping_test >= 0.9 {
                Ok(line)
            } else {
                Err(line)
            }
        });
    SeparabilityRun { model, check }
}

/// Fresh noisy users (σ = 0.05 m, a seed disjoint from training) encoded and
/// decoded by `model`.
pub fn denoising(model: &Model) -> Check {
    let mix = UserMix {
        sigma: 0.05,
        ..UserMix::default()
    };
    let ids: Vec<&str> = model.templates.iter().map(|t| t.id.as_str()).collect();
    let users = generate_dataset(TEST_USERS, &mix, 2).unwrap().restrict_templates(&ids).users;
    let r = experiments::denoising(model, &users).map_err(|e| e.to_string())?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let line = format!(
        "{:.0}% of users improved, input {:.4} m, reconstruction {:.4} m",
        100.0 * r.improved_fraction,
        mean(&r.input_error),
        mean(&r.reconstruction_error)
    );
    if r.improved_fraction >= 0.7 {
        Ok(line)
    } else {
        Err(line)
    }
}

pub fn missing_object() -> Check {
    let (tr, te) = split(&["dining"]);
    let model = train(&tr, Preset::MissingObject)?;
    let (table, cfg) = (EmbeddingTable::bundled(), BaselineConfig::default());
    let res = resources(&model, &tr, &table, &cfg);
    let methods = [Method::Neatnet, Method::MeanPosition, Method::RandomPosition];
    let t = experiments::missing_object(&res, &te.users, "dining", &methods).map_err(|e| e.to_string())?;
    let m = |k| t.mean(k).unwrap_or(f64::NAN);
    let (nn, mean, random) = (m(Method::Neatnet), m(Method::MeanPosition), m(Method::RandomPosition));
    let line = format!("neatnet {nn:.4} m, mean-position {mean:.4} m, random-position {random:.4} m");
    if nn < mean && mean < random && nn < 0.5 * mean {
        Ok(line)
    } else {
        Err(line)
    }
}

pub fn new_scene() -> Check {
    let (tr, te) = split(&["abstract1", "abstract2"]);
    let model = train(&tr, Preset::NewScene)?;
    let (table, cfg) = (EmbeddingTable::bundled(), BaselineConfig::default());
    let res = resources(&model, &tr, &table, &cfg);
    let methods = [Method::Neatnet, Method::KnnSceneProjection];
    let r = experiments::new_scene(&res, &te.users, "abstract1", "abstract2", &methods).map_err(|e| e.to_string())?;
    let grouping = r
        .preferences
        .iter()
        .find(|(m, _)| *m == Method::Neatnet)
        .and_then(|(_, p)| p.grouping)
        .unwrap_or(0.0);
    let m = |k| r.errors.mean(k).unwrap_or(f64::NAN);
    let (nn, knn) = (m(Method::Neatnet), m(Method::KnnSceneProjection));
    let line = format!("grouping accuracy {grouping:.3}, neatnet {nn:.4} m, knn-scene-projection {knn:.4} m");
    if grouping >= 0.9 && nn < knn {
        Ok(line)
    } else {
        Err(line)
    }
}

pub fn unseen_object() -> Check {
    let (tr, te) = split(&["office", "dining"]);
    let placed_laptops = tr.scenes_of("office").filter(|s| s.objects.iter().any(|o| o.name == "laptop" && o.placed)).count();
    if placed_laptops > 0 {
        return Err(format!("{placed_laptops} training scenes place the laptop"));
    }
    let model = train(&tr, Preset::Real)?;
    let (table, cfg) = (EmbeddingTable::bundled(), BaselineConfig::default());
    let res = resources(&model, &tr, &table, &cfg);
    let methods = [Method::Neatnet, Method::NearestNeighbour];
    let t = experiments::unseen_object(&res, &te.users, "office", "laptop", &methods).map_err(|e| e.to_string())?;
    let m = |k| t.mean(k).unwrap_or(f64::NAN);
    let (nn, near) = (m(Method::Neatnet), m(Method::NearestNeighbour));
    let line = format!("neatnet {nn:.4} m, nearest-neighbour {near:.4} m over {TEST_USERS} users");
    if nn < near {
        Ok(line)
    } else {
        Err(line)
    }
}

// ---- pose graph ---------------------------------------------------------------------

/// Displacements drawn from two well-separated modes.
pub fn two_mode_points(seed: u64, means: [[f64; 2]; 2], n: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let m = means[i % 2];
            vec![m[0] + 0.1 * normal(&mut r), m[1] + 0.1 * normal(&mut r)]
        })
        .collect()
}

pub fn em_suite() -> Check {
    let mut fits = 0;
    let mut worst_drop: f64 = 0.0;
    let mut worst_mean: f64 = 0.0;
    for seed in 0..10u64 {
        let mut r = rng(seed);
        let a = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let b = [a[0] + 1.5 + r.random_range(0.0..1.0), a[1] - 1.0];
        let pts = two_mode_points(seed, [a, b], 80);
        for k in 1..=posegraph::MAX_COMPONENTS {
            let fit = posegraph::em_fit(&pts, k, &mut r).map_err(|e| e.to_string())?;
            for w in fit.history.windows(2) {
                worst_drop = worst_drop.max(w[0] - w[1]);
            }
            fits += 1;
        }
        let (gmm, _) = posegraph::fit_by_bic(&pts, &mut r).map_err(|e| e.to_string())?;
        if gmm.components() != 2 {
            return Err(format!("seed {seed}: BIC chose K={}", gmm.components()));
        }
        worst_mean = worst_mean.max(mode_error(&gmm, [a, b]));
    }
    let line = format!("{fits} fits, worst log-likelihood drop {worst_drop:.1e}, worst mean error {worst_mean:.4}");
    if worst_drop <= 1e-9 && worst_mean < 0.05 {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Distance from each planted mode to the closest fitted mean, maximised.
pub fn mode_error(gmm: &Gmm, planted: [[f64; 2]; 2]) -> f64 {
    planted
        .iter()
        .map(|p| gmm.means.iter().map(|m| dist(m, p)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Six objects on a 1.2 m x 0.8 m table.
pub const PLANT: [[f64; 2]; 6] = [[0.1, 0.1], [0.5, 0.15], [0.9, 0.1], [1.1, 0.5], [0.6, 0.7], [0.2, 0.6]];

pub fn plant_extent() -> f64 {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in PLANT {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    dist(&lo, &hi)
}

/// Twenty noisy, randomly shifted copies of [`PLANT`].
pub fn planted_scenes(seed: u64) -> Vec<Scene> {
    let mut r = rng(seed);
    let names = ["plate", "cup", "fork", "knife", "spoon", "bowl"];
    (0..20)
        .map(|_| {
            let shift = [r.random_range(-0.3..0.3), r.random_range(-0.3..0.3)];
            Scene {
                template: "planted".into(),
                objects: PLANT
                    .iter()
                    .zip(names)
                    .map(|(p, n)| neatnet::scene::ObjectInstance {
                        name: n.into(),
                        semantics: neatnet::semantics::Semantics::word(n),
                        position: vec![p[0] + shift[0] + 0.01 * normal(&mut r), p[1] + shift[1] + 0.01 * normal(&mut r)],
                        placed: true,
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Mean per-object distance after aligning centroids; the graph only
/// constrains relative placement.
pub fn aligned_error(arrangement: &[Vec<f64>]) -> f64 {
    let n = PLANT.len() as f64;
    let c = |f: &dyn Fn(usize) -> f64| (0..PLANT.len()).map(f).sum::<f64>() / n;
    let shift = [
        c(&|i| arrangement[i][0] - PLANT[i][0]),
        c(&|i| arrangement[i][1] - PLANT[i][1]),
    ];
    (0..PLANT.len())
        .map(|i| dist(&[arrangement[i][0] - shift[0], arrangement[i][1] - shift[1]], &PLANT[i]))
        .sum::<f64>()
        / n
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub struct RecoveryStats {
    pub median_error: f64,
    /// Median best global cost per population size.
    pub median_cost: Vec<(usize, f64)>,
}

pub fn pose_graph_recovery_stats(seeds: u64) -> Result<RecoveryStats, String> {
    let pops = [100, posegraph::DEFAULT_POPULATION, 10_000];
    let mut errors = Vec::new();
    let mut costs = vec![Vec::new(); pops.len()];
    for seed in 0..seeds {
        let model = posegraph::fit_pose_graph(&planted_scenes(seed), seed).map_err(|e| e.to_string())?;
        let tree = posegraph::select_tree(&model);
        for (k, &pop) in pops.iter().enumerate() {
            let best = posegraph::tidy(&model, &tree, pop, &mut rng(seed)).map_err(|e| e.to_string())?;
            let ordered: Vec<Vec<f64>> = ["plate", "cup", "fork", "knife", "spoon", "bowl"]
                .iter()
                .map(|n| best[model.index_of(n).expect("planted object")].clone())
                .collect();
            if pop == posegraph::DEFAULT_POPULATION {
                errors.push(aligned_error(&ordered));
            }
            costs[k].push(model.global_cost(&best).map_err(|e| e.to_string())?);
        }
    }
    Ok(RecoveryStats {
        median_error: median(errors),
        median_cost: pops.iter().copied().zip(costs.into_iter().map(median)).collect(),
    })
}

pub fn pose_graph_recovery() -> Check {
    let s = pose_graph_recovery_stats(20)?;
    let extent = plant_extent();
    let costs: Vec<String> = s.median_cost.iter().map(|(p, c)| format!("{p}: {c:.3}")).collect();
    let line = format!(
        "median error {:.4} m ({:.2}% of extent), median best cost {}",
        s.median_error,
        100.0 * s.median_error / extent,
        costs.join(", ")
    );
    let monotone = s.median_cost.windows(2).all(|w| w[1].1 <= w[0].1);
    if s.median_error < 0.05 * extent && monotone {
        Ok(line)
    } else {
        Err(line)
    }
}

// ---- CLI ----------------------------------------------------------------------------

pub fn neatnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neatnet"))
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run(args: &[&str]) -> Run {
    let out = neatnet().args(args).env_remove("NEATNET_MODEL").output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn path_str(p: &Path) -> String {
    p.to_str().expect("UTF-8 temp path").to_string()
}

/// Runs every subcommand twice into the same files and compares stdout and
/// every written file byte for byte.
pub fn cli_determinism(dir: &Path) -> Check {
    let data = path_str(&dir.join("data.json"));
    let model = path_str(&dir.join("model.json"));
    let out = path_str(&dir.join("out.json"));
    let commands: Vec<(&str, Vec<String>, Vec<&str>)> = vec![
        ("gen", vec!["gen", "--users", "14", "--seed", "3", "--out", &data].into_iter().map(String::from).collect(), vec![&data]),
        (
            "train",
            ["train", "--data", &data, "--holdout", "4", "--out", &model, "--preset", "real", "--templates", "dining,office", "--epochs", "40", "--seed", "2"]
                .map(String::from)
                .to_vec(),
            vec![&model],
        ),
        (
            "reconstruct",
            ["reconstruct", "--model", &model, "--data", &data, "--user", "user_012", "--template", "dining", "--out", &out].map(String::from).to_vec(),
            vec![&out],
        ),
        (
            "place",
            ["place", "--model", &model, "--data", &data, "--user", "user_012", "--template", "office", "--object", "laptop", "--out", &out]
                .map(String::from)
                .to_vec(),
            vec![&out],
        ),
        (
            "place (pose graph)",
            ["place", "--model", &model, "--data", &data, "--user", "user_012", "--template", "dining", "--object", "fork", "--method", "pose_graph", "--seed", "4", "--out", &out]
                .map(String::from)
                .to_vec(),
            vec![&out],
        ),
        (
            "arrange",
            ["arrange", "--model", &model, "--data", &data, "--user", "user_013", "--template", "office", "--source", "dining", "--out", &out]
                .map(String::from)
                .to_vec(),
            vec![&out],
        ),
        (
            "eval",
            ["eval", "--data", &data, "--holdout", "4", "--model", &model, "--task", "missing-object", "--template", "dining", "--methods", "neatnet,random_position,pose_graph", "--pop-size", "200", "--out", &out]
                .map(String::from)
                .to_vec(),
            vec![&out],
        ),
        (
            "export-latents",
            ["export-latents", "--model", &model, "--data", &data, "--out", &out].map(String::from).to_vec(),
            vec![&out],
        ),
        (
            "pose-graph",
            ["pose-graph", "--data", &data, "--holdout", "4", "--template", "dining", "--seed", "9", "--pop-size", "300", "--out", &out]
                .map(String::from)
                .to_vec(),
            vec![&out],
        ),
    ];
    for (name, args, files) in &commands {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let mut seen = Vec::new();
        for _ in 0..2 {
            let r = run(&args);
            if r.code != 0 {
                return Err(format!("{name} exited {}: {}", r.code, r.stderr.trim()));
            }
            let bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap_or_default()).collect();
            seen.push((r.stdout, bytes));
        }
        if seen[0] != seen[1] {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(format!("{} commands reproduced byte for byte", commands.len()))
}
