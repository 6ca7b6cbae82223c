use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use neatnet::baselines::BaselineConfig;
use neatnet::experiments::{self, Method, Resources};
use neatnet::posegraph;
use neatnet::scene::{Dataset, Scene, UserRecord};
use neatnet::semantics::EmbeddingTable;
use neatnet::service::{self, SceneBody, ServiceState};
use neatnet::synth::{self, UserMix};
use neatnet::vae::{self, Model, Preset};
use neatnet::{load_dataset, write_file, Error, Result};

#[derive(Parser)]
#[command(name = "neatnet", version, about = "Learn and apply personal arrangement preferences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic users with known preferences.
    Gen(GenArgs),
    /// Train a model bundle on a dataset.
    Train(TrainArgs),
    /// Rebuild one of a user's scenes from all of their examples.
    Reconstruct(UserArgs),
    /// Predict where one object of a user's scene goes.
    Place(PlaceArgs),
    /// Predict a template from the user's other scenes.
    Arrange(ArrangeArgs),
    /// Score methods on the held-out users.
    Eval(EvalArgs),
    /// Write each user's posterior mean.
    ExportLatents(LatentArgs),
    /// Fit and solve the pose-graph model of one template.
    PoseGraph(PoseGraphArgs),
    /// Serve a model over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 75)]
    users: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Placement noise in metres.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    left_fraction: Option<f64>,
    #[arg(long)]
    colour_fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset JSON.
    #[arg(long)]
    data: PathBuf,
    /// Trailing users kept out of training.
    #[arg(long, default_value_t = 8)]
    holdout: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "abstract")]
    preset: String,
    /// Comma-separated template ids; all by default.
    #[arg(long, value_delimiter = ',')]
    templates: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Word-embedding table; the bundled one by default.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArg {
    /// Model bundle.
    #[arg(long, env = "NEATNET_MODEL")]
    model: PathBuf,
}

#[derive(Args)]
struct UserArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    user: String,
    #[arg(long)]
    template: String,
    #[arg(long, default_value = "neatnet")]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlaceArgs {
    #[command(flatten)]
    user: UserArgs,
    #[arg(long)]
    object: String,
}

#[derive(Args)]
struct ArrangeArgs {
    #[command(flatten)]
    user: UserArgs,
    /// Templates shown as examples; every other known template by default.
    #[arg(long, value_delimiter = ',')]
    source: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Reconstruct,
    MissingObject,
    UnseenObject,
    NewScene,
    Separability,
    Denoising,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, env = "NEATNET_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Task,
    /// Comma-separated methods; a per-task default otherwise.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    object: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = posegraph::DEFAULT_POPULATION)]
    pop_size: usize,
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LatentArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PoseGraphArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    template: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = posegraph::DEFAULT_POPULATION)]
    pop_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Training users for the baselines and `/latents`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    holdout: usize,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config(format!("{what} {} does not exist", path.display())))
    }
}

fn load_model(path: &Path) -> Result<Model> {
    require(path, "model bundle")?;
    Ok(Model::load(path)?)
}

fn data(path: &Path) -> Result<Dataset> {
    require(path, "dataset")?;
    load_dataset(path)
}

fn table(path: Option<&Path>) -> Result<EmbeddingTable> {
    match path {
        Some(p) => {
            require(p, "embedding table")?;
            Ok(EmbeddingTable::load(p)?)
        }
        None => Ok(EmbeddingTable::bundled()),
    }
}

fn split(ds: &Dataset, holdout: usize) -> Result<(Dataset, Dataset)> {
    if holdout >= ds.users.len() {
        return Err(config(format!(
            "holdout {holdout} leaves no training users out of {}",
            ds.users.len()
        )));
    }
    Ok(ds.split_last(holdout))
}

fn method(name: &str) -> Result<Method> {
    Ok(name.parse::<Method>()?)
}

fn emit(out: Option<&Path>, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serialises");
    if let Some(p) = out {
        write_file(p, &text)?;
    }
    Ok(())
}

fn scene_json(scene: &Scene) -> Value {
    serde_json::to_value(SceneBody::from_scene(scene)).expect("scene serialises")
}

fn cmd_gen(a: &GenArgs) -> Result<Value> {
    let mut mix = UserMix::default();
    if let Some(s) = a.sigma {
        mix.sigma = s;
    }
    if let Some(f) = a.left_fraction {
        mix.left_fraction = f;
    }
    if let Some(f) = a.colour_fraction {
        mix.colour_fraction = f;
    }
    let ds = synth::generate_dataset(a.users, &mix, a.seed)?;
    write_file(&a.out, &ds.to_json())?;
    Ok(json!({
        "command": "gen",
        "out": a.out.display().to_string(),
        "users": ds.users.len(),
        "templates": ds.templates.iter().map(|t| t.id.clone()).collect::<Vec<_>>(),
        "seed": a.seed,
    }))
}

fn cmd_train(a: &TrainArgs) -> Result<Value> {
    let ds = data(&a.data.data)?;
    let (train, _) = split(&ds, a.data.holdout)?;
    let train = if a.templates.is_empty() {
        train
    } else {
        let ids: Vec<&str> = a.templates.iter().map(String::as_str).collect();
        for id in &ids {
            train.template(id).map_err(|_| config(format!("dataset has no template {id:?}")))?;
        }
        train.restrict_templates(&ids)
    };
    let preset: Preset = a.preset.parse()?;
    let (mut model_cfg, mut train_cfg) = preset.configs();
    if let Some(e) = a.epochs {
        train_cfg.epochs = e;
    }
    if let Some(b) = a.beta {
        train_cfg.beta = b;
    }
    if let Some(d) = a.latent_dim {
        model_cfg.latent_dim = d;
    }
    train_cfg.seed = a.seed;
    let table = table(a.table.as_deref())?;
    let outcome = vae::train(&train, &model_cfg, &train_cfg, Some(&table))?;
    outcome.model.save(&a.out)?;
    let last = outcome.history.last().expect("at least one epoch");
    Ok(json!({
        "command": "train",
        "out": a.out.display().to_string(),
        "users": train.users.len(),
        "templates": outcome.model.templates.iter().map(|t| t.id.clone()).collect::<Vec<_>>(),
        "epochs": train_cfg.epochs,
        "seed": a.seed,
        "final": { "loss": last.loss, "recon": last.recon, "kl": last.kl, "lr": last.lr },
    }))
}

struct UserContext {
    model: Model,
    ds: Dataset,
    user: UserRecord,
}

fn user_context(a: &UserArgs) -> Result<UserContext> {
    let model = load_model(&a.model.model)?;
    let ds = data(&a.data)?;
    let user = ds
        .users
        .iter()
        .find(|u| u.id == a.user)
        .cloned()
        .ok_or_else(|| config(format!("no user {:?} in the dataset", a.user)))?;
    Ok(UserContext { model, ds, user })
}

fn resources<'a>(ctx: &'a UserContext, baseline: &'a BaselineConfig, seed: u64) -> Resources<'a> {
    Resources {
        model: Some(&ctx.model),
        train: &ctx.ds,
        table: ctx.model.table(),
        baseline,
        seed,
        pop_size: posegraph::DEFAULT_POPULATION,
    }
}

fn model_ids(model: &Model) -> Vec<String> {
    model.templates.iter().map(|t| t.id.clone()).collect()
}

fn cmd_reconstruct(a: &UserArgs) -> Result<Value> {
    let ctx = user_context(a)?;
    let ids = model_ids(&ctx.model);
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
    let examples = experiments::examples_of(&ctx.user, &ids);
    let cfg = BaselineConfig::default();
    let scene = experiments::arrange(method(&a.method)?, &resources(&ctx, &cfg, a.seed), &examples, &a.template)?;
    let out = json!({
        "command": "reconstruct",
        "user": a.user,
        "method": a.method,
        "scene": scene_json(&scene),
    });
    emit(a.out.as_deref(), &out)?;
    Ok(out)
}

fn cmd_place(a: &PlaceArgs) -> Result<Value> {
    let u = &a.user;
    let ctx = user_context(u)?;
    let ids = model_ids(&ctx.model);
    let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
    let examples = experiments::examples_of(&ctx.user, &ids);
    let si = examples
        .iter()
        .position(|s| s.template == u.template)
        .ok_or_else(|| config(format!("user {:?} has no {:?} scene the model knows", u.user, u.template)))?;
    let oi = examples[si]
        .index_of(&a.object)
        .ok_or_else(|| config(format!("{:?} is not in template {:?}", a.object, u.template)))?;
    let cfg = BaselineConfig::default();
    let p = experiments::place(method(&u.method)?, &resources(&ctx, &cfg, u.seed), &examples, si, oi)?;
    let out = json!({
        "command": "place",
        "user": u.user,
        "method": u.method,
        "template": u.template,
        "object": a.object,
        "position": p,
    });
    emit(u.out.as_deref(), &out)?;
    Ok(out)
}

fn cmd_arrange(a: &ArrangeArgs) -> Result<Value> {
    let u = &a.user;
    let ctx = user_context(u)?;
    let sources: Vec<String> = if a.source.is_empty() {
        model_ids(&ctx.model).into_iter().filter(|t| t != &u.template).collect()
    } else {
        a.source.clone()
    };
    let ids: Vec<&str> = sources.iter().map(String::as_str).collect();
    let examples = experiments::examples_of(&ctx.user, &ids);
    if examples.is_empty() {
        return Err(config(format!("user {:?} has none of the source scenes {sources:?}", u.user)));
    }
    let cfg = BaselineConfig::default();
    let scene = experiments::arrange(method(&u.method)?, &resources(&ctx, &cfg, u.seed), &examples, &u.template)?;
    let out = json!({
        "command": "arrange",
        "user": u.user,
        "method": u.method,
        "source": sources,
        "scene": scene_json(&scene),
    });
    emit(u.out.as_deref(), &out)?;
    Ok(out)
}

fn default_methods(task: Task) -> &'static [Method] {
    match task {
        Task::Reconstruct => &[Method::Neatnet, Method::NoPrefs, Method::PositiveExample, Method::PoseGraph],
        Task::MissingObject => &[Method::Neatnet, Method::MeanPosition, Method::RandomPosition],
        Task::UnseenObject => &[Method::Neatnet, Method::MeanWithOffset, Method::NearestNeighbour, Method::WeightedKnn],
        Task::NewScene => &[Method::Neatnet, Method::RandomUser, Method::KnnSceneProjection, Method::NoPrefs],
        Task::Separability | Task::Denoising => &[Method::Neatnet],
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<Value> {
    let ds = data(&a.data.data)?;
    let (train, test) = split(&ds, a.data.holdout)?;
    let methods: Vec<Method> = if a.methods.is_empty() {
        default_methods(a.task).to_vec()
    } else {
        a.methods.iter().map(|m| method(m)).collect::<Result<_>>()?
    };
    let model = match &a.model {
        Some(p) => Some(load_model(p)?),
        None => None,
    };
    let needs_model = matches!(a.task, Task::Separability | Task::Denoising) || methods.iter().any(|m| m.needs_model());
    if needs_model && model.is_none() {
        return Err(config("this evaluation needs --model"));
    }
    let bundled;
    let table = match (&model, &a.table) {
        (Some(m), None) if m.table().is_some() => m.table(),
        _ => {
            bundled = table(a.table.as_deref())?;
            Some(&bundled)
        }
    };
    let cfg = BaselineConfig::default();
    let res = Resources {
        model: model.as_ref(),
        train: &train,
        table,
        baseline: &cfg,
        seed: a.seed,
        pop_size: a.pop_size,
    };
    let template = |default: &str| a.template.clone().unwrap_or_else(|| default.to_string());
    let report = match a.task {
        Task::Reconstruct => {
            let ids: Vec<String> = match (&a.template, &model) {
                (Some(t), _) => vec![t.clone()],
                (None, Some(m)) => model_ids(m),
                (None, None) => train.templates.iter().map(|t| t.id.clone()).collect(),
            };
            let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
            serde_json::to_value(experiments::reconstruction(&res, &test.users, &ids, &methods)?)
        }
        Task::MissingObject => {
            serde_json::to_value(experiments::missing_object(&res, &test.users, &template("dining"), &methods)?)
        }
        Task::UnseenObject => {
            let object = a.object.clone().unwrap_or_else(|| "laptop".into());
            serde_json::to_value(experiments::unseen_object(&res, &test.users, &template("office"), &object, &methods)?)
        }
        Task::NewScene => {
            let source = a.source.clone().unwrap_or_else(|| "abstract1".into());
            serde_json::to_value(experiments::new_scene(&res, &test.users, &source, &template("abstract2"), &methods)?)
        }
        Task::Separability => {
            let m = model.as_ref().expect("checked above");
            serde_json::to_value(experiments::separability(m, &train.users, &test.users)?)
        }
        Task::Denoising => {
            let m = model.as_ref().expect("checked above");
            serde_json::to_value(experiments::denoising(m, &test.users)?)
        }
    }
    .expect("report serialises");
    let out = json!({
        "command": "eval",
        "task": a.task.to_possible_value().expect("named task").get_name(),
        "test_users": test.users.len(),
        "seed": a.seed,
        "report": report,
    });
    emit(a.out.as_deref(), &out)?;
    Ok(out)
}

fn cmd_export_latents(a: &LatentArgs) -> Result<Value> {
    let model = load_model(&a.model.model)?;
    let ds = data(&a.data)?;
    let mus = experiments::latent_means(&model, &ds.users)?;
    let rows: Vec<Value> = ds
        .users
        .iter()
        .zip(&mus)
        .map(|(u, mu)| {
            let mut row = json!({ "id": u.id, "mu": mu });
            if let Some(gt) = &u.ground_truth {
                row["handedness"] = json!(gt.handedness);
                row["grouping"] = json!(gt.grouping);
            }
            row
        })
        .collect();
    let text = serde_json::to_string_pretty(&rows).expect("rows serialise");
    write_file(&a.out, &text)?;
    Ok(json!({
        "command": "export-latents",
        "out": a.out.display().to_string(),
        "users": rows.len(),
        "latent_dim": model.latent_dim(),
    }))
}

fn cmd_pose_graph(a: &PoseGraphArgs) -> Result<Value> {
    use rand::SeedableRng;
    let ds = data(&a.data.data)?;
    let (train, _) = split(&ds, a.data.holdout)?;
    train.template(&a.template).map_err(|_| config(format!("dataset has no template {:?}", a.template)))?;
    let scenes: Vec<Scene> = train.scenes_of(&a.template).cloned().collect();
    let model = posegraph::fit_pose_graph(&scenes, a.seed)?;
    let export = posegraph::export(&model);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let positions = posegraph::tidy(&model, &export.tree, a.pop_size, &mut rng)?;
    let cost = model.global_cost(&positions)?;
    let out = json!({
        "command": "pose-graph",
        "template": a.template,
        "seed": a.seed,
        "pop_size": a.pop_size,
        "arrangement": model.roster.iter().zip(&positions).map(|(n, p)| json!({"name": n, "position": p})).collect::<Vec<_>>(),
        "cost": cost,
        "graph": export,
    });
    emit(a.out.as_deref(), &out)?;
    Ok(out)
}

fn cmd_serve(a: &ServeArgs) -> Result<Value> {
    let model = load_model(&a.model.model)?;
    let train = match &a.data {
        Some(p) => Some(split(&data(p)?, a.holdout)?.0),
        None => None,
    };
    let state = ServiceState::new(model, train, a.seed)?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|source| Error::Io { path: "runtime".into(), source })?;
    eprintln!("{}", json!({ "command": "serve", "addr": a.addr.to_string() }));
    rt.block_on(service::serve(state, a.addr))
        .map_err(|source| Error::Io { path: a.addr.to_string(), source })?;
    Ok(json!({ "command": "serve", "stopped": true }))
}

fn run(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Place(a) => cmd_place(a),
        Command::Arrange(a) => cmd_arrange(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportLatents(a) => cmd_export_latents(a),
        Command::PoseGraph(a) => cmd_pose_graph(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string(&summary).expect("summary serialises"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string(), "exit_code": e.exit_code() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
