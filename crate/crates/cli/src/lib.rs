//! The `meshqa` command line: one binary with a subcommand per pipeline
//! stage. [`run`] parses arguments, dispatches and maps the outcome to an
//! exit code (0 success, 1 domain error, 2 usage error).

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use meshqa_annotator::synthetic::{toy_config, toy_dataset, ToySpec};
use meshqa_annotator::{checkpoint, train, AnnotatorConfig, AnnotatorError, Sample, Thresholds, ViewInput};
use meshqa_core::chamfer::{compare_models, object_seed, ChamferError, NamedMesh, DEFAULT_POINTS};
use meshqa_core::curation::{apply_filter, compile_filter, tag_distribution_stream, CurationError, FilterSpec};
use meshqa_core::gltf_io::{load_mesh, IngestError};
use meshqa_core::manifest::{read_all, write_all, ManifestError};
use meshqa_core::mesh::{extract_metadata, load_platform_stats, PlatformStats};
use meshqa_core::metrics::{evaluate_records, MetricError};
use meshqa_core::render::{render_stack, write_stack_png, CameraPlan, RenderError, RenderOptions};
use meshqa_core::{AnnotationRecord, MeshAsset};
use meshqa_service::{ManualClock, Service, ServiceConfig, ServiceError, SystemClock};
use rayon::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {message}", path.display())]
    At { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Chamfer(#[from] ChamferError),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

impl CliError {
    fn at(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::At { path: path.to_path_buf(), message: e.to_string() }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "meshqa", version, about = "Quality annotation and curation for 3D asset collections")]
pub struct Cli {
    /// Worker threads for parallel stages [default: all cores]
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log progress to stderr (RUST_LOG overrides)
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render multiview PNG stacks of glTF meshes
    Render(RenderArgs),
    /// Train the annotation network on labelled meshes
    Train(TrainArgs),
    /// Annotate meshes with a trained model
    Predict(PredictArgs),
    /// Score predictions against labels
    Eval(EvalArgs),
    /// Select manifest records matching a filter spec
    Filter(FilterArgs),
    /// Tag and score distribution of a manifest
    Stats(StatsArgs),
    /// Compare two generators' meshes against references by chamfer distance
    Chamfer(ChamferArgs),
    /// Serve the labeling API
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Input .glb/.gltf files
    #[arg(long = "glb", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Output directory; each mesh gets <out>/<object_id>/
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub views: usize,
    /// Camera jitter seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image size as HEIGHTxWIDTH
    #[arg(long, default_value = "224x224", value_parser = parse_resolution)]
    pub res: (usize, usize),
    /// Overlay black triangle edges
    #[arg(long)]
    pub edges: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labelled manifest (human records)
    #[arg(long, required_unless_present = "toy", requires = "assets")]
    pub manifest: Option<PathBuf>,
    /// Directory holding <object_id>.glb for every manifest record
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// Train on N generated toy objects instead of a manifest
    #[arg(long, conflicts_with = "manifest")]
    pub toy: Option<usize>,
    /// Network and schedule (TOML or JSON) [default: small CPU config]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV of object_id,view_count,like_count
    #[arg(long)]
    pub platform_stats: Option<PathBuf>,
    /// Overrides the config's epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the config's learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides the config's batch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides the config's seed; also seeds camera placement
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub model: PathBuf,
    /// Meshes to annotate
    #[arg(long = "glb", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Output manifest [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Camera seed; use the one given to `train`
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Timestamp stamped on every record (RFC 3339)
    #[arg(long, default_value = "1970-01-01T00:00:00Z", value_parser = parse_timestamp)]
    pub created_at: DateTime<Utc>,
    /// CSV of object_id,view_count,like_count
    #[arg(long)]
    pub platform_stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model-produced manifest
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground-truth manifest; predictions are matched by object id
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Also write the report as JSON
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Filter spec (TOML)
    #[arg(long, required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    /// Built-in spec instead of a file
    #[arg(long, value_enum, conflicts_with = "spec")]
    pub preset: Option<Preset>,
    /// Filtered manifest to write
    #[arg(long)]
    pub out: PathBuf,
    /// Abort on the first malformed line instead of skipping it
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Preset {
    /// High or superior, no single-color, scene or transparent models
    TrainingSetB,
    /// As training-set-b, superior only
    SuperiorOnly,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct ChamferArgs {
    /// Directory of reference meshes; file stems name the objects
    #[arg(long = "ref")]
    pub references: PathBuf,
    /// Generator A's meshes, one per reference, same file stems
    #[arg(long)]
    pub a: PathBuf,
    /// Generator B's meshes
    #[arg(long)]
    pub b: PathBuf,
    /// Surface samples per mesh
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write bar-chart JSON
    #[arg(long)]
    pub chart: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Event log; state is replayed from it on start [default: in memory]
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Directory of <object_id>.glb files for the viewer
    #[arg(long)]
    pub assets: Option<PathBuf>,
    /// Views rendered per object for the view endpoint
    #[arg(long, default_value_t = 40)]
    pub views: usize,
    #[arg(long, default_value = "224x224", value_parser = parse_resolution)]
    pub res: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minutes a task stays reserved for its annotator
    #[arg(long, default_value_t = 30)]
    pub lease_minutes: i64,
    /// Freeze the service clock at this time (RFC 3339); for scripted runs
    #[arg(long, value_parser = parse_timestamp)]
    pub fixed_clock: Option<DateTime<Utc>>,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HEIGHTxWIDTH, got `{s}`"))?;
    let dim = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad size `{v}`"));
    Ok((dim(h)?, dim(w)?))
}

fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc)).map_err(|e| format!("`{s}`: {e}"))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let outcome = match cli.jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(CliError::Invalid(format!("--jobs {n}: {e}"))),
        },
        None => dispatch(cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("meshqa: error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match command {
        Command::Render(a) => cmd_render(&a, &mut out),
        Command::Train(a) => cmd_train(&a, &mut out),
        Command::Predict(a) => cmd_predict(&a, &mut out),
        Command::Eval(a) => cmd_eval(&a, &mut out),
        Command::Filter(a) => cmd_filter(&a, &mut out),
        Command::Stats(a) => cmd_stats(&a, &mut out),
        Command::Chamfer(a) => cmd_chamfer(&a, &mut out),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn stdout_err(e: std::io::Error) -> CliError {
    CliError::at(Path::new("<stdout>"), e)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::at(path, e))
}

fn open_reader(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path).map(BufReader::new).map_err(|e| CliError::at(path, e))
}

fn read_manifest_file(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_all(open_reader(path)?).map_err(|e| CliError::at(path, e))
}

fn load_stats(path: Option<&Path>) -> Result<HashMap<String, PlatformStats>> {
    match path {
        Some(p) => load_platform_stats(p).map_err(|e| CliError::at(p, e)),
        None => Ok(HashMap::new()),
    }
}

fn cmd_render(a: &RenderArgs, out: &mut impl Write) -> Result<()> {
    let plan = CameraPlan { n: a.views, seed: a.seed, ..CameraPlan::default() };
    let opts = RenderOptions { resolution: a.res, edge_overlay: a.edges };
    for path in &a.inputs {
        let mesh = load_mesh(path)?;
        let stack = render_stack(&mesh, &plan, &opts).map_err(|e| CliError::at(path, e))?;
        write_stack_png(&stack, &a.out).map_err(|e| CliError::at(&a.out, e))?;
        writeln!(out, "{}: {} views -> {}", stack.object_id, stack.images.len(), a.out.join(&stack.object_id).display())
            .map_err(stdout_err)?;
    }
    Ok(())
}

/// Renders one mesh the way the model expects its input.
fn model_input(
    mesh: &MeshAsset,
    cfg: &AnnotatorConfig,
    seed: u64,
    stats: &HashMap<String, PlatformStats>,
) -> Result<(ViewInput, meshqa_core::ObjectMetadata)> {
    let plan = CameraPlan { n: cfg.n_views, seed: object_seed(&mesh.object_id, seed), ..CameraPlan::default() };
    let opts = RenderOptions { resolution: cfg.backbone.input_resolution, edge_overlay: false };
    let stack = render_stack(mesh, &plan, &opts).map_err(|e| CliError::at(&mesh.source_path, e))?;
    Ok((ViewInput::Images(stack), extract_metadata(mesh, stats.get(&mesh.object_id).copied())))
}

fn cmd_train(a: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => AnnotatorConfig::load(p)?,
        None => toy_config(&ToySpec::default(), 0),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let samples = match (a.toy, &a.manifest, &a.assets) {
        (Some(n), _, _) => {
            let spec = ToySpec {
                n_objects: n,
                seed: cfg.seed,
                n_views: cfg.n_views,
                resolution: cfg.backbone.input_resolution,
                ..ToySpec::default()
            };
            toy_dataset(&spec)?
        }
        (None, Some(manifest), Some(assets)) => {
            let records = read_manifest_file(manifest)?;
            let stats = load_stats(a.platform_stats.as_deref())?;
            records
                .into_par_iter()
                .map(|label| {
                    let mesh = load_mesh(&assets.join(format!("{}.glb", label.object_id)))?;
                    let (views, metadata) = model_input(&mesh, &cfg, cfg.seed, &stats)?;
                    Ok(Sample { views, metadata, label })
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => return Err(CliError::Invalid("train needs --manifest with --assets, or --toy".into())),
    };
    log::info!("training on {} samples", samples.len());
    let model = train(&samples, &cfg)?;
    for h in &model.history {
        writeln!(out, "epoch {:>3}  train_loss {:.6}  val_loss {:.6}", h.epoch, h.train_loss, h.val_loss)
            .map_err(stdout_err)?;
    }
    checkpoint::save(&model, &a.out).map_err(|e| CliError::at(&a.out, e))?;
    writeln!(out, "wrote {} ({} parameters)", a.out.display(), model.n_params()).map_err(stdout_err)?;
    Ok(())
}

fn cmd_predict(a: &PredictArgs, out: &mut impl Write) -> Result<()> {
    let model = checkpoint::load(&a.model).map_err(|e| CliError::at(&a.model, e))?;
    let stats = load_stats(a.platform_stats.as_deref())?;
    let thresholds = Thresholds::uniform(a.threshold);
    let records = a
        .inputs
        .par_iter()
        .map(|path| {
            let mesh = load_mesh(path)?;
            let (views, meta) = model_input(&mesh, &model.config, a.seed, &stats)?;
            Ok(model.predict(&mesh.object_id, &views, &meta, &thresholds, a.created_at)?)
        })
        .collect::<Result<Vec<_>>>()?;
    match &a.out {
        Some(p) => {
            let f = fs::File::create(p).map_err(|e| CliError::at(p, e))?;
            let mut w = BufWriter::new(f);
            write_all(&mut w, &records).map_err(|e| CliError::at(p, e))?;
            w.flush().map_err(|e| CliError::at(p, e))?;
        }
        None => write_all(&mut *out, &records)?,
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let labels = read_manifest_file(&a.labels)?;
    let mut by_id: HashMap<String, AnnotationRecord> =
        read_manifest_file(&a.predictions)?.into_iter().map(|r| (r.object_id.clone(), r)).collect();
    let predictions = labels
        .iter()
        .map(|l| {
            by_id.remove(&l.object_id).ok_or_else(|| CliError::at(&a.predictions, format!("no prediction for `{}`", l.object_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_records(&predictions, &labels, a.threshold)?;
    write!(out, "{}", report.to_table()).map_err(stdout_err)?;
    if let Some(p) = &a.json {
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        write_file(p, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_filter(a: &FilterArgs, out: &mut impl Write) -> Result<()> {
    let spec = match (a.preset, &a.spec) {
        (Some(Preset::TrainingSetB), _) => FilterSpec::training_set_b(),
        (Some(Preset::SuperiorOnly), _) => FilterSpec::superior_only(),
        (None, Some(p)) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::at(p, e))?;
            FilterSpec::from_toml(&text).map_err(|e| CliError::at(p, e))?
        }
        (None, None) => return Err(CliError::Invalid("filter needs --spec or --preset".into())),
    };
    let filter = compile_filter(&spec)?;
    let file = fs::File::create(&a.out).map_err(|e| CliError::at(&a.out, e))?;
    let mut w = BufWriter::new(file);
    let summary =
        apply_filter(open_reader(&a.manifest)?, &mut w, &filter, a.strict).map_err(|e| CliError::at(&a.manifest, e))?;
    w.flush().map_err(|e| CliError::at(&a.out, e))?;
    drop(w);
    for (line, message) in &summary.errors {
        log::warn!("{}: skipped line {line}: {message}", a.manifest.display());
    }
    writeln!(out, "kept {} of {} records ({} malformed skipped)", summary.n_out, summary.n_in, summary.errors.len())
        .map_err(stdout_err)?;
    if summary.n_out > 0 {
        let table = tag_distribution_stream(open_reader(&a.out)?)?;
        write!(out, "{}", table.tag_table()).map_err(stdout_err)?;
    }
    Ok(())
}

fn cmd_stats(a: &StatsArgs, out: &mut impl Write) -> Result<()> {
    let table = tag_distribution_stream(open_reader(&a.manifest)?).map_err(|e| CliError::at(&a.manifest, e))?;
    write!(out, "{}\n{}", table.tag_table(), table.score_table()).map_err(stdout_err)?;
    Ok(())
}

/// Meshes in `dir` keyed by file stem, sorted by name.
fn mesh_dir(dir: &Path) -> Result<Vec<(String, MeshAsset)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::at(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("glb" | "gltf")))
        .collect();
    paths.sort();
    let meshes: Vec<(String, MeshAsset)> = paths
        .par_iter()
        .map(|p| load_mesh(p).map(|m| (m.object_id.clone(), m)))
        .collect::<Result<_, _>>()?;
    if let Some(w) = meshes.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(CliError::at(dir, format!("`{}` appears as both .glb and .gltf", w[0].0)));
    }
    Ok(meshes)
}

fn named(v: &[(String, MeshAsset)]) -> Vec<NamedMesh<'_>> {
    v.iter().map(|(n, m)| NamedMesh { name: n.as_str(), mesh: m }).collect()
}

fn cmd_chamfer(a: &ChamferArgs, out: &mut impl Write) -> Result<()> {
    let refs = mesh_dir(&a.references)?;
    if refs.is_empty() {
        return Err(CliError::at(&a.references, "no .glb or .gltf files"));
    }
    let side = |dir: &Path| -> Result<Vec<(String, MeshAsset)>> {
        let mut found: HashMap<String, MeshAsset> = mesh_dir(dir)?.into_iter().collect();
        refs.iter()
            .map(|(name, _)| {
                found
                    .remove(name)
                    .map(|m| (name.clone(), m))
                    .ok_or_else(|| CliError::at(dir, format!("missing mesh for `{name}`")))
            })
            .collect()
    };
    let (ma, mb) = (side(&a.a)?, side(&a.b)?);
    let cmp = compare_models(&named(&refs), &named(&ma), &named(&mb), a.points, a.seed)?;
    let csv = cmp.to_csv();
    match &a.out {
        Some(p) => write_file(p, csv.as_bytes())?,
        None => out.write_all(csv.as_bytes()).map_err(stdout_err)?,
    }
    if let Some(p) = &a.chart {
        let mut text = serde_json::to_string_pretty(&cmp.to_chart_json()).expect("chart serializes");
        text.push('\n');
        write_file(p, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        lease: chrono::Duration::minutes(a.lease_minutes),
        assets_dir: a.assets,
        views: a.views,
        view_resolution: a.res,
        view_seed: a.seed,
    };
    let clock: Arc<dyn meshqa_service::Clock> = match a.fixed_clock {
        Some(t) => Arc::new(ManualClock::new(t)),
        None => Arc::new(SystemClock),
    };
    let service = match &a.log {
        Some(p) => Service::open(p, clock, config).map_err(|e| CliError::at(p, e))?,
        None => {
            log::warn!("no --log given; state is lost on exit");
            Service::in_memory(clock, config)
        }
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Invalid(format!("starting runtime: {e}")))?;
    rt.block_on(meshqa_service::serve(Arc::new(service), a.addr)).map_err(|e| CliError::Invalid(format!("{}: {e}", a.addr)))
}

