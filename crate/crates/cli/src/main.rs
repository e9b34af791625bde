use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use datseg::backbone::infer_logits;
use datseg::covariance::ClassCovarianceTracker;
use datseg::io::{self, Manifest, ManifestEntry, RunConfig, MANIFEST_FILE};
use datseg::lap::generate_lap_from_logits;
use datseg::rad::{generate_rad_from_logits, partition_superpoints};
use datseg::scenegen::{generate_scene, CLASS_NAMES};
use datseg::seed::derive_seed;
use datseg::{evaluate, train, AnnotationScheme, Error, LabeledScene, NoiseBaseline, WeakLabels};

/// Label schemes written next to every generated scene.
const GENERATED_SCHEMES: [AnnotationScheme; 3] =
    [AnnotationScheme::Otoc, AnnotationScheme::Ottc, AnnotationScheme::FixedPoints(20)];
const LABEL_STREAM: u64 = 0x1abe1;
const INSPECT_STREAM: u64 = 0x1259ec7;

#[derive(Parser)]
#[command(
    name = "datseg",
    version,
    about = "Weakly supervised point-cloud segmentation with adversarial consistency regularization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with dense and weak labels.
    GenData(GenData),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a per-class IoU report.
    Eval(EvalArgs),
    /// Train every cell of a hyperparameter grid and summarize.
    Ablate(AblateArgs),
    /// Export perturbed geometry and superpoints as PLY.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    scenes: usize,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run config supplying scene keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    labels: Option<AnnotationScheme>,
    #[arg(long)]
    no_lap: bool,
    #[arg(long)]
    no_rad: bool,
    #[arg(long)]
    no_cpg: bool,
    #[arg(long)]
    no_coord_perturb: bool,
    #[arg(long)]
    noise_baseline: Option<NoiseBaseline>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

impl TrainFlags {
    fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
                RunConfig::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        let t = &mut config.train;
        if let Some(labels) = self.labels {
            config.labels = labels;
        }
        t.use_lap &= !self.no_lap;
        t.use_rad &= !self.no_rad;
        t.use_cpg &= !self.no_cpg;
        t.perturb_coords &= !self.no_coord_perturb;
        if let Some(mode) = self.noise_baseline {
            t.noise_baseline = mode;
        }
        if let Some(seed) = self.seed {
            t.seed = seed;
        }
        if let Some(steps) = self.steps {
            t.steps = steps;
        }
        config.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Dataset evaluated every `val_every` steps.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// `KEY=V1,V2,...`; repeat for a Cartesian grid.
    #[arg(long, required = true)]
    grid: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset scored in the summary; the training data when absent.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Grid cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    emit_lap: Option<PathBuf>,
    #[arg(long)]
    emit_rad: Option<PathBuf>,
    #[arg(long)]
    emit_superpoints: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse { .. } => 2,
            Error::NonFinite { .. } => 3,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn scene_file(i: usize) -> String {
    format!("scene_{i:04}.scene")
}

fn weak_path(scene: &Path, scheme: AnnotationScheme) -> PathBuf {
    scene.with_extension(format!("{scheme}.weak"))
}

fn gen_data(args: GenData) -> CliResult {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = args.points {
        config.scene.n_points = p;
    }
    if let Some(k) = args.classes {
        config.scene.k_classes = k;
    }
    let spec = config.scene;
    spec.validate()?;
    if args.scenes == 0 {
        return Err(CliError::usage("--scenes must be at least 1"));
    }
    fs::create_dir_all(&args.out).map_err(|e| CliError { code: 1, message: format!("{}: {e}", args.out.display()) })?;

    let mut entries = Vec::with_capacity(args.scenes);
    for i in 0..args.scenes {
        let scene = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(args.seed, i as u64)))?;
        let name = scene_file(i);
        let path = args.out.join(&name);
        io::save(&path, |w| io::write_scene(&scene, w))?;
        let mut label_rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(args.seed, LABEL_STREAM), i as u64));
        for scheme in GENERATED_SCHEMES {
            let labels = scheme.sample(&scene, &mut label_rng)?;
            io::save(&weak_path(&path, scheme), |w| io::write_weak(&labels, w))?;
        }
        entries.push(ManifestEntry { file: name, points: scene.len() });
    }
    let manifest = Manifest { num_classes: spec.k_classes, feat_dim: 4, seed: args.seed, scenes: entries };
    io::save(&args.out.join(MANIFEST_FILE), |w| manifest.write(w))?;
    println!("wrote {} scenes ({} points) to {}", args.scenes, manifest.total_points(), args.out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> CliResult<(Vec<PathBuf>, Vec<LabeledScene>)> {
    let manifest = Manifest::load(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
    let mut paths = Vec::with_capacity(manifest.scenes.len());
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let path = dir.join(&entry.file);
        let scene = io::load_scene(&path).map_err(|e| CliError::from(e).with_context(&path))?;
        if scene.len() != entry.points
            || scene.num_classes != manifest.num_classes
            || scene.cloud.feat_dim() != manifest.feat_dim
        {
            return Err(CliError { code: 1, message: format!("{} disagrees with the manifest", path.display()) });
        }
        paths.push(path);
        scenes.push(scene);
    }
    if scenes.is_empty() {
        return Err(CliError::usage(format!("{}: manifest lists no scenes", dir.display())));
    }
    Ok((paths, scenes))
}

impl CliError {
    fn with_context(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn load_labels(paths: &[PathBuf], scheme: AnnotationScheme) -> CliResult<Vec<WeakLabels>> {
    paths
        .iter()
        .map(|p| {
            let path = weak_path(p, scheme);
            io::load_weak(&path).map_err(|e| CliError::from(e).with_context(&path))
        })
        .collect()
}

fn log_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

/// Trains one configuration and writes the checkpoint with its logs.
fn train_to(
    data: &Path,
    config: &RunConfig,
    val: Option<&[LabeledScene]>,
    out: &Path,
) -> CliResult<datseg::TrainOutcome> {
    let (paths, scenes) = load_dataset(data)?;
    let weak = load_labels(&paths, config.labels)?;
    let outcome = train(&scenes, &weak, &config.train, val)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError { code: 1, message: format!("{}: {e}", parent.display()) })?;
    }
    io::save(out, |w| io::write_checkpoint(&outcome.params, w))?;
    io::save(&log_path(out, "train.csv"), |w| io::write_train_log(&outcome.log, w))?;
    io::save(&log_path(out, "lap.csv"), |w| io::write_lap_diagnostics(&outcome.log, w))?;
    if val.is_some() {
        io::save(&log_path(out, "val.csv"), |w| io::write_validations(&outcome.validations, w))?;
    }
    io::save(&log_path(out, "config.txt"), |w| {
        use std::io::Write;
        w.write_all(config.to_text().as_bytes()).map_err(Error::from)
    })?;
    Ok(outcome)
}

fn resolve_data(flag: Option<PathBuf>, config: &RunConfig) -> CliResult<PathBuf> {
    flag.or_else(|| config.data.clone()).ok_or_else(|| CliError::usage("no training data: pass --data or set 'data'"))
}

fn run_train(args: TrainArgs) -> CliResult {
    let config = args.flags.run_config()?;
    let data = resolve_data(args.data, &config)?;
    let val = match args.val_data.or_else(|| config.val_data.clone()) {
        Some(dir) => Some(load_dataset(&dir)?.1),
        None => None,
    };
    let outcome = train_to(&data, &config, val.as_deref(), &args.out)?;
    if let Some(last) = outcome.log.last() {
        println!("step {} L_total {:.6}", last.step, last.l_total);
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn load_ckpt(path: &Path) -> CliResult<datseg::ModelParams> {
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint {} not found", path.display())));
    }
    io::load_checkpoint(path).map_err(|e| CliError::from(e).with_context(path))
}

fn run_eval(args: EvalArgs) -> CliResult {
    let params = load_ckpt(&args.ckpt)?;
    let (_, scenes) = load_dataset(&args.data)?;
    let metrics = evaluate(&scenes, &params)?;
    let names: Vec<&str> = if metrics.num_classes() <= CLASS_NAMES.len() { CLASS_NAMES.to_vec() } else { Vec::new() };
    io::save(&args.report, |w| io::write_metrics(&metrics, &names, w))?;
    println!("mIoU {:.4}", metrics.miou());
    Ok(())
}

fn parse_grid(specs: &[String]) -> CliResult<Vec<(String, Vec<String>)>> {
    specs
        .iter()
        .map(|s| {
            let (key, values) =
                s.split_once('=').ok_or_else(|| CliError::usage(format!("grid '{s}' is not KEY=V1,V2")))?;
            let values: Vec<String> =
                values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(CliError::usage(format!("grid '{s}' has no values")));
            }
            Ok((key.trim().to_string(), values))
        })
        .collect()
}

fn run_ablate(args: AblateArgs) -> CliResult {
    let base = args.flags.run_config()?;
    let data = resolve_data(args.data.clone(), &base)?;
    let grid = parse_grid(&args.grid)?;
    let mut cells: Vec<Vec<String>> = vec![Vec::new()];
    for (_, values) in &grid {
        cells =
            cells.into_iter().flat_map(|c| values.iter().map(move |v| [c.clone(), vec![v.clone()]].concat())).collect();
    }
    let configs: Vec<RunConfig> = cells
        .iter()
        .map(|values| {
            let mut config = base.clone();
            for ((key, _), value) in grid.iter().zip(values) {
                config.set(key, value).map_err(|e| CliError::usage(e.to_string()))?;
            }
            config.validate().map_err(|e| CliError::usage(e.to_string()))?;
            Ok(config)
        })
        .collect::<CliResult<_>>()?;
    let scored = match &args.eval_data {
        Some(dir) => load_dataset(dir)?.1,
        None => load_dataset(&data)?.1,
    };
    fs::create_dir_all(&args.out).map_err(|e| CliError { code: 1, message: format!("{}: {e}", args.out.display()) })?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| CliError { code: 1, message: e.to_string() })?;
    let results: Vec<CliResult<(f64, f64)>> = pool.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(i, config)| {
                let out = args.out.join(format!("cell_{i:03}")).join("model.ckpt");
                let outcome = train_to(&data, config, None, &out)?;
                let miou = evaluate(&scored, &outcome.params)?.miou();
                Ok((miou, outcome.log.last().map_or(f64::NAN, |r| r.l_total)))
            })
            .collect()
    });

    let mut summary = String::from("cell");
    for (key, _) in &grid {
        summary.push(',');
        summary.push_str(key);
    }
    summary.push_str(",miou,final_l_total\n");
    for (i, (values, result)) in cells.iter().zip(results).enumerate() {
        let (miou, loss) = result?;
        summary.push_str(&format!("{i},{},{miou},{loss}\n", values.join(",")));
    }
    let path = args.out.join("summary.csv");
    fs::write(&path, summary).map_err(|e| CliError { code: 1, message: format!("{}: {e}", path.display()) })?;
    println!("{} cells summarized in {}", cells.len(), path.display());
    Ok(())
}

fn run_inspect(args: InspectArgs) -> CliResult {
    let config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let params = load_ckpt(&args.ckpt)?;
    let scene = io::load_scene(&args.scene).map_err(|e| CliError::from(e).with_context(&args.scene))?;
    let cloud = &scene.cloud;
    let logits = infer_logits(cloud, &params, None)?;
    let partition = partition_superpoints(cloud, config.train.rad.cell_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, INSPECT_STREAM));

    if let Some(path) = &args.emit_lap {
        let mut tracker = ClassCovarianceTracker::new(params.num_classes(), params.feat_dim());
        let lap_config = config.train.lap_config();
        let (out, _) = generate_lap_from_logits(cloud, &params, &logits, None, &lap_config, &mut tracker, &mut rng)?;
        let offsets = if lap_config.perturb_coords { &out.coord_offsets } else { &out.feat_offsets };
        let norms: Vec<f64> = (0..offsets.rows()).map(|i| datseg::array::norm(offsets.row(i))).collect();
        write_magnitudes(path, out.cloud.coords(), &norms)?;
    }
    if let Some(path) = &args.emit_rad {
        let out = generate_rad_from_logits(cloud, &partition, &params, &logits, &config.train.rad_config(), &mut rng)?;
        let norms: Vec<f64> = (0..cloud.len())
            .map(|i| {
                let (a, b) = (cloud.coords().row(i), out.cloud.coords().row(i));
                a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        write_magnitudes(path, out.cloud.coords(), &norms)?;
    }
    if let Some(path) = &args.emit_superpoints {
        let colors: Vec<[u8; 3]> = partition.region_of().iter().map(|&r| io::region_color(r)).collect();
        io::save(path, |w| io::write_ply(cloud.coords(), &colors, w))?;
    }
    println!("{} points, {} superpoints", cloud.len(), partition.num_regions());
    Ok(())
}

fn write_magnitudes(path: &Path, coords: &datseg::Array, norms: &[f64]) -> CliResult {
    let max = norms.iter().copied().fold(0.0, f64::max);
    let colors: Vec<[u8; 3]> = norms.iter().map(|&v| io::magnitude_color(v, max)).collect();
    io::save(path, |w| io::write_ply(coords, &colors, w))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
