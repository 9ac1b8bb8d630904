//! `scrk` command-line front end. Each subcommand runs one pipeline stage,
//! reading and writing the file formats in `scrk_core::io`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use scrk_core::aggregator::{describe_all, global_descriptor, GlobalDescriptor};
use scrk_core::config::{ConfigError, PipelineConfig};
use scrk_core::covis::CovisGraph;
use scrk_core::evalkit::{accuracy_at_thresholds, random_retrieval_median_error, recall_at_k, retrieval_median_error};
use scrk_core::io::{self, IoError, ResultRecord};
use scrk_core::localize::{LocalizationModels, SearchMode};
use scrk_core::pipeline::{
    corrupt_stage, covis_stage, index_stage, localize_queries, synthesize, train_regressor, Dataset, PipelineError,
};
use scrk_core::{ImageId, Pose, RngStream};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "scrk", version, about = "Scene coordinate regression localization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (TOML). Defaults to the built-in desk benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic scene and export it as a scene directory.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output scene directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the covisibility graph over the training cameras.
    Covis {
        #[command(flatten)]
        common: Common,
        /// Scene directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output graph file.
        #[arg(long)]
        out: PathBuf,
        /// Fraction of false edges to add after building.
        #[arg(long, default_value_t = 0.0)]
        corrupt: f64,
    },
    /// Train the aggregator and build the retrieval index.
    TrainAgg {
        #[command(flatten)]
        common: Common,
        /// Scene directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Covisibility graph file.
        #[arg(long)]
        graph: PathBuf,
        /// Output aggregator model.
        #[arg(long)]
        out: PathBuf,
        /// Also write the retrieval index over the graph's images.
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Train the scene coordinate regressor.
    TrainScr {
        #[command(flatten)]
        common: Common,
        /// Scene directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Aggregator model.
        #[arg(long)]
        agg: PathBuf,
        /// Output regressor model.
        #[arg(long)]
        out: PathBuf,
        /// Covisibility graph enabling graph augmentation.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Train with the global input set to zero.
        #[arg(long)]
        zero_global: bool,
    },
    /// Localize every query image of a scene.
    Localize {
        #[command(flatten)]
        common: Common,
        /// Scene directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Aggregator model.
        #[arg(long)]
        agg: PathBuf,
        /// Retrieval index.
        #[arg(long)]
        index: PathBuf,
        /// Regressor model.
        #[arg(long)]
        scr: PathBuf,
        /// Output results file.
        #[arg(long)]
        out: PathBuf,
        /// Query with a zero global input (for regressors trained that way).
        #[arg(long)]
        zero_global: bool,
    },
    /// Accuracy of a results file at the configured thresholds.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Scene directory holding the ground-truth query poses.
        #[arg(long = "in")]
        input: PathBuf,
        /// Results file.
        #[arg(long)]
        results: PathBuf,
        /// Restrict to a query subset.
        #[arg(long, value_enum, default_value_t = Subset::All)]
        subset: Subset,
        /// Print comma-separated values instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Retrieval error curve against the random-retrieval baseline.
    RetrievalStats {
        #[command(flatten)]
        common: Common,
        /// Scene directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Aggregator model.
        #[arg(long)]
        agg: PathBuf,
        /// Retrieval index.
        #[arg(long)]
        index: PathBuf,
        /// Largest k on the curve (defaults to the configured value).
        #[arg(long)]
        k_max: Option<usize>,
        /// Search the quantized codes instead of the stored descriptors.
        #[arg(long)]
        quantized: bool,
        /// Random orderings averaged for the baseline curve.
        #[arg(long, default_value_t = 200)]
        baseline_trials: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Subset {
    All,
    Aliased,
}

/// A failure mapped onto an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) => EXIT_DATA,
            Self::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Numerical(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_numerical() {
            Self::Numerical(e.to_string())
        } else {
            Self::Data(e.to_string())
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Deterministic record of one stage run: no timestamps or absolute paths
/// beyond what was passed on the command line.
#[derive(Debug, Default)]
struct Manifest {
    stage: &'static str,
    config_hash: String,
    seed: u64,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<(PathBuf, String)>,
}

impl Manifest {
    fn consumed(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push((path.to_path_buf(), hash_path(path)?));
        Ok(())
    }

    fn produced(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.push((path.to_path_buf(), hash_path(path)?));
        Ok(())
    }

    /// Writes the manifest next to `primary` as `<primary>.manifest` and
    /// appends it to `out`.
    fn finish(&self, primary: &Path, out: &mut String) -> Result<(), CliError> {
        let text = self.render();
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest");
        io::write_atomic(Path::new(&name), text.as_bytes())?;
        out.push_str(&text);
        Ok(())
    }

    fn render(&self) -> String {
        let mut s = String::from("# manifest\n");
        let _ = writeln!(s, "stage {}", self.stage);
        let _ = writeln!(s, "scrk {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "format {}", io::FORMAT_VERSION);
        let _ = writeln!(s, "config sha256:{}", self.config_hash);
        let _ = writeln!(s, "seed {}", self.seed);
        for (p, h) in &self.inputs {
            let _ = writeln!(s, "in {} sha256:{h}", p.display());
        }
        for (p, h) in &self.outputs {
            let _ = writeln!(s, "out {} sha256:{h}", p.display());
        }
        s
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// File digest, or for a directory a digest over its sorted relative paths
/// and file digests.
fn hash_path(path: &Path) -> Result<String, CliError> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for rel in files {
            let digest = hash_path(&path.join(&rel))?;
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(digest.as_bytes());
            h.update(b"\n");
        }
        Ok(hex(&h.finalize()))
    } else {
        let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(hex(&Sha256::digest(&bytes)))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::desk_benchmark(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn manifest(stage: &'static str, common: &Common, cfg: &PipelineConfig, seed: u64) -> Result<Manifest, CliError> {
    let mut m = Manifest {
        stage,
        config_hash: hex(&Sha256::digest(cfg.to_toml_string().as_bytes())),
        seed,
        ..Manifest::default()
    };
    if let Some(p) = &common.config {
        m.consumed(p)?;
    }
    Ok(m)
}

fn check_fraction(name: &str, v: f64) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(CliError::Usage(format!("--{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn training_poses(data: &Dataset) -> BTreeMap<ImageId, Pose> {
    data.train_cameras().map(|c| (c.image_id, c.pose)).collect()
}

fn query_descriptors(
    data: &Dataset,
    model: &scrk_core::aggregator::AggregatorModel,
    pca: &scrk_core::numeric::PcaModel,
) -> Result<Vec<(GlobalDescriptor, Pose)>, CliError> {
    data.query_cameras()
        .map(|c| {
            let img = data
                .image(c.image_id)
                .ok_or_else(|| CliError::Data(format!("no observations for query {}", c.image_id)))?;
            let g = global_descriptor(&img.features, model, pca).map_err(|e| CliError::from(PipelineError::from(e)))?;
            Ok((g, c.pose))
        })
        .collect()
}

fn execute(command: Command, out: &mut String) -> Result<(), CliError> {
    match command {
        Command::Synth { common, out: dir } => {
            let cfg = load_config(&common)?;
            let mut m = manifest("synth", &common, &cfg, cfg.scene.seed)?;
            let data = synthesize(&cfg.scene)?;
            io::write_dataset(&dir, &data)?;
            m.produced(&dir)?;
            let _ = writeln!(
                out,
                "scene: {} train, {} query, {} aliased queries",
                data.train_ids().len(),
                data.query_ids().len(),
                data.aliased_queries().len()
            );
            m.finish(&dir, out)?;
        }
        Command::Covis {
            common,
            input,
            out: path,
            corrupt,
        } => {
            check_fraction("corrupt", corrupt)?;
            let cfg = load_config(&common)?;
            let mut m = manifest("covis", &common, &cfg, cfg.scene.seed)?;
            let data = io::read_dataset(&input)?;
            m.consumed(&input)?;
            let mut graph = covis_stage(&data.cameras(&data.train_ids()), &cfg.covis, cfg.scene.seed)?;
            if corrupt > 0.0 {
                graph = corrupt_stage(&graph, corrupt, cfg.scene.seed)?;
            }
            io::write_graph(&path, &graph)?;
            m.produced(&path)?;
            let _ = writeln!(
                out,
                "graph: {} nodes, {} edges",
                graph.nodes().len(),
                graph.edges().len()
            );
            m.finish(&path, out)?;
        }
        Command::TrainAgg {
            common,
            input,
            graph,
            out: path,
            index,
        } => {
            let cfg = load_config(&common)?;
            let mut m = manifest("train-agg", &common, &cfg, cfg.aggregator.seed)?;
            let data = io::read_dataset(&input)?;
            m.consumed(&input)?;
            let g: CovisGraph = io::read_graph(&graph)?;
            m.consumed(&graph)?;
            let features = data.feature_maps();
            let trained = scrk_core::aggregator::train_aggregator(&features, &g, &cfg.aggregator)
                .map_err(|e| CliError::from(PipelineError::from(e)))?;
            io::write_aggregator(&path, &trained.model, &trained.pca)?;
            m.produced(&path)?;
            if let Some(index_path) = index {
                let descs = describe_all(&features, g.nodes(), &trained.model, &trained.pca)
                    .map_err(|e| CliError::from(PipelineError::from(e)))?;
                let idx = index_stage(descs, &cfg)?;
                io::write_index(&index_path, &idx)?;
                m.produced(&index_path)?;
            }
            let tr = &trained.loss_trace;
            if let (Some(first), Some(last)) = (tr.first(), tr.last()) {
                let _ = writeln!(out, "aggregator loss: {first:.5} -> {last:.5}");
            }
            m.finish(&path, out)?;
        }
        Command::TrainScr {
            common,
            input,
            agg,
            out: path,
            graph,
            zero_global,
        } => {
            let cfg = load_config(&common)?;
            let mut m = manifest("train-scr", &common, &cfg, cfg.scr.seed)?;
            let data = io::read_dataset(&input)?;
            m.consumed(&input)?;
            let (model, pca) = io::read_aggregator(&agg)?;
            m.consumed(&agg)?;
            let g = match &graph {
                Some(p) => {
                    let g = io::read_graph(p)?;
                    m.consumed(p)?;
                    Some(g)
                }
                None => None,
            };
            let descs = describe_all(&data.feature_maps(), &data.train_ids(), &model, &pca)
                .map_err(|e| CliError::from(PipelineError::from(e)))?;
            let trained = train_regressor(&data, &descs, g.as_ref(), &cfg, zero_global)?;
            io::write_scr(&path, &trained.model)?;
            m.produced(&path)?;
            let tr = &trained.loss_trace;
            if let (Some(first), Some(last)) = (tr.first(), tr.last()) {
                let _ = writeln!(out, "regressor loss: {first:.4} -> {last:.4}");
            }
            m.finish(&path, out)?;
        }
        Command::Localize {
            common,
            input,
            agg,
            index,
            scr,
            out: path,
            zero_global,
        } => {
            let cfg = load_config(&common)?;
            let mut m = manifest("localize", &common, &cfg, cfg.ransac.seed)?;
            let data = io::read_dataset(&input)?;
            m.consumed(&input)?;
            let (agg_model, pca) = io::read_aggregator(&agg)?;
            m.consumed(&agg)?;
            let idx = io::read_index(&index)?;
            m.consumed(&index)?;
            let scr_model = io::read_scr(&scr)?;
            m.consumed(&scr)?;
            let models = LocalizationModels {
                aggregator: &agg_model,
                pca: &pca,
                scr: &scr_model,
                zero_global,
            };
            let outcomes = localize_queries(&data, &models, &idx, &cfg)?;
            let records: Vec<ResultRecord> = outcomes
                .iter()
                .map(|o| ResultRecord::from_result(o.image_id, o.result.as_ref()))
                .collect();
            io::write_results(&path, &records)?;
            m.produced(&path)?;
            let found = records.iter().filter(|r| r.estimate.is_some()).count();
            let _ = writeln!(out, "localized: {found} of {} queries returned a pose", records.len());
            m.finish(&path, out)?;
        }
        Command::Eval {
            common,
            input,
            results,
            subset,
            csv,
        } => {
            let cfg = load_config(&common)?;
            let mut m = manifest("eval", &common, &cfg, cfg.scene.seed)?;
            let data = io::read_dataset(&input)?;
            m.consumed(&input)?;
            let records = io::read_results(&results)?;
            m.consumed(&results)?;
            let keep: Vec<ImageId> = match subset {
                Subset::All => data.query_ids(),
                Subset::Aliased => data.aliased_queries(),
            };
            let estimates: Vec<(ImageId, Option<Pose>)> = records
                .iter()
                .filter(|r| keep.contains(&r.image_id))
                .map(|r| (r.image_id, r.estimate.map(|e| e.pose)))
                .collect();
            let truths: Vec<(ImageId, Pose)> = data
                .query_cameras()
                .filter(|c| keep.contains(&c.image_id))
                .map(|c| (c.image_id, c.pose))
                .collect();
            let thresholds: Vec<(f64, f64)> = cfg.eval.thresholds.iter().map(|[t, r]| (*t, *r)).collect();
            let table = accuracy_at_thresholds(&estimates, &truths, &thresholds).map_err(data_err)?;
            let label = match subset {
                Subset::All => "all",
                Subset::Aliased => "aliased",
            };
            if csv {
                out.push_str(&table.to_csv(label));
            } else {
                out.push_str(&table.to_aligned_text(label));
            }
            out.push_str(&m.render());
        }
        Command::RetrievalStats {
            common,
            input,
            agg,
            index,
            k_max,
            quantized,
            baseline_trials,
        } => {
            let cfg = load_config(&common)?;
            let mut m = manifest("retrieval-stats", &common, &cfg, cfg.scene.seed)?;
            let data = io::read_dataset(&input)?;
            m.consumed(&input)?;
            let (model, pca) = io::read_aggregator(&agg)?;
            m.consumed(&agg)?;
            let idx = io::read_index(&index)?;
            m.consumed(&index)?;
            let k_max = k_max.unwrap_or(cfg.eval.curve_k_max);
            if k_max == 0 {
                return Err(CliError::Usage("--k-max must be >= 1".into()));
            }
            let mode = if quantized {
                SearchMode::Quantized
            } else {
                SearchMode::Exact
            };
            let queries = query_descriptors(&data, &model, &pca)?;
            let train = training_poses(&data);
            let learned = retrieval_median_error(&idx, &queries, &train, k_max, mode).map_err(data_err)?;
            let query_poses: Vec<Pose> = queries.iter().map(|q| q.1).collect();
            let mut rng = RngStream::new(cfg.scene.seed, "random-retrieval");
            let random = random_retrieval_median_error(&query_poses, &train, k_max, baseline_trials, &mut rng)
                .map_err(data_err)?;
            let recall = recall_at_k(&idx, &queries, &train, k_max.min(5), mode).map_err(data_err)?;
            out.push_str("# k learned random\n");
            for ((k, l), r) in learned.k.iter().zip(&learned.median_error).zip(&random.median_error) {
                let _ = writeln!(out, "{k} {l} {r}");
            }
            let _ = writeln!(out, "# recall@{} {recall}", k_max.min(5));
            out.push_str(&m.render());
        }
    }
    Ok(())
}

/// Runs one subcommand and returns the process exit code. Output that would
/// go to stdout is appended to `stdout`; diagnostics go to `stderr`.
pub fn run_with_output<I, T>(argv: I, stdout: &mut String, stderr: &mut String) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    stdout.push_str(&text);
                    EXIT_OK
                }
                _ => {
                    stderr.push_str(&text);
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Runs one subcommand, printing to the process streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let (mut out, mut err) = (String::new(), String::new());
    let code = run_with_output(argv, &mut out, &mut err);
    print!("{out}");
    eprint!("{err}");
    code
}
