use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use virconv::bench::{bench_stvd_sweep, write_csv, BenchConfig, DEFAULT_SWEEP, MIN_REPEATS};
use virconv::conv::gradcheck::{run_gradcheck, GradOp, GradcheckConfig, DEFAULT_PROBES, DEFAULT_SIZE};
use virconv::geometry::{
    read_velodyne_bin, read_virtual_bin, write_fused_bin, AugmentationRecord, Calibration,
    GeometryError, SparsePointCloud,
};
use virconv::net::scene::{generate_scene, read_scene, write_scene, SyntheticSceneSpec};
use virconv::net::{checkpoint, fuse_early, virconvnet_forward, NetError, NetWeights, VirConvNetSpec};
use virconv::stvd::{bin_histogram, input_stvd, StvdConfig, StvdMode};
use virconv::{config_hash, SeededRng};

const EXIT_FAILED_CHECK: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

const FORWARD_VERSION: u32 = 1;
const STVD_STATS_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "virconv", version, about = "Sparse voxel convolution for fused LiDAR and virtual points")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "VIRCONV_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the backbone on one scene and write per-level summaries.
    Forward(ForwardArgs),
    /// Time the backbone across input discard rates.
    BenchStvd(BenchArgs),
    /// Finite-difference gradient check of one operator.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Per-bin voxel counts before and after input discard, as CSV.
    StvdStats(StatsArgs),
    /// Concatenate a LiDAR and a virtual cloud into one fused file.
    Fuse(FuseArgs),
    /// Write freshly initialised weights and their manifest.
    InitWeights(InitArgs),
}

#[derive(clap::Args)]
struct ForwardArgs {
    #[arg(long)]
    lidar: PathBuf,
    #[arg(long = "virtual")]
    virtual_points: Option<PathBuf>,
    #[arg(long)]
    calib: PathBuf,
    /// Checkpoint written by `init-weights`; its manifest fixes the network.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Network spec JSON, used when no checkpoint is given.
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_stvd: bool,
    /// Output directory; the summary goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every level as a JSON tensor dump (needs --out).
    #[arg(long, requires = "out")]
    dump: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    NearbyHeavy,
    Dense,
}

impl Preset {
    fn spec(self) -> SyntheticSceneSpec {
        match self {
            Self::Default => SyntheticSceneSpec::default(),
            Self::NearbyHeavy => SyntheticSceneSpec::nearby_heavy(),
            Self::Dense => SyntheticSceneSpec::dense(),
        }
    }
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP.to_vec())]
    sweep_rates: Vec<f64>,
    #[arg(long, default_value_t = MIN_REPEATS)]
    repeats: usize,
    /// Scene directory written by `synth`.
    #[arg(long, conflicts_with = "preset")]
    scene: Option<PathBuf>,
    /// Generate the scene in memory instead of reading one.
    #[arg(long, value_enum, default_value = "dense")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    net: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_op)]
    op: GradOp,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    size: usize,
    #[arg(long, default_value_t = DEFAULT_PROBES)]
    probes: usize,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Test hook: perturb the analytic weight gradient.
    #[arg(long, hide = true)]
    corrupt_weight_grad: bool,
}

fn parse_op(s: &str) -> Result<GradOp, String> {
    s.parse()
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Scene spec JSON; missing fields take their defaults.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// KITTI calibration; a synthetic KITTI-like rig when absent.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Auto,
    AllVoxels,
    VirtualOnly,
}

#[derive(clap::Args)]
struct StatsArgs {
    #[arg(long, conflicts_with_all = ["lidar", "virtual_points"])]
    scene: Option<PathBuf>,
    #[arg(long)]
    lidar: Option<PathBuf>,
    #[arg(long = "virtual")]
    virtual_points: Option<PathBuf>,
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    nearby_limit: Option<f64>,
    #[arg(long)]
    keep_per_bin: Option<usize>,
    #[arg(long)]
    bin_range: Option<f64>,
    #[arg(long, value_enum, default_value = "auto")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct FuseArgs {
    #[arg(long)]
    lidar: PathBuf,
    #[arg(long = "virtual")]
    virtual_points: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct InitArgs {
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Unreadable or malformed input the CLI parsed itself.
#[derive(Debug)]
struct InputError(String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<InputError>() {
            return EXIT_PARSE;
        }
        if let Some(e) = cause.downcast_ref::<NetError>() {
            return if e.is_parse_error() { EXIT_PARSE } else { EXIT_CONFIG };
        }
        if let Some(e) = cause.downcast_ref::<GeometryError>() {
            return if e.is_parse_error() { EXIT_PARSE } else { EXIT_CONFIG };
        }
    }
    EXIT_CONFIG
}

/// The error chain on one line, skipping causes the previous message
/// already quotes.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &text;
        }
    }
    out
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes") + "\n"
}

fn load_net(path: Option<&Path>) -> Result<VirConvNetSpec> {
    let net = match path {
        Some(p) => read_json(p)?,
        None => VirConvNetSpec::default(),
    };
    net.validate()?;
    Ok(net)
}

/// Network and weights, plus a tag naming where the weights came from.
fn load_model(weights: Option<&Path>, net: Option<&Path>, seed: u64) -> Result<(VirConvNetSpec, NetWeights, String)> {
    match weights {
        Some(path) => {
            if net.is_some() {
                bail!("--net and --weights are exclusive: the checkpoint manifest fixes the network");
            }
            let (net, w) = checkpoint::load(path)?;
            let digest = config_hash(&checkpoint::encode(&w));
            Ok((net, w, format!("checkpoint:{digest}")))
        }
        None => {
            let net = load_net(net)?;
            let w = NetWeights::glorot(&net, &mut SeededRng::new(seed))?;
            Ok((net, w, format!("glorot:{seed}")))
        }
    }
}

fn load_cloud(lidar: &Path, virtual_points: Option<&Path>) -> Result<SparsePointCloud> {
    let l = read_velodyne_bin(lidar)?;
    let v = match virtual_points {
        Some(p) => read_virtual_bin(p)?,
        None => SparsePointCloud::default(),
    };
    Ok(fuse_early(&l, &v)?)
}

#[derive(Serialize)]
struct LevelSummary {
    level: usize,
    stride: u32,
    voxels: usize,
    width: usize,
    checksum: String,
}

#[derive(Serialize)]
struct ForwardSummary {
    format: &'static str,
    version: u32,
    seed: u64,
    config_hash: String,
    input_points: usize,
    input_voxels: usize,
    after_input_stvd: usize,
    empty_scene: bool,
    levels: Vec<LevelSummary>,
}

fn cmd_forward(a: ForwardArgs) -> Result<()> {
    let calib = Calibration::from_kitti_file(&a.calib)?;
    let cloud = load_cloud(&a.lidar, a.virtual_points.as_deref())?;
    let (net, weights, source) = load_model(a.weights.as_deref(), a.net.as_deref(), a.seed)?;
    let stvd = (!a.no_stvd).then(StvdConfig::default);
    let hash = config_hash(&(&net, &stvd, &source));
    let mut rng = SeededRng::new(a.seed);
    let out = virconvnet_forward(
        &cloud,
        &net,
        stvd.as_ref(),
        &calib,
        &AugmentationRecord::identity(),
        &weights,
        &mut rng,
        false,
    )?;
    let summary = ForwardSummary {
        format: "virconv.forward",
        version: FORWARD_VERSION,
        seed: a.seed,
        config_hash: hash,
        input_points: cloud.len(),
        input_voxels: out.input_voxels,
        after_input_stvd: out.after_input_stvd,
        empty_scene: out.empty_scene,
        levels: out
            .levels
            .iter()
            .enumerate()
            .map(|(i, t)| LevelSummary {
                level: i + 1,
                stride: t.spec().stride_level,
                voxels: t.len(),
                width: t.width(),
                checksum: t.checksum(),
            })
            .collect(),
    };
    for t in &out.timings {
        eprintln!("{:>12} {:9.2} ms", t.stage, t.ms);
    }
    match &a.out {
        None => print!("{}", to_json(&summary)),
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            write_file(&dir.join("summary.json"), to_json(&summary).as_bytes())?;
            if a.dump {
                for (i, t) in out.levels.iter().enumerate() {
                    write_file(&dir.join(format!("level{}.json", i + 1)), to_json(&t.to_dump()).as_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (cloud, calib, scenario) = match &a.scene {
        Some(dir) => {
            let scene = read_scene(dir)?;
            (scene.fused(), scene.calib.clone(), dir.display().to_string())
        }
        None => {
            let calib = Calibration::synthetic_kitti();
            let scene = generate_scene(&a.preset.spec(), &calib, a.seed)?;
            let name = a.preset.to_possible_value().expect("named preset").get_name().to_string();
            (scene.fused(), calib, name)
        }
    };
    let (net, weights, _) = load_model(a.weights.as_deref(), a.net.as_deref(), a.seed)?;
    let cfg = BenchConfig {
        rates: a.sweep_rates,
        repeats: a.repeats,
        seed: a.seed,
        stvd: StvdConfig::default(),
        net,
    };
    let rows = bench_stvd_sweep(&scenario, &cloud, &calib, &weights, &cfg)?;
    for r in &rows {
        if r.remeasured > 0 {
            eprintln!("warning: rate {}: {} clock anomalies re-measured", r.rate, r.remeasured);
        }
    }
    let mut buf = Vec::new();
    write_csv(&mut buf, &rows)?;
    match &a.csv {
        Some(p) => write_file(p, &buf),
        None => Ok(std::io::stdout().write_all(&buf)?),
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let mut cfg = GradcheckConfig::new(a.op, a.seed);
    cfg.size = a.size;
    cfg.probes = a.probes;
    cfg.corrupt_weight_grad = a.corrupt_weight_grad;
    let r = run_gradcheck(&cfg)?;
    if a.json {
        print!("{}", to_json(&r));
    } else {
        println!(
            "{} seed={} size={} probes={} max_rel_error={:.3e} tolerance={:.0e} {}",
            r.op,
            r.seed,
            r.size,
            r.probes,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(r.passed)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec: SyntheticSceneSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => a.preset.spec(),
    };
    let calib = match &a.calib {
        Some(p) => Calibration::from_kitti_file(p)?,
        None => Calibration::synthetic_kitti(),
    };
    let scene = generate_scene(&spec, &calib, a.seed)?;
    write_scene(&a.out, &scene)?;
    eprintln!(
        "{}: {} lidar, {} virtual ({} displaced) points",
        a.out.display(),
        scene.lidar.len(),
        scene.virtual_points.len(),
        scene.noise_count()
    );
    Ok(())
}

fn cmd_stvd_stats(a: StatsArgs) -> Result<()> {
    let cloud = match (&a.scene, &a.lidar) {
        (Some(dir), _) => read_scene(dir)?.fused(),
        (None, Some(l)) => load_cloud(l, a.virtual_points.as_deref())?,
        (None, None) => bail!("either --scene or --lidar is required"),
    };
    let net = load_net(a.net.as_deref())?;
    let d = StvdConfig::default();
    let cfg = StvdConfig {
        num_bins: a.bins.unwrap_or(d.num_bins),
        nearby_limit: a.nearby_limit.unwrap_or(d.nearby_limit),
        keep_per_nearby_bin: a.keep_per_bin.unwrap_or(d.keep_per_nearby_bin),
        bin_range: a.bin_range.unwrap_or(d.bin_range),
        mode: match a.mode {
            ModeArg::Auto => None,
            ModeArg::AllVoxels => Some(StvdMode::AllVoxels),
            ModeArg::VirtualOnly => Some(StvdMode::VirtualOnly),
        },
        ..d
    };
    cfg.validate()?;
    let tensor = virconv::geometry::voxelize(&cloud, &net.grid)?;
    let kept = input_stvd(&tensor, &cfg, &mut SeededRng::new(a.seed))?;
    let before = bin_histogram(&tensor, &cfg);
    let after = bin_histogram(&kept, &cfg);
    let hash = config_hash(&(&cfg, &net.grid));

    let mut out = String::new();
    out += &format!(
        "# virconv stvd_stats version={STVD_STATS_VERSION} seed={} config_hash={hash}\n",
        a.seed
    );
    out += "bin_index,bin_lo_m,bin_hi_m,count_before,count_after\n";
    for (b, (lo, hi)) in before.bounds.iter().enumerate() {
        out += &format!("{b},{lo},{hi},{},{}\n", before.counts[b], after.counts[b]);
    }
    match &a.out {
        Some(p) => write_file(p, out.as_bytes()),
        None => Ok(std::io::stdout().write_all(out.as_bytes())?),
    }
}

#[derive(Serialize)]
struct FuseManifest {
    format: &'static str,
    version: u32,
    seed: Option<u64>,
    config_hash: String,
    lidar_points: usize,
    virtual_points: usize,
    total_points: usize,
}

fn cmd_fuse(a: FuseArgs) -> Result<()> {
    let l = read_velodyne_bin(&a.lidar)?;
    let v = read_virtual_bin(&a.virtual_points)?;
    let fused = fuse_early(&l, &v)?;
    write_fused_bin(&a.out, &fused)?;
    let manifest = FuseManifest {
        format: "virconv.fused",
        version: 1,
        seed: None,
        config_hash: config_hash(&("fuse_early", virconv::geometry::kitti::FUSED_RECORD_BYTES)),
        lidar_points: l.len(),
        virtual_points: v.len(),
        total_points: fused.len(),
    };
    write_file(&a.out.with_extension("json"), to_json(&manifest).as_bytes())?;
    eprintln!("{}: {} + {} = {} points", a.out.display(), l.len(), v.len(), fused.len());
    Ok(())
}

fn cmd_init_weights(a: InitArgs) -> Result<()> {
    let net = load_net(a.net.as_deref())?;
    let weights = NetWeights::glorot(&net, &mut SeededRng::new(a.seed))?;
    let m = checkpoint::save(&a.out, &net, &weights, Some(a.seed))?;
    eprintln!("{}: {} kernels, {} parameters", a.out.display(), m.kernels.len(), m.num_params);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    match cli.command {
        Command::Forward(a) => cmd_forward(a)?,
        Command::BenchStvd(a) => cmd_bench(a)?,
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(a)? {
                return Ok(ExitCode::from(EXIT_FAILED_CHECK));
            }
        }
        Command::Synth(a) => cmd_synth(a)?,
        Command::StvdStats(a) => cmd_stvd_stats(a)?,
        Command::Fuse(a) => cmd_fuse(a)?,
        Command::InitWeights(a) => cmd_init_weights(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_PARSE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
