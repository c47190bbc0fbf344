use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unimamba::backbone::synthetic_scene;
use unimamba::bench::{serialize_bench, BenchOptions};
use unimamba::check::{self, CheckOptions, Suite};
use unimamba::container::{
    read_point_cloud_file, read_voxel_tensor, write_atomic, write_bev, write_voxel_tensor,
};
use unimamba::persist::{load_backbone, save_backbone};
use unimamba::{
    backbone_forward, BackboneConfig, BackboneParams, Curve, Error, VoxelizationConfig,
};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_PROPERTY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "unimamba",
    version,
    about = "Sparse voxel serialization, scans and backbone forward passes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bin a point cloud (PCB1 or CSV) into an SVT1 sparse voxel tensor.
    Voxelize(VoxelizeArgs),
    /// Time curve serialization on a seeded synthetic scene.
    SerializeBench(BenchArgs),
    /// Run the backbone and write the BEV1 feature map.
    Forward(ForwardArgs),
    /// Run oracle property suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct VoxelizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// xmin,ymin,zmin,xmax,ymax,zmax in metres.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-54.0, -54.0, -5.0, 54.0, 54.0, 3.0])]
    range: Vec<f64>,
    /// x,y,z voxel edge in metres.
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.3, 0.25])]
    voxel_size: Vec<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 20_000)]
    voxels: usize,
    #[arg(long, value_delimiter = ',', default_value = "zorder-x,hilbert")]
    curves: Vec<Curve>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 31)]
    repetitions: usize,
    /// Write the report as CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Directory receiving one `order-<curve>.csv` per curve.
    #[arg(long)]
    dump_orders: Option<PathBuf>,
}

#[derive(Args)]
struct ForwardArgs {
    /// `key = value` backbone config; defaults to the nuScenes setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// SVT1 input tensor.
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    input: Option<PathBuf>,
    /// Generate this many uniformly placed voxels instead of reading input.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Grid for synthetic scenes.
    #[arg(long, value_delimiter = ',', default_values_t = [360, 360, 32])]
    grid: Vec<u32>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: PathBuf,
    /// Print per-stage voxel counts, feature norms and wall-clock.
    #[arg(long)]
    stats: bool,
    /// Load parameters from an MLP1 file instead of seeding them.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Save the parameters used to an MLP1 file.
    #[arg(long)]
    save_params: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Format { .. } => EXIT_IO,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: msg.into(),
    }
}

fn expect_len<T>(v: &[T], n: usize, flag: &str) -> Result<(), Failure> {
    if v.len() == n {
        Ok(())
    } else {
        Err(usage(format!(
            "--{flag} takes {n} comma-separated values, got {}",
            v.len()
        )))
    }
}

fn voxelize(a: VoxelizeArgs) -> Result<(), Failure> {
    expect_len(&a.range, 6, "range")?;
    expect_len(&a.voxel_size, 3, "voxel-size")?;
    let cfg = VoxelizationConfig::new(
        [a.range[0], a.range[1], a.range[2]],
        [a.range[3], a.range[4], a.range[5]],
        [a.voxel_size[0], a.voxel_size[1], a.voxel_size[2]],
    )?;
    let cloud = read_point_cloud_file(&a.input)?;
    let t = unimamba::voxelize(&cloud, &cfg);
    write_atomic(&a.output, |w| write_voxel_tensor(w, &t))?;
    let cells: u64 = cfg.grid_shape.iter().map(|&g| g as u64).product();
    println!("points: {}", cloud.len());
    println!("voxels: {}", t.len());
    println!("grid: {:?}", cfg.grid_shape);
    println!("occupancy: {:.6}%", 100.0 * t.len() as f64 / cells as f64);
    if !cloud.is_empty() {
        println!(
            "points per voxel: {:.3}",
            cloud.len() as f64 / t.len().max(1) as f64
        );
    }
    if t.is_empty() {
        eprintln!("warning: no points fell inside the range; wrote an empty tensor");
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    let opts = BenchOptions {
        voxels: a.voxels,
        curves: a.curves,
        seed: a.seed,
        repetitions: a.repetitions,
        ..BenchOptions::default()
    };
    let report = serialize_bench(&opts)?;
    print!("{}", report.table());
    if let Some(path) = &a.out_csv {
        write_atomic(path, |w| report.write_csv(w))?;
    }
    if let Some(dir) = &a.dump_orders {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
        for r in &report.rows {
            write_atomic(&dir.join(format!("order-{}.csv", r.curve.name())), |w| {
                r.order.write_csv(w)
            })?;
        }
    }
    if report.rows.iter().any(|r| !r.valid) {
        return Err(Failure {
            code: EXIT_PROPERTY,
            msg: "a curve produced an invalid permutation".into(),
        });
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<BackboneConfig, Failure> {
    match path {
        None => Ok(BackboneConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(Error::from)?;
            Ok(BackboneConfig::parse(&text)?)
        }
    }
}

fn forward(a: ForwardArgs) -> Result<(), Failure> {
    expect_len(&a.grid, 3, "grid")?;
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let input = match (&a.input, a.synthetic) {
        (Some(path), _) => {
            read_voxel_tensor(BufReader::new(File::open(path).map_err(Error::from)?))?
        }
        (None, Some(n)) => {
            synthetic_scene(n, [a.grid[0], a.grid[1], a.grid[2]], cfg.channels, cfg.seed)?
        }
        (None, None) => return Err(usage("either --input or --synthetic is required")),
    };
    if input.channels() != cfg.channels {
        return Err(usage(format!(
            "invalid config key `channels`: input has {} channels, config has {}",
            input.channels(),
            cfg.channels
        )));
    }
    let params = match &a.params {
        Some(path) => load_backbone(path, &cfg)?,
        None => BackboneParams::init(&cfg)?,
    };
    if let Some(path) = &a.save_params {
        save_backbone(path, &params)?;
    }
    let out = backbone_forward(&input, &params)?;
    write_atomic(&a.output, |w| write_bev(w, &out.bev))?;
    let [x, y, c] = out.bev.shape;
    println!("input voxels: {}", input.len());
    println!("bev shape: ({x}, {y}, {c})");
    if a.stats {
        println!(
            "{:<12} {:>8} {:>18} {:>14} {:>10}",
            "stage", "voxels", "grid", "feature norm", "ms"
        );
        for s in &out.stats {
            println!(
                "{:<12} {:>8} {:>18} {:>14.6e} {:>10.1}",
                s.name,
                s.voxels,
                format!("{:?}", s.grid_shape),
                s.feature_norm,
                s.elapsed.as_secs_f64() * 1e3
            );
        }
    }
    Ok(())
}

fn run_check(a: CheckArgs) -> Result<(), Failure> {
    let results = check::run(
        a.suite,
        &CheckOptions {
            seed: a.seed,
            ..CheckOptions::default()
        },
    );
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        return Err(Failure {
            code: EXIT_PROPERTY,
            msg: format!("{failed} properties failed"),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = unimamba::init_threads_from_env() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match cli.command {
        Command::Voxelize(a) => voxelize(a),
        Command::SerializeBench(a) => bench(a),
        Command::Forward(a) => forward(a),
        Command::Check(a) => run_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
