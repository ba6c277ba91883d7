//! `peel`: batch front-end for layer planning.
//!
//! Exit codes: 0 for a VALID plan or a clean check, 2 for an INVALID plan or
//! a check with findings (the full report is still written), 1 for errors.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use peel_core::layers::LayerSpec;
use peel_core::planner::{check_scalar, compare_strategies, parse_scalar, run_plan, write_plan_dir, PlanConfig};
use peel_core::{load_mesh, save_mesh, scenes, MeshFormat, PeelSide, TetMesh, TriMesh};

#[derive(Parser)]
#[command(name = "peel", version, about = "Curved peeling layers for multi-axis rough machining")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a plan and write it to a directory.
    Plan {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit a scalar field for interior extrema and floating volumes.
    Check {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        scalar: PathBuf,
        /// Number of layers to audit.
        #[arg(long, default_value_t = 10, conflicts_with = "depth")]
        layers: usize,
        /// Layer spacing instead of a count.
        #[arg(long)]
        depth: Option<f64>,
        #[arg(long, value_enum, default_value_t = Side::RemoveAbove)]
        side: Side,
        /// Report path; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare cutting depth across plan configs.
    Compare {
        #[arg(long)]
        mesh: PathBuf,
        /// Part surface (OBJ or STL). Defaults to the PART faces of the mesh.
        #[arg(long)]
        part: Option<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Static client files served at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Write one of the bundled demo meshes with its tags and part surface.
    Demo {
        #[arg(long, value_enum)]
        scene: Scene,
        #[arg(long, default_value_t = 4)]
        n: usize,
        /// Mesh path; `.vtk` for legacy VTK, anything else for TetGen.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    RemoveAbove,
    RemoveBelow,
}

impl From<Side> for PeelSide {
    fn from(s: Side) -> Self {
        match s {
            Side::RemoveAbove => PeelSide::RemoveAbove,
            Side::RemoveBelow => PeelSide::RemoveBelow,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scene {
    UnitCube,
    Cup,
    Freeform,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Worker cap from `PEEL_THREADS`.
fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("PEEL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => bail!("PEEL_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(None),
    }
}

fn read_mesh(path: &Path) -> Result<TetMesh> {
    let format = MeshFormat::from_path(path).with_context(|| format!("unknown mesh format for {}", path.display()))?;
    load_mesh(path, format).with_context(|| format!("loading {}", path.display()))
}

fn read_part(path: &Path) -> Result<TriMesh> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let part = match path.extension().and_then(|e| e.to_str()) {
        Some("stl") => TriMesh::from_stl(&bytes)?,
        _ => TriMesh::from_obj(std::str::from_utf8(&bytes).context("part OBJ is not UTF-8")?)?,
    };
    Ok(part)
}

fn status(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    let threads = thread_cap()?;
    match cmd {
        Command::Plan { mesh, config, out } => {
            let m = read_mesh(&mesh)?;
            let cfg = PlanConfig::load(&config)?;
            let plan = run_plan(&m, &cfg)?;
            write_plan_dir(&plan, &out)?;
            let v = &plan.validity;
            println!("{} {:?} layers={} dir={}", plan.config.label(), v.status, plan.layers.layers.len(), out.display());
            for r in &v.reasons {
                println!("  {r}");
            }
            Ok(status(plan.is_valid()))
        }
        Command::Check { mesh, scalar, layers, depth, side, out } => {
            let m = read_mesh(&mesh)?;
            let text = fs::read_to_string(&scalar).with_context(|| format!("reading {}", scalar.display()))?;
            let g = parse_scalar(&text)?;
            let spec = match depth {
                Some(d) => LayerSpec::TargetDepth(d),
                None => LayerSpec::LayerCount(layers),
            };
            let report = check_scalar(&m, &g, spec, side.into())?;
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            match out {
                Some(p) => fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{json}"),
            }
            for s in &report.interior_extrema {
                eprintln!("interior {:?} at vertex {}", s.kind, s.vertex);
            }
            for v in &report.violations {
                eprintln!("floating volume at iso-value {:e}: {} tets", v.iso_value, v.tet_count);
            }
            Ok(status(report.clean))
        }
        Command::Compare { mesh, part, configs, out } => {
            let m = read_mesh(&mesh)?;
            let part = match part {
                Some(p) => read_part(&p)?,
                None => scenes::part_surface(&m),
            };
            let cfgs = configs.iter().map(|p| PlanConfig::load(p)).collect::<Result<Vec<_>, _>>()?;
            let report = compare_strategies(&m, &part, &cfgs)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let table = report.to_table();
            fs::write(out.join("comparison.txt"), &table)?;
            let mut json = serde_json::to_string_pretty(&report)?;
            json.push('\n');
            fs::write(out.join("comparison.json"), json)?;
            print!("{table}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { port, host, ui_dir } => {
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad listen address")?;
            let mut rt = tokio::runtime::Builder::new_multi_thread();
            if let Some(n) = threads {
                rt.worker_threads(n).max_blocking_threads(n);
            }
            rt.enable_all().build()?.block_on(peel_service::serve(addr, ui_dir))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Demo { scene, n, out } => {
            let m = match scene {
                Scene::UnitCube => scenes::unit_cube_scene(n),
                Scene::Cup => scenes::cup_scene(n),
                Scene::Freeform => scenes::freeform_scene(n),
            };
            let format = match out.extension().and_then(|e| e.to_str()) {
                Some("vtk") => MeshFormat::VtkLegacy,
                _ => MeshFormat::TetgenNodeEle,
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            save_mesh(&m, &out, format)?;
            let part = out.with_extension("part.obj");
            fs::write(&part, scenes::part_surface(&m).to_obj())?;
            println!("{} tets, part surface {}", m.num_tets(), part.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
