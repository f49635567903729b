use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aet_core::error::ExperimentError;
use aet_core::experiment::{compare_files, init_threads_from_env, run_experiment_file, ExperimentSummary};
use aet_core::io::write_vtk;
use aet_core::mesh::{generate_disk_mesh, save_mesh};
use aet_core::phantom::{build_phantom, field_to_image, PhantomSpec};
use clap::{Parser, Subcommand};

/// Acousto-electric tomography experiments.
#[derive(Parser)]
#[command(name = "aet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Generate a disk mesh and write it in `aetmesh 1` format.
    Mesh {
        #[arg(long, default_value = "0.5")]
        radius: f64,
        /// Target mesh size, a number or a fraction such as `1/64`.
        #[arg(long, value_parser = parse_size)]
        h: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Evaluate a phantom on a mesh and write it as VTK (and optionally PGM).
    Phantom {
        /// TOML phantom description, or `default` for the built-in geometry phantom.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value = "0.5")]
        radius: f64,
        #[arg(long, value_parser = parse_size, default_value = "1/64")]
        h: f64,
        #[arg(short, long)]
        output: PathBuf,
        /// Also rasterize to an 8-bit ASCII PGM.
        #[arg(long)]
        pgm: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Run two configs and tabulate their results side by side.
    Compare {
        config_a: PathBuf,
        config_b: PathBuf,
        /// Write the comparison as JSON.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("invalid number `{a}`"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("invalid number `{b}`"))?;
            a / b
        }
        None => s.trim().parse().map_err(|_| format!("invalid number `{s}`"))?,
    };
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("`{s}` must be positive"))
    }
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn report(summary: &ExperimentSummary) {
    for r in &summary.runs {
        let psnr = r.psnr.db().map_or_else(|| "exact".into(), |v| format!("{v:.3}"));
        println!(
            "noise {:<6} n_delta {:>5}{} e_L1 {:.6} e_TV {:.6} PSNR {}",
            r.noise_level,
            r.n_delta,
            if r.converged { "" } else { " (not converged)" },
            r.e_l1,
            r.e_tv,
            psnr
        );
    }
    println!("outputs in {}", summary.config.output_dir.display());
}

fn load_phantom_spec(spec: &str) -> Result<(PhantomSpec, Option<PathBuf>), Failure> {
    if spec == "default" {
        return Ok((PhantomSpec::default(), None));
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {spec}: {e}")))?;
    let parsed: PhantomSpec = toml::from_str(&text).map_err(|e| Failure::Config(format!("{spec}: {e}")))?;
    Ok((parsed, path.parent().map(Path::to_path_buf)))
}

fn execute(cmd: Command) -> Result<bool, Failure> {
    match cmd {
        Command::Run { config } => {
            let summary = run_experiment_file(&config)?;
            report(&summary);
            Ok(summary.all_converged())
        }
        Command::Mesh { radius, h, output } => {
            let mesh = generate_disk_mesh(radius, h).map_err(|e| Failure::Config(e.to_string()))?;
            save_mesh(&mesh, &output).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("{} nodes, {} triangles -> {}", mesh.node_count(), mesh.triangle_count(), output.display());
            Ok(true)
        }
        Command::Phantom { spec, radius, h, output, pgm, size } => {
            let (spec, base) = load_phantom_spec(&spec)?;
            let mesh = generate_disk_mesh(radius, h).map_err(|e| Failure::Config(e.to_string()))?;
            let sigma = build_phantom(&mesh, &spec, base.as_deref()).map_err(|e| Failure::Config(e.to_string()))?;
            write_vtk(&output, &mesh, "phantom", &[("sigma", &sigma)], &[])
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            if let Some(p) = pgm {
                let range = [sigma.min_value().min(0.0), sigma.max_value()];
                let img = field_to_image(&mesh, &sigma, size, range).map_err(|e| Failure::Config(e.to_string()))?;
                img.save(&p).map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            println!(
                "phantom on {} nodes, values in [{}, {}]",
                mesh.node_count(),
                sigma.min_value(),
                sigma.max_value()
            );
            Ok(true)
        }
        Command::Compare { config_a, config_b, output } => {
            let (cmp, [a, b]) = compare_files(&config_a, &config_b)?;
            print!("{}", cmp.to_table());
            if let Some(p) = output {
                let text = serde_json::to_string_pretty(&cmp).map_err(|e| Failure::Runtime(e.to_string()))?;
                std::fs::write(&p, text + "\n").map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            Ok(a.all_converged() && b.all_converged())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // usage errors share exit code 1 with config errors; 2 means "not converged"
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads_from_env() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: iteration stopped at max_sweeps before the discrepancy principle was met");
            ExitCode::from(2)
        }
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
