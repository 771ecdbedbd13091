use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seamosaic_core::synthetic::SynthConfig;
use seamosaic_pipeline::{run, RunConfig, RunOptions, RunReport};

#[derive(Parser)]
#[command(name = "seamosaic", version, about = "Real-time underwater mosaicing and planar point-cloud mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a dataset described by a key = value config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Do not pace acquisition at the configured frame rate.
        #[arg(long)]
        fast: bool,
        /// Terminate on tracking loss instead of waiting for a restart.
        #[arg(long)]
        batch: bool,
        /// Serve the WebSocket stream on this address, e.g. 127.0.0.1:9001.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Render a synthetic dataset with ground truth and a ready-to-run config.
    Synth {
        /// Scene file; the COMEX-like preset when omitted.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the report of a finished run.
    Report { run_dir: PathBuf },
}

fn synth(scene: Option<&Path>, out: &Path) -> Result<(), String> {
    let cfg = match scene {
        Some(p) => SynthConfig::from_file(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => SynthConfig::comex(),
    };
    let seq = cfg.render().map_err(|e| e.to_string())?;
    seq.write(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let run_cfg = "camera = camera.txt\n\
                   images = images\n\
                   input = replay_with_trajectory\n\
                   trajectory = trajectory.txt\n\
                   ahrs = ahrs.txt\n\
                   markers = markers.txt\n\
                   truth_trajectory = trajectory.txt\n";
    let run_cfg = format!("{run_cfg}fps = {:?}\n", cfg.trajectory.frame_rate);
    let path = out.join("run.cfg");
    std::fs::write(&path, run_cfg).map_err(|e| format!("{}: {e}", path.display()))?;
    println!("wrote {} frames to {}", seq.len(), out.display());
    Ok(())
}

fn report(dir: &Path) -> Result<(), String> {
    let path = dir.join("report.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let r = RunReport::parse(&text).map_err(|e| e.to_string())?;
    print!("{text}");
    if !r.is_consistent() {
        return Err("report counts are inconsistent".into());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            fast,
            batch,
            listen,
        } => RunConfig::from_file(&config).and_then(|mut c| {
            if listen.is_some() {
                c.listen = listen;
            }
            let out = run(&c, RunOptions { fast, batch, hub: None })?;
            print!("{}", out.report.to_text());
            println!("products in {}", out.run_dir.display());
            if out.report.terminated_on_loss {
                eprintln!("run terminated after tracking loss");
                return Ok(false);
            }
            Ok(true)
        })
        .map_err(|e| e.to_string()),
        Command::Synth { scene, out } => synth(scene.as_deref(), &out).map(|_| true),
        Command::Report { run_dir } => report(&run_dir).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
