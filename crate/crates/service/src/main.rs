use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use recede_core::planner::PlannerKind;
use recede_core::task::{find_task, registry};
use recede_service::bench::{describe, run_benchmark, summary_path, BenchOptions, Mode};
use recede_service::server::{bind, Gateway, GatewayOptions};

#[derive(Parser)]
#[command(name = "recede", version, about = "Real-time predictive control: live server and headless benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a task live and serve telemetry/commands over WebSocket at /ws.
    Serve {
        #[arg(long, default_value = "pendulum-swingup")]
        task: String,
        /// Planner kind; defaults to the task's configured planner.
        #[arg(long)]
        planner: Option<PlannerKind>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Wall seconds per simulated second (>= 1).
        #[arg(long, default_value_t = 1.0)]
        slowdown: f64,
        /// Telemetry frames per wall second.
        #[arg(long, default_value_t = 30.0)]
        telemetry_hz: f64,
    },
    /// Run one headless episode and write per-step costs as CSV.
    Bench {
        #[arg(long, default_value = "pendulum-swingup")]
        task: String,
        #[arg(long)]
        planner: Option<PlannerKind>,
        /// Simulated seconds.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
        /// Plan a fixed number of iterations between steps (reproducible)
        /// instead of running the planner asynchronously in real time.
        #[arg(long)]
        sync: bool,
    },
    /// Print the built-in tasks.
    ListTasks,
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Cmd::ListTasks => {
            for task in registry() {
                println!("{:<20} {:<9} {}", task.name, task.planner.as_str(), task.description);
            }
        }
        Cmd::Bench {
            task,
            planner,
            duration,
            seed,
            out,
            sync,
        } => {
            let task = find_task(&task)?;
            let options = BenchOptions {
                planner: planner.unwrap_or(task.planner),
                task,
                duration,
                seed,
                mode: if sync { Mode::Sync } else { Mode::Async },
            };
            let summary = run_benchmark(&options, &out)?;
            println!("{}", describe(&summary));
            println!("steps: {}  summary: {}", out.display(), summary_path(&out).display());
        }
        Cmd::Serve {
            task,
            planner,
            port,
            slowdown,
            telemetry_hz,
        } => {
            let task = find_task(&task)?;
            let planner = planner.unwrap_or(task.planner);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let gateway = Gateway::start(task, planner, GatewayOptions { telemetry_hz, slowdown })?;
                let (addr, server) = bind(SocketAddr::from((Ipv4Addr::LOCALHOST, port)), gateway).await?;
                log::info!("listening on ws://{addr}/ws");
                println!("listening on ws://{addr}/ws");
                server.await?;
                Ok::<_, Box<dyn std::error::Error>>(())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
