use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use log::{error, info};
use sleeploop::session::{data_dir_from_env, run_headless, RunOptions, SessionConfig, SessionManager, DATA_DIR_ENV};

/// Closed-loop sleep modulation engine with an HTTP control plane.
#[derive(Debug, Parser)]
#[command(version, after_help = format!("Session folders are written under ${DATA_DIR_ENV} (default ./sleeploop-data)."))]
struct Args {
    /// Session config (TOML, or JSON by extension). Started at launch when given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Address for the control API.
    #[arg(long, default_value = "127.0.0.1:8787")]
    listen: SocketAddr,
    /// Run the config to completion without serving, print a summary and exit.
    #[arg(long, requires = "config")]
    headless: bool,
}

fn headless(cfg: SessionConfig) -> ExitCode {
    let data_dir = data_dir_from_env();
    match run_headless(cfg, &data_dir, RunOptions::default()) {
        Ok(s) => {
            let missed = s.stims.iter().filter(|e| e.is_missed()).count();
            println!("session dir   {}", s.session_dir.display());
            println!("epochs        {}", s.hypnogram.len());
            println!("sleep onset   {}", s.status.onset_epoch.map_or("none".into(), |e| format!("epoch {e}")));
            println!("stimuli       {} delivered, {missed} missed", s.stims.len() - missed);
            println!("recording     {:.0} s in {:.2} s wall ({:.0}x)", s.graph_secs, s.wall_secs, s.graph_secs / s.wall_secs);
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}

async fn serve(args: Args, config: Option<SessionConfig>) -> ExitCode {
    let manager = Arc::new(SessionManager::new(data_dir_from_env()));
    if let Some(cfg) = config {
        let m = Arc::clone(&manager);
        match tokio::task::spawn_blocking(move || m.start(cfg)).await {
            Ok(Ok(report)) => info!("session {:?} {:?}", report.session_id, report.state),
            Ok(Err(e)) => {
                error!("{e}");
                return ExitCode::FAILURE;
            }
            Err(e) => {
                error!("{e}");
                return ExitCode::FAILURE;
            }
        }
    }
    let listener = match tokio::net::TcpListener::bind(args.listen).await {
        Ok(l) => l,
        Err(e) => {
            error!("cannot listen on {}: {e}", args.listen);
            return ExitCode::FAILURE;
        }
    };
    info!("listening on {}", args.listen);
    let app = sleeploop_server::router(Arc::clone(&manager));
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
        error!("{e}");
        return ExitCode::FAILURE;
    }
    // stop any running session so its files are complete
    let _ = tokio::task::spawn_blocking(move || manager.stop()).await;
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let config = match args.config.as_deref().map(SessionConfig::load).transpose() {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return ExitCode::FAILURE;
        }
    };
    if args.headless {
        return headless(config.expect("clap requires --config"));
    }
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            error!("cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    runtime.block_on(serve(args, config))
}
