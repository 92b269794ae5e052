use std::process::ExitCode;

use clap::Parser;
use rydberg_vmc_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e.to_string().lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
            eprintln!("error[{}]: {}", e.class(), msg.join(" "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
