use clap::Parser;
use poe_service::{run, Cli, ExitStatus};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POE_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let status = if e.use_stderr() { ExitStatus::Validation } else { ExitStatus::Ok };
            let _ = e.print();
            std::process::exit(status as i32);
        }
    };
    std::process::exit(run(cli) as i32);
}
