use clap::Parser;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CSPFLOW_LOG", "info")).init();
    cspflow_cli::commands::run(cspflow_cli::commands::Cli::parse())
}
