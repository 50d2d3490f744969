use clap::Parser;
use renorm_cli::Cli;

fn main() -> anyhow::Result<()> {
    Cli::parse().run()
}
