use clap::Parser;
use subpipe_cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    println!("{}", run(&cli)?);
    Ok(())
}
