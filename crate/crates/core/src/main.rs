use std::process::ExitCode;

use clap::Parser;
use mixdiff::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            if !cli.quiet {
                for line in &summary.messages {
                    println!("{line}");
                }
                println!(
                    "{}: wrote {} artifacts to {}",
                    summary.command.name(),
                    summary.manifest.len(),
                    summary.out_dir.display()
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let cat = e.category();
            eprintln!("error [{cat}]: {e}");
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
