use clap::Parser;
use flatdino_cli::{dispatch, parse_config, report_error, Cli};

fn main() {
    let cli = Cli::parse();
    let command_line = std::env::args().collect::<Vec<_>>().join(" ");
    let env: Vec<(String, String)> = std::env::vars().collect();
    let code = match parse_config(&cli, &command_line, &env) {
        Ok(rc) => dispatch(&rc),
        Err(e) => report_error(&e),
    };
    std::process::exit(code);
}
