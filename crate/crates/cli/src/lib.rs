//! `flatdino` command-line driver.

pub mod commands;
pub mod config;

use flatdino::{Category, Error};

pub use config::{parse_config, Cli, Command, RunConfig, Settings};

pub fn exit_code(category: Category) -> i32 {
    match category {
        Category::Config => 2,
        Category::Format => 3,
        Category::Numeric => 4,
        Category::Training => 5,
        Category::Io => 6,
    }
}

pub fn category_name(category: Category) -> &'static str {
    match category {
        Category::Config => "config",
        Category::Format => "format",
        Category::Numeric => "numeric",
        Category::Training => "training",
        Category::Io => "io",
    }
}

pub fn report_error(e: &Error) -> i32 {
    let c = e.category();
    eprintln!("flatdino: {e} [{}]", category_name(c));
    exit_code(c)
}

/// Runs the configured command, returning the process exit code.
pub fn dispatch(rc: &RunConfig) -> i32 {
    match commands::run(rc) {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}
