//! Command-line entry points: control renders, dataset curation, headless
//! generation and edits, the scalability benchmark, and the servers.

pub mod bench;
mod cmd;
pub mod curate;
pub mod error;

use clap::Parser;

pub use cmd::{run, Cli, Command, ModeArg};
pub use error::CliError;

/// Parses the process arguments, runs the command and returns the exit
/// code.
pub fn main_with_env() -> i32 {
    main_from(std::env::args_os())
}

/// Same as [`main_with_env`] with explicit arguments, the first being the
/// program name.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::parse_from(args);
    let default_level = match cli.command {
        Command::Serve { .. } | Command::ServeToy { .. } => "info",
        _ => "warn",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
