mod args;
mod commands;
mod error;

use clap::Parser;
use log::LevelFilter;

use args::{Cli, Command};
use error::{exit, CliError};

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Warn,
        (false, 1) => LevelFilter::Info,
        (false, _) => LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("XMRBENCH_LOG")
        .format_timestamp(None)
        .init();
}

fn dispatch(command: &Command, verbosity: i8) -> Result<(), CliError> {
    match command {
        Command::Occlude(a) => commands::occlude(a),
        Command::ToyGen(a) => commands::toy_gen(a),
        Command::ToyTrain(a) => commands::toy_train(a),
        Command::Run(a) => commands::run(a, verbosity),
        Command::RandomBaseline(a) => commands::random_baseline(a),
        Command::InspectEmbeddings(a) => commands::inspect_embeddings(a),
        Command::ServeEmbedder(a) => commands::serve_embedder(a),
        Command::Conformance(a) => commands::conformance(a),
    }
}

fn main() {
    let cli = Cli::parse();
    init_logging(cli.verbose, cli.quiet);
    let verbosity = if cli.quiet { -1 } else { cli.verbose.min(2) as i8 };

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            std::process::exit(exit::USAGE);
        }
        pool = pool.num_threads(jobs);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            std::process::exit(exit::USAGE);
        }
    };

    let code = match pool.install(|| dispatch(&cli.command, verbosity)) {
        Ok(()) => exit::OK,
        Err(e) => {
            let message = e.to_string();
            log::error!("{message}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let cause = s.to_string();
                if !message.contains(&cause) {
                    log::error!("  caused by: {cause}");
                }
                source = s.source();
            }
            e.exit_code()
        }
    };
    std::process::exit(code);
}
