use clap::{CommandFactory, FromArgMatches};
use cmg_cli::{run, Cli, CliError};

fn main() {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        if let CliError::Usage(_) = e {
            let mut cmd = Cli::command();
            cmd.build();
            let usage = match matches
                .subcommand_name()
                .and_then(|n| cmd.find_subcommand_mut(n))
            {
                Some(sub) => sub.render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("\n{usage}\n\nFor more information, try '--help'.");
        }
        std::process::exit(e.exit_code());
    }
}
