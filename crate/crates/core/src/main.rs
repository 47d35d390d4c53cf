use clap::Parser;
use scoreflow::cli::{run, Cli};
use scoreflow::Error;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap exits with 2 for usage errors by default; we reserve 2
            // for numeric failures, so print and map to 1 ourselves. Help
            // and version requests still exit 0.
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Numeric(_) | Error::Cfl(_) => 2,
            _ => 1,
        };
        std::process::exit(code);
    }
}
