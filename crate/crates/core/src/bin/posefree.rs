use clap::Parser;
use posefree::cli::{run, Cli, EXIT_ERROR, EXIT_OK};

fn main() {
    let code = match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            // exit code 2 is reserved for partial reconstructions
            if e.use_stderr() { EXIT_ERROR } else { EXIT_OK }
        }
    };
    std::process::exit(code);
}
