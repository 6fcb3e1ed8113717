use std::io::Write;

use clap::Parser;
use dice_cli::{run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(&cli) {
        Ok(msg) => {
            // A closed pipe (`dice ... | head`) is not an error.
            let _ = writeln!(std::io::stdout(), "{msg}");
        }
        Err(e) => {
            eprintln!("dice: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
