use clap::Parser;
use gaussify::cli::{run, Cli};

fn main() {
    match run(Cli::parse()) {
        Ok(out) => println!("{}", out.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
