use clap::Parser;
use mvprior_cli::Cli;

fn main() {
    let cli = Cli::parse();
    match mvprior_cli::run(&cli) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
