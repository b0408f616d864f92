use clap::Parser;

fn main() {
    let cli = cpl::cli::Cli::parse();
    let code = match cpl::cli::dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
