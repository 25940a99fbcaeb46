use stencilforge::cli;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = match cli::parse_args(&args) {
        Ok(cfg) => cli::run(&cfg),
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", cli::USAGE);
            cli::EXIT_CONFIG
        }
    };
    std::process::exit(code);
}
