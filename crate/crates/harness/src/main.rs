use clap::Parser;
use deskmoe_harness::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => println!("{out}"),
        Err(e) => {
            let record = serde_json::json!({ "error": e.code(), "message": e.to_string() });
            eprintln!("{record}");
            std::process::exit(1);
        }
    }
}
