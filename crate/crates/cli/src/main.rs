use clap::Parser;

fn main() -> std::process::ExitCode {
    match albumseq_cli::run(albumseq_cli::Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
