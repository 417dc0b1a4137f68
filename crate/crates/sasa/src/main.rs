use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match sasa::cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Help and version requests are not failures.
            if let Some(ce) = e.downcast_ref::<clap::Error>() {
                if !ce.use_stderr() {
                    print!("{ce}");
                    return ExitCode::SUCCESS;
                }
            }
            eprintln!("{}", sasa::cli::error_line(&e));
            ExitCode::from(2)
        }
    }
}
