mod config;
mod run;

use std::process::ExitCode;

use clap::Parser;
use mlgee::ErrorKind;

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = config::Args::parse();
    let result = args.resolve().and_then(|cfg| {
        if let Some(n) = args.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| mlgee::Error::Config(format!("thread pool: {e}")))?;
        }
        run::run(&cfg, args.out.as_deref())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mlgee: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
