mod args;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde::{Deserialize, Serialize};

use lowrank::{data, Error};

use args::{Cli, Command};

const VERSION: &str = env!("LOWRANK_DESCRIBE");

/// Written next to the first output of every run.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    version: String,
    seed: Option<u64>,
    #[serde(flatten)]
    command: Command,
    outputs: Vec<PathBuf>,
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        2
    } else {
        1
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("LOWRANK_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Contract(format!("LOWRANK_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))
}

fn load_manifest(path: &Path) -> Result<Command, Error> {
    let bytes = std::fs::read(path)?;
    let m: RunManifest = serde_json::from_slice(&bytes).map_err(|e| Error::InvalidField {
        offset: e.column(),
        reason: format!("manifest line {}: {e}", e.line()),
    })?;
    Ok(m.command)
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    let command = match (cli.manifest, cli.command) {
        (Some(path), _) => load_manifest(&path)?,
        (None, Some(cmd)) => cmd,
        (None, None) => return Err(Error::Contract("missing subcommand; see --help".into())),
    };
    let outcome = run::execute(&command)?;
    let mut line = outcome.summary;
    if let Some(first) = outcome.outputs.first() {
        let manifest = RunManifest {
            version: VERSION.into(),
            seed: command.seed(),
            command: command.clone(),
            outputs: outcome.outputs.clone(),
        };
        let mpath = manifest_path(first);
        let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        json.push(b'\n');
        data::write_atomic(&mpath, &json)?;
        let paths: Vec<String> = outcome.outputs.iter().map(|p| p.display().to_string()).collect();
        line = format!("{line} -> {} (manifest {})", paths.join(", "), mpath.display());
    }
    println!("{line}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
