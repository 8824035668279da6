use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, ValueEnum};
use memscope_core::{RunFilter, RunStatus};

use crate::{output, GlobalArgs};

#[derive(Args, Debug)]
pub struct RunsArgs {
    /// Only runs with this status
    #[arg(long, value_parser = ["recording", "closed", "aborted"])]
    pub status: Option<String>,

    /// Only runs of this model
    #[arg(long)]
    pub model: Option<String>,

    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    pub run_id: String,

    /// Print JSON instead of tables
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ExportFormat {
    Csv,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    pub run_id: String,

    #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
    pub format: ExportFormat,

    /// Output file; standard output when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn runs(global: &GlobalArgs, args: RunsArgs) -> anyhow::Result<ExitCode> {
    let (registry, _) = global.open()?;
    let filter = RunFilter {
        status: args.status.as_deref().and_then(RunStatus::parse),
        model_name: args.model,
    };
    let runs = registry.list_runs(&filter)?;
    if args.json {
        println!("{}", serde_json::to_string(&runs)?);
    } else {
        print!("{}", output::runs_table(&runs));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn report(global: &GlobalArgs, args: ReportArgs) -> anyhow::Result<ExitCode> {
    let (registry, store) = global.open()?;
    let report = output::report_json(&registry, &store, &args.run_id)?;
    if args.json {
        println!("{report}");
    } else {
        print!("{}", output::report_text(&report));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn export(global: &GlobalArgs, args: ExportArgs) -> anyhow::Result<ExitCode> {
    let (registry, store) = global.open()?;
    registry.get(&args.run_id)?;
    let rows = match (&args.format, &args.out) {
        (ExportFormat::Csv, Some(path)) => store
            .export_csv_to_path(&args.run_id, path)
            .with_context(|| format!("cannot write {}", path.display()))?,
        (ExportFormat::Csv, None) => {
            let mut stdout = std::io::stdout().lock();
            let rows = store.export_csv(&args.run_id, &mut stdout)?;
            stdout.flush()?;
            rows
        }
    };
    if let Some(path) = &args.out {
        eprintln!("wrote {rows} samples to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
