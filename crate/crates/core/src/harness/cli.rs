use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::{
    describe, parse_prompt, report_action_distribution, report_compare, report_curve, report_diff, run_gateway, run_optimize,
    run_resume, HarnessError, RunConfig, RunDir,
};

#[derive(Debug, Parser)]
#[command(name = "treeprompt", version, about = "Structured long-prompt optimizer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an optimization described by a TOML config.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Continue the run in this directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Validate and print the prompt outline without model calls.
        #[arg(long)]
        dry_run: bool,
    },
    /// Continue a run from its latest checkpoint.
    Resume { run_dir: PathBuf },
    /// Recompute a report from a run directory.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
    /// Check a config without touching datasets or backends.
    ValidateConfig { config: PathBuf },
    /// Print the tree outline of a markdown prompt.
    Parse { prompt: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum ReportKind {
    /// Action-kind counts per step.
    Actions { run_dir: PathBuf },
    /// Best bandit mean per step.
    Curve { run_dir: PathBuf },
    /// Node-aligned diff between two candidates (default: initial vs best).
    Diff {
        run_dir: PathBuf,
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: Option<String>,
    },
    /// Judge how much of the initial prompt the best candidate preserves.
    Compare {
        run_dir: PathBuf,
        #[arg(long)]
        id: Option<String>,
    },
}

fn best_id(dir: &RunDir) -> Result<String, HarnessError> {
    dir.report()?
        .outcome
        .ranking
        .first()
        .map(|r| r.id.clone())
        .ok_or_else(|| HarnessError::Run("run has no ranking".into()))
}

fn report(kind: ReportKind, out: &mut dyn Write) -> Result<(), HarnessError> {
    match kind {
        ReportKind::Actions { run_dir } => {
            let table = report_action_distribution(&RunDir::open(&run_dir)?)?;
            let _ = write!(out, "{}", table.to_csv());
            if table.overall().empty {
                let _ = writeln!(out, "warning: no applied actions in this run");
            }
        }
        ReportKind::Curve { run_dir } => {
            for p in report_curve(&RunDir::open(&run_dir)?)? {
                let _ = writeln!(out, "{}\t{:.4}\t{}\t{}", p.step, p.best_mean, p.pool_size, p.created);
            }
        }
        ReportKind::Diff { run_dir, from, to } => {
            let dir = RunDir::open(&run_dir)?;
            let from = from.unwrap_or_else(|| "c0000".into());
            let to = match to {
                Some(t) => t,
                None => best_id(&dir)?,
            };
            let a = parse_prompt(&dir.candidate_text(&from)?)?;
            let b = parse_prompt(&dir.candidate_text(&to)?)?;
            let diff = report_diff(&a, &b);
            dir.write_json(&format!("diff-{from}-{to}.json"), &diff)?;
            let _ = write!(out, "{}", diff.render_text());
        }
        ReportKind::Compare { run_dir, id } => {
            let dir = RunDir::open(&run_dir)?;
            let id = match id {
                Some(i) => i,
                None => best_id(&dir)?,
            };
            let gateway = run_gateway(&dir)?;
            let scores = report_compare(&dir.candidate_text("c0000")?, &dir.candidate_text(&id)?, &gateway)?;
            dir.write_json(&format!("compare-{id}.json"), &scores)?;
            let _ = writeln!(
                out,
                "information preservation: {}\noverall dissimilarity: {}\n{}",
                scores.information_preservation, scores.overall_dissimilarity, scores.explanation
            );
        }
    }
    Ok(())
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), HarnessError> {
    match cli.command {
        Command::Optimize { config, resume, dry_run } => run_optimize(&config, resume.as_deref(), dry_run, out).map(|_| ()),
        Command::Resume { run_dir } => run_resume(&run_dir, out).map(|_| ()),
        Command::Report { kind } => report(kind, out),
        Command::ValidateConfig { config } => {
            RunConfig::load(&config)?;
            let _ = writeln!(out, "config ok");
            Ok(())
        }
        Command::Parse { prompt } => {
            let text = std::fs::read_to_string(&prompt).map_err(|e| HarnessError::Config(format!("{}: {e}", prompt.display())))?;
            let _ = writeln!(out, "{}", describe(&parse_prompt(&text)?));
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
