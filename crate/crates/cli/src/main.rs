//! `cfn`: reproducible CFN estimation experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfn_core::experiment::{
    run_bernstein, run_convergence, run_error_scaling, run_fit, run_landscape, run_simulate,
    run_steel_demo, ExperimentConfig, ExperimentKind, ExperimentOutput, TreeSource,
};
use cfn_core::model::SampleSet;
use cfn_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfn", version, about = "Maximum-likelihood experiments for the CFN model on trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Newick file, overriding the config's tree.
    #[arg(long)]
    tree: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimation error against sample size.
    ErrorScaling(Common),
    /// Per-sweep objective gaps of coordinate maximization.
    Convergence(Common),
    /// Hessian eigenvalue scans over the parameter box.
    Landscape(Common),
    /// Search the quartet for a 2-sample instance with several maxima.
    SteelDemo(Common),
    /// Observed Hessian deviations against the matrix Bernstein bound.
    Bernstein(Common),
    /// Draw one sample set at the true parameters.
    Simulate(Common),
    /// Fit a sample set read from CSV.
    Fit {
        #[command(flatten)]
        common: Common,
        /// CSV with header `pattern,count`.
        #[arg(long)]
        samples: PathBuf,
    },
}

fn load_config(common: &Common, kind: ExperimentKind) -> Result<(ExperimentConfig, PathBuf), Error> {
    let (mut config, base) = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (ExperimentConfig::from_json(&text)?, base)
        }
        None => (ExperimentConfig::default(), PathBuf::from(".")),
    };
    if let Some(k) = config.kind {
        if k != kind {
            return Err(Error::Config(format!(
                "config is for {} but the {} subcommand was run",
                k.name(),
                kind.name()
            )));
        }
    }
    config.kind = Some(kind);
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(t) = &common.tree {
        let abs = std::path::absolute(t).map_err(|e| Error::Config(e.to_string()))?;
        config.tree = TreeSource::NewickPath(abs);
    }
    if let Some(o) = &common.out {
        config.output_dir = Some(o.clone());
    }
    Ok((config, base))
}

fn write_outputs(out: &ExperimentOutput, dir: &Path) -> Result<(), Error> {
    for r in &out.reports {
        let path = r.write_to(dir)?;
        log::info!("wrote {}", path.display());
    }
    let summary = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
    println!("{summary}");
    Ok(())
}

fn run(cmd: Command) -> Result<(), Error> {
    let (common, kind, samples) = match cmd {
        Command::ErrorScaling(c) => (c, ExperimentKind::ErrorScaling, None),
        Command::Convergence(c) => (c, ExperimentKind::Convergence, None),
        Command::Landscape(c) => (c, ExperimentKind::Landscape, None),
        Command::SteelDemo(c) => (c, ExperimentKind::SteelDemo, None),
        Command::Bernstein(c) => (c, ExperimentKind::Bernstein, None),
        Command::Simulate(c) => (c, ExperimentKind::Simulate, None),
        Command::Fit { common, samples } => (common, ExperimentKind::Fit, Some(samples)),
    };
    let (config, base) = load_config(&common, kind)?;
    let dir = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let p = config.prepare(&base)?;
    let out = match kind {
        ExperimentKind::ErrorScaling => run_error_scaling(&p)?.output,
        ExperimentKind::Convergence => run_convergence(&p)?.output,
        ExperimentKind::Landscape => run_landscape(&p)?.output,
        ExperimentKind::SteelDemo => {
            let r = run_steel_demo(&p)?;
            if let Some(fx) = &r.fixture {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("steel_witness.json"), fx.to_json() + "\n")?;
            }
            r.output
        }
        ExperimentKind::Bernstein => run_bernstein(&p)?.output,
        ExperimentKind::Simulate => run_simulate(&p)?.1,
        ExperimentKind::Fit => {
            let path = samples.expect("fit carries a samples path");
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let s = SampleSet::from_csv(&text, &p.tree)?;
            run_fit(&p, &s)?.1
        }
    };
    write_outputs(&out, &dir)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
