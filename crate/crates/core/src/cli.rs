//! Command-line entry point: `fod {schedule, train, sample, verify, eval}`.
//!
//! Every output file starts with a `# fod <command> config_hash=<h> seed=<s>`
//! line (the checkpoint carries the same pair in its header) and is written
//! through a temporary file that is renamed into place.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, RawConfig};
use crate::data::sample_source;
use crate::error::{FodError, Result};
use crate::model::{read_checkpoint, write_checkpoint, FlowModel};
use crate::noise::derive_seed;
use crate::samplers::{SamplerKind, SamplerSpec};
use crate::schedules::build_schedule;
use crate::training::{train_loop, Evaluator};
use crate::verify::{run_suite, SuiteOptions};

#[derive(Debug, Parser)]
#[command(name = "fod", version, about = "Forward-only diffusion toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `section.key=value`, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the schedule table as CSV.
    Schedule(Common),
    /// Train a flow model; writes the checkpoint to --out and metrics to <out>.metrics.jsonl.
    Train(Common),
    /// Sample trajectories from a checkpoint as CSV.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "nonmarkov")]
        sampler: SamplerKind,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Run the oracle suite; one JSON report per line.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Monte-Carlo sample count per check.
        #[arg(long, default_value_t = 100_000)]
        n: usize,
    },
    /// MMD to the target for every sampler and k in {1, 5, 10, 20}.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Schedule(c) | Command::Train(c) => c,
            Command::Sample { common, .. } | Command::Verify { common, .. } | Command::Eval { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Schedule(_) => "schedule",
            Command::Train(_) => "train",
            Command::Sample { .. } => "sample",
            Command::Verify { .. } => "verify",
            Command::Eval { .. } => "eval",
        }
    }
}

pub const EVAL_KS: [usize; 4] = [1, 5, 10, 20];
const TAG_SAMPLE_SOURCE: u64 = 0x5A;
const TAG_SAMPLE_NOISE: u64 = 0x5B;

/// Parses arguments, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let start = Instant::now();
    match execute(&cli.command) {
        Ok(outcome) => {
            eprintln!(
                "fod {} seed={} config_hash={} wall_ms={} {}",
                cli.command.name(),
                outcome.seed,
                outcome.hash,
                start.elapsed().as_millis(),
                outcome.summary
            );
            if outcome.failed {
                1
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("fod {}: error: {e}", cli.command.name());
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

struct Outcome {
    seed: u64,
    hash: String,
    summary: String,
    failed: bool,
}

fn load_config(common: &Common) -> Result<RawConfig> {
    let mut raw = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| FodError::Config(format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => RawConfig::default(),
    };
    for o in &common.overrides {
        raw.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        raw.set("train", "seed", &seed.to_string())?;
    }
    Ok(raw)
}

/// Writes through a sibling temporary file renamed onto `path` on success.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| FodError::Io(e.error))?;
    Ok(())
}

fn header(w: &mut dyn Write, command: &str, hash: &str, seed: u64) -> Result<()> {
    writeln!(w, "# fod {command} config_hash={hash} seed={seed}")?;
    Ok(())
}

fn load_model(path: &Path, dim: usize) -> Result<FlowModel> {
    let file = File::open(path)?;
    let ck = read_checkpoint(BufReader::new(file))?;
    if ck.model.dim() != dim {
        return Err(FodError::DimensionMismatch { expected: dim, got: ck.model.dim() });
    }
    Ok(ck.model)
}

fn execute(command: &Command) -> Result<Outcome> {
    let common = command.common();
    let raw = load_config(common)?;
    let seed = raw.seed()?;
    let hash = raw.hash();
    let name = command.name();
    let out = &common.out;
    let mut failed = false;

    let summary = match command {
        Command::Schedule(_) => {
            let tab = build_schedule(&raw.schedule()?)?;
            write_atomic(out, |w| {
                header(w, name, &hash, seed)?;
                tab.write_csv(w)?;
                Ok(())
            })?;
            format!("steps={} mbar_T={:.12}", tab.steps(), tab.mbar()[tab.steps()])
        }
        Command::Train(_) => {
            let cfg = raw.train()?;
            let outcome = train_loop(&cfg)?;
            let meta = BTreeMap::from([
                ("config_hash".to_string(), hash.clone()),
                ("seed".to_string(), seed.to_string()),
            ]);
            write_atomic(out, |w| write_checkpoint(w, &outcome.model, &outcome.optimizer, &meta))?;
            let mut metrics_path = out.clone().into_os_string();
            metrics_path.push(".metrics.jsonl");
            write_atomic(Path::new(&metrics_path), |w| {
                header(w, name, &hash, seed)?;
                for m in &outcome.metrics {
                    serde_json::to_writer(&mut *w, m)?;
                    writeln!(w)?;
                }
                Ok(())
            })?;
            match outcome.metrics.last() {
                Some(m) => format!("iterations={} loss={:.6} mmd_to_target={:.6}", m.iteration, m.loss, m.mmd_to_target),
                None => "iterations=0".to_string(),
            }
        }
        Command::Sample { checkpoint, sampler, k, n, .. } => {
            let ds = raw.dataset()?;
            let tab = build_schedule(&raw.schedule()?)?;
            let model = load_model(checkpoint, ds.dim())?;
            let x0 = sample_source(&ds, *n, derive_seed(seed, TAG_SAMPLE_SOURCE))?;
            let spec = SamplerSpec::new(*sampler, *k);
            let runs = spec.run_batch(&model, x0.view(), &tab, derive_seed(seed, TAG_SAMPLE_NOISE))?;
            write_atomic(out, |w| {
                header(w, name, &hash, seed)?;
                let coords: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
                writeln!(w, "chain,step,{}", coords.join(","))?;
                for (chain, run) in runs.iter().enumerate() {
                    for (step, x) in run.visited.iter().zip(&run.trajectory) {
                        let xs: Vec<String> = x.iter().map(|v| format!("{v:e}")).collect();
                        writeln!(w, "{chain},{step},{}", xs.join(","))?;
                    }
                }
                Ok(())
            })?;
            format!("sampler={sampler} k={k} chains={n}")
        }
        Command::Verify { n, .. } => {
            let cfg = raw.schedule()?;
            let opts = SuiteOptions { samples: *n, chains: (*n / 5).max(1000), seed };
            let reports = run_suite(&cfg, &opts)?;
            write_atomic(out, |w| {
                header(w, name, &hash, seed)?;
                for r in &reports {
                    serde_json::to_writer(&mut *w, r)?;
                    writeln!(w)?;
                }
                Ok(())
            })?;
            let failures: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.check_name.as_str()).collect();
            failed = !failures.is_empty();
            if failed {
                format!("checks={} failed={}", reports.len(), failures.join(","))
            } else {
                format!("checks={} failed=0", reports.len())
            }
        }
        Command::Eval { checkpoint, n, .. } => {
            let ds = raw.dataset()?;
            let tab = build_schedule(&raw.schedule()?)?;
            let model = load_model(checkpoint, ds.dim())?;
            let evaluator = Evaluator::new(&ds, *n, seed)?;
            let mut rows = vec![("source".to_string(), 0, evaluator.baseline()?)];
            rows.push(("euler".to_string(), 1, evaluator.score(&model, SamplerSpec::new(SamplerKind::Euler, 1), &tab)?));
            for kind in [SamplerKind::Markov, SamplerKind::Nonmarkov, SamplerKind::Ode] {
                for k in EVAL_KS.into_iter().filter(|&k| k <= tab.steps()) {
                    rows.push((kind.to_string(), k, evaluator.score(&model, SamplerSpec::new(kind, k), &tab)?));
                }
            }
            write_atomic(out, |w| {
                header(w, name, &hash, seed)?;
                writeln!(w, "sampler,k,mmd")?;
                for (sampler, k, mmd) in &rows {
                    writeln!(w, "{sampler},{k},{mmd:e}")?;
                }
                Ok(())
            })?;
            format!("n={n} bandwidth={:.6} source_mmd={:e}", evaluator.bandwidth, rows[0].2)
        }
    };
    Ok(Outcome { seed, hash, summary, failed })
}
