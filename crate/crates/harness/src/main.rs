use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lams_core::events::{read_log, Event, EventRecord};
use lams_core::gateway::{BackendConfig, Gateway};
use lams_core::sim::TaskKind;
use lams_core::switcher::StrategyKind;
use lams_harness::doubles::{HintBoard, HintedGateway, StagedGateway};
use lams_harness::report::{load_results, markdown, write_csv};
use lams_harness::shadow::shadow_replay;
use lams_harness::trial::{mean_by_trial, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "lams", about = "Run scripted-user experiments, shadow replays and reports")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    /// scripted completions from --mock-script
    Mock,
    /// OpenAI-compatible HTTP endpoint
    Real,
    /// test double that always offers what the scripted user needs
    Hinted,
    /// test double that errs until rules correct it
    Staged,
}

#[derive(clap::Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    backend: Backend,
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// environment variable holding the API token
    #[arg(long)]
    auth_env: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run experiments and write one JSONL log per trial.
    Run {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<StrategyKind>,
        #[arg(long, default_value_t = 1)]
        runs: u32,
        #[arg(long, default_value_t = 3)]
        trials: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Replay recorded trials under another strategy.
    Shadow {
        #[arg(long = "log", required = true, num_args = 1..)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        variant: StrategyKind,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Aggregate a directory of logs into report.csv and report.md.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

enum Built {
    Shared(Arc<dyn Gateway>),
    Hinted(HintedGateway),
    Staged(StagedGateway),
}

impl Built {
    fn gateway(&self) -> &dyn Gateway {
        match self {
            Built::Shared(g) => g.as_ref(),
            Built::Hinted(g) => g,
            Built::Staged(g) => g,
        }
    }

    fn board(&self) -> Option<&HintBoard> {
        match self {
            Built::Shared(_) => None,
            Built::Hinted(g) => Some(&g.board),
            Built::Staged(g) => Some(&g.board),
        }
    }
}

fn build(args: &BackendArgs) -> Result<Built> {
    Ok(match args.backend {
        Backend::Mock => {
            let script = args.mock_script.clone().context("--backend mock needs --mock-script")?;
            Built::Shared(BackendConfig::mock(script).build()?)
        }
        Backend::Real => {
            let endpoint = args.endpoint.clone().context("--backend real needs --endpoint")?;
            let model = args.model.clone().context("--backend real needs --model")?;
            Built::Shared(BackendConfig::real(endpoint, model, args.auth_env.clone()).build()?)
        }
        Backend::Hinted => Built::Hinted(HintedGateway::default()),
        Backend::Staged => Built::Staged(StagedGateway::default()),
    })
}

fn read(path: &Path) -> Result<Vec<EventRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_log(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Run {
            task,
            strategy,
            runs,
            trials,
            seed,
            out,
            backend,
        } => {
            if strategy.is_empty() {
                bail!("at least one --strategy is required");
            }
            let built = build(&backend)?;
            std::fs::create_dir_all(&out)?;
            let mut results = Vec::new();
            for s in strategy {
                let cfg = ExperimentConfig::new(task, s, runs, trials, seed);
                let gateway = s.uses_llm().then(|| built.gateway());
                let outs = run_experiment(&cfg, gateway, built.board(), Some(&out))?;
                let rs: Vec<_> = outs.into_iter().map(|o| o.result).collect();
                let means = mean_by_trial(&rs, trials);
                let done = rs.iter().filter(|r| r.completed).count();
                println!(
                    "{task} {s}: completed {done}/{} mean switches {}",
                    rs.len(),
                    means.iter().map(|m| format!("{m:.2}")).collect::<Vec<_>>().join(" ")
                );
                results.extend(rs);
            }
            write_csv(&results, File::create(out.join("report.csv"))?)?;
            std::fs::write(out.join("report.md"), markdown(&results))?;
        }
        Cmd::Shadow { logs, variant, backend } => {
            let built = if variant.uses_llm() { Some(build(&backend)?) } else { None };
            if built.as_ref().is_some_and(|b| b.board().is_some()) {
                bail!("shadow replay needs a mock or real backend");
            }
            // group by run, order by trial index
            let mut runs: BTreeMap<String, Vec<(u32, Vec<EventRecord>)>> = BTreeMap::new();
            for p in &logs {
                let records = read(p)?;
                let Some(Event::TrialStart(s)) = records.first().map(|r| &r.event) else {
                    bail!("{} does not start with trial_start", p.display());
                };
                runs.entry(s.run_id.clone()).or_default().push((s.trial_index, records));
            }
            for (_, mut trials) in runs {
                trials.sort_by_key(|(i, _)| *i);
                let trials: Vec<_> = trials.into_iter().map(|(_, r)| r).collect();
                for t in shadow_replay(&trials, variant, built.as_ref().map(Built::gateway))? {
                    println!("{}", serde_json::to_string(&t)?);
                }
            }
        }
        Cmd::Report { dir } => {
            let results = load_results(&dir)?;
            if results.is_empty() {
                bail!("no logs under {}", dir.display());
            }
            write_csv(&results, File::create(dir.join("report.csv"))?)?;
            let md = markdown(&results);
            std::fs::write(dir.join("report.md"), &md)?;
            print!("{md}");
        }
    }
    Ok(())
}
