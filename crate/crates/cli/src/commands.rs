use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cspflow::harness::{
    generate_dataset, run_scenario, run_sweep, save_dataset, write_outputs, write_sweep, RunMode,
    ScenarioConfig, ScenarioOutcome,
};
use cspflow::learning::SelectionMode;
use cspflow::patterns::{check_human_mandatory, check_human_optional, classify_composition, redundancy_shortfalls};
use cspflow::{build_topology, TopologyConfig, TopologyError};

use crate::plot;
use crate::serve::{self, ServeOptions};

#[derive(Debug, Parser)]
#[command(name = "cspflow", version, about = "Crowdsourced stream processing runs, sweeps and live labeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario TOML, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Offered input rate in items per second.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<RunMode>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<RunMode, String> {
    s.parse().map_err(|e: cspflow::harness::ScenarioError| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic JSON-lines dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of records.
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one scenario and write its CSVs, model and manifest.
    Run {
        #[command(flatten)]
        common: Common,
        /// Run passive/active with and without de-duplication, one
        /// subdirectory each.
        #[arg(long)]
        grid: bool,
    },
    /// Measure capacity, then sweep offered rates around it.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Validate a topology file and report its pattern properties.
    Check {
        topology: PathBuf,
        /// Also list crowd elements asking for fewer labels than this.
        #[arg(long)]
        min_redundancy: Option<u32>,
    },
    /// Run a scenario in wall-clock mode behind the annotation HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        serve_addr: SocketAddr,
        /// Directory of static UI assets served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Chart run CSVs as SVG (or a merged CSV when `--out` ends in .csv).
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        y: Option<String>,
        #[arg(long)]
        title: Option<String>,
    },
}

pub fn load_config(common: &Common) -> Result<(ScenarioConfig, PathBuf)> {
    let (mut cfg, base) = match &common.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => (ScenarioConfig::default(), PathBuf::from(".")),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(rate) = common.rate {
        if rate <= 0.0 || !rate.is_finite() {
            bail!("--rate must be positive");
        }
        if cfg.topology.is_some() {
            log::warn!("--rate only shapes the built-in pipeline; the topology file keeps its own rate");
        }
        cfg.shape.rate = rate;
    }
    if let Some(mode) = common.mode {
        cfg.mode = mode;
    }
    Ok((cfg, base))
}

fn out_dir(common: &Common, cfg: &ScenarioConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| Path::new("out").join(&cfg.name))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, seed, n, out } => generate(config, seed, n, &out),
        Command::Run { common, grid } => run_cmd(&common, grid),
        Command::Sweep { common } => sweep(&common),
        Command::Check { topology, min_redundancy } => check(&topology, min_redundancy),
        Command::Serve {
            common,
            serve_addr,
            static_dir,
        } => serve_cmd(&common, serve_addr, static_dir),
        Command::Plot {
            inputs,
            out,
            x,
            y,
            title,
        } => plot_cmd(&inputs, &out, x.as_deref(), y.as_deref(), title),
    }
}

fn generate(config: Option<PathBuf>, seed: Option<u64>, n: Option<usize>, out: &Path) -> Result<()> {
    let (cfg, _) = load_config(&Common {
        config,
        seed,
        rate: None,
        mode: None,
        out: None,
    })?;
    let mut params = cfg.dataset.generate.clone().unwrap_or_default();
    params.seed = cfg.seed;
    if let Some(n) = n {
        params.n = n;
    }
    let records = generate_dataset(&params)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_dataset(out, &records)?;
    let retweets = records.iter().filter(|r| r.is_retweet).count();
    println!("wrote {} records ({retweets} retweets) to {}", records.len(), out.display());
    Ok(())
}

fn report(name: &str, out: &ScenarioOutcome) {
    let m = &out.metrics;
    let f = &out.flow;
    let auc = out
        .curve
        .iter()
        .rev()
        .find_map(|c| c.auc)
        .map(|a| format!("{a:.3}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "{name}: ingested {} output {} shed {} filtered {} in-flight {} | throughput {:.1}/s p95 {:.2} ms | labels {} retrains {} final AUC {auc}",
        f.ingested,
        f.attributed,
        f.shed,
        f.filtered,
        f.in_flight,
        m.throughput,
        m.latency_p95,
        out.labels.len(),
        out.curve.len(),
    );
    if !f.balanced() {
        log::warn!("{name}: flow does not balance: {f:?}");
    }
}

fn run_cmd(common: &Common, grid: bool) -> Result<()> {
    let (cfg, base) = load_config(common)?;
    let dir = out_dir(common, &cfg);
    if !grid {
        let out = run_scenario(&cfg, &base)?;
        write_outputs(&dir, &cfg, &out)?;
        report(&cfg.name, &out);
        println!("outputs in {}", dir.display());
        return Ok(());
    }
    for mode in [SelectionMode::Passive, SelectionMode::Active] {
        for dedup in [false, true] {
            let mut c = cfg.clone();
            c.learning.mode = mode;
            c.learning.dedup = dedup;
            let name = format!("{}{}", mode.as_str(), if dedup { "-dedup" } else { "" });
            c.name = format!("{}-{name}", cfg.name);
            let out = run_scenario(&c, &base)?;
            write_outputs(&dir.join(&name), &c, &out)?;
            report(&c.name, &out);
        }
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn sweep(common: &Common) -> Result<()> {
    let (cfg, base) = load_config(common)?;
    if cfg.mode != RunMode::Virtual {
        log::warn!("sweeps always run in virtual time");
    }
    let s = run_sweep(&cfg, &base)?;
    let dir = out_dir(common, &cfg);
    write_sweep(&dir, &s)?;
    println!("capacity {:.1} items/s", s.capacity);
    println!("{:>10} {:>10} {:>9} {:>9} {:>8}", "offered", "throughput", "p50 ms", "p95 ms", "shed");
    for r in &s.rows {
        println!(
            "{:>10.1} {:>10.1} {:>9.2} {:>9.2} {:>8}",
            r.input_rate, r.throughput, r.latency_p50, r.latency_p95, r.shed_count
        );
    }
    println!("wrote {}", dir.join("sweep.csv").display());
    Ok(())
}

fn check(path: &Path, min_redundancy: Option<u32>) -> Result<()> {
    let cfg = TopologyConfig::load(path)?;
    let t = match build_topology(&cfg) {
        Ok(t) => t,
        Err(TopologyError::Invalid(violations)) => {
            for v in &violations {
                println!("violation: {v}");
            }
            bail!("{}: {} violation(s)", path.display(), violations.len());
        }
        Err(e) => return Err(e.into()),
    };
    println!("topology `{}`: {} PEs, {} channels", t.name, t.pes.len(), t.channels.len());
    for (id, pe) in &t.pes {
        let role = t.role(id).map(|r| format!("{r:?}")).unwrap_or_default();
        println!("  {:<16} {:<5} {role}", id.to_string(), format!("{:?}", pe.kind).to_lowercase());
    }
    for w in &t.warnings {
        println!("warning: {w}");
    }
    let opt = check_human_optional(&t);
    let man = check_human_mandatory(&t);
    let path_of = |p: &Option<Vec<cspflow::PeId>>| {
        p.as_ref()
            .map(|p| p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" -> "))
            .unwrap_or_default()
    };
    println!("human_optional: {}  {}", opt.holds, path_of(&opt.path));
    println!("human_mandatory: {}  {}", man.holds, path_of(&man.path));
    println!("composition: {:?}", classify_composition(&t));
    if let Some(min) = min_redundancy {
        let short = redundancy_shortfalls(&t, min);
        if short.is_empty() {
            println!("redundancy: every crowd element asks for at least {min} labels");
        } else {
            let ids: Vec<String> = short.iter().map(|p| p.to_string()).collect();
            println!("redundancy below {min}: {}", ids.join(", "));
        }
    }
    Ok(())
}

fn serve_cmd(common: &Common, addr: SocketAddr, static_dir: Option<PathBuf>) -> Result<()> {
    let (mut cfg, base) = load_config(common)?;
    if cfg.mode != RunMode::Wall {
        log::info!("serving runs in wall-clock mode");
        cfg.mode = RunMode::Wall;
    }
    if let Some(d) = &static_dir {
        if !d.is_dir() {
            bail!("static directory {} does not exist", d.display());
        }
    }
    let service = serve::start(
        &cfg,
        &base,
        ServeOptions {
            addr,
            static_dir,
            handle_ctrl_c: true,
        },
    )?;
    println!("annotation API on {}", service.url("/api/health"));
    let out = service.wait()?;
    report(&cfg.name, &out);
    if let Some(dir) = &common.out {
        write_outputs(dir, &cfg, &out)?;
        println!("outputs in {}", dir.display());
    }
    Ok(())
}

fn plot_cmd(inputs: &[PathBuf], out: &Path, x: Option<&str>, y: Option<&str>, title: Option<String>) -> Result<()> {
    let mut all = Vec::new();
    let (mut xl, mut yl) = (String::new(), String::new());
    for p in inputs {
        let (px, py, mut series) = plot::read_series(p, x, y)?;
        if inputs.len() > 1 {
            // Parent directory tells grid runs apart.
            let tag = p.parent().and_then(|d| d.file_name()).and_then(|s| s.to_str()).unwrap_or("");
            for s in &mut series {
                if !tag.is_empty() {
                    s.name = format!("{tag}: {}", s.name);
                }
            }
        }
        xl = px;
        yl = py;
        all.extend(series);
    }
    let text = if out.extension().is_some_and(|e| e == "csv") {
        plot::render_csv(&xl, &yl, &all)?
    } else {
        let title = title.unwrap_or_else(|| format!("{yl} vs {xl}"));
        plot::render_svg(&title, &xl, &yl, &all)
    };
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}
