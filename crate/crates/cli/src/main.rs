use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sybilfs::fids::LineageEvent;
use sybilfs::harness::stress::{stress, StressConfig};
use sybilfs::harness::{compare_cow, run, timing_experiment, ExperimentConfig, MetricsReport, REPORT_FILE};
use sybilfs::ids::DiskName;
use sybilfs::observer::{anonymity_curve, extinct_lineage_audit, max_name_lifetime, random_guess_attack};
use sybilfs::tracegen::Workload;

#[derive(Parser)]
#[command(name = "sybilfs", version, about = "Sybil filesystem image experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the trace library of one or every workload as JSONL.
    Mkcorpus {
        #[arg(long)]
        workload: Option<Workload>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
    /// Run an experiment and write its report and logs.
    Run(RunArgs),
    /// Monte Carlo of the random-guess attack.
    Attack {
        #[arg(long)]
        k: usize,
        /// Secret-set size; unbounded when omitted.
        #[arg(long)]
        n: Option<u64>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Audit a lineage log the way the OS sees it.
    Audit {
        lineage: PathBuf,
        /// Longest allowed name lifetime, ms.
        #[arg(long)]
        t_ms: Option<u64>,
        /// Print the anonymity curve of this name.
        #[arg(long)]
        target: Option<DiskName>,
    },
    /// Timing side channel with and without padding.
    Mi {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 99.0)]
        padding_pct: f64,
    },
    /// Summarize a written report.
    Report { dir: PathBuf },
    /// Blob footprint with copy-on-write on and off.
    Cow(RunArgs),
    /// Concurrent workers against one backstore.
    Stress {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = Workload::Churn)]
        workload: Workload,
        #[arg(long, default_value_t = 200)]
        segments: usize,
    },
}

/// Every flag overrides the config key of the same name.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    t_ms: Option<u64>,
    #[arg(long)]
    n_calls: Option<u64>,
    #[arg(long)]
    workload: Option<Workload>,
    #[arg(long)]
    padding_pct: Option<f64>,
    #[arg(long)]
    no_padding: bool,
    #[arg(long)]
    duration_ms: Option<u64>,
    #[arg(long)]
    disk_blocks: Option<u64>,
    #[arg(long)]
    no_cow: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        c.seed = self.seed.unwrap_or(c.seed);
        c.k = self.k.unwrap_or(c.k);
        c.t_ms = self.t_ms.unwrap_or(c.t_ms);
        c.n_calls = self.n_calls.unwrap_or(c.n_calls);
        c.workload = self.workload.unwrap_or(c.workload);
        c.padding_pct = self.padding_pct.unwrap_or(c.padding_pct);
        c.pad &= !self.no_padding;
        c.duration_ms = self.duration_ms.unwrap_or(c.duration_ms);
        c.disk_blocks = self.disk_blocks.unwrap_or(c.disk_blocks);
        c.cow &= !self.no_cow;
        c.validate()?;
        Ok(c)
    }
}

fn summary(r: &MetricsReport) {
    let s = &r.storage;
    let last = r.p_curve.last().expect("curve starts at r = 0");
    println!("K={} workload={} seed={}", r.config.k, r.config.workload, r.config.seed);
    println!(
        "blob {} B ({:.0} B per sybil), region {} B, sybil filedata blocks {}",
        s.sybil_blob_bytes, s.blob_bytes_per_sybil_image, s.actual_region_bytes, s.sybil_filedata_blocks
    );
    println!("guess rate {:.4} (expected {:.4})", r.guess_rate.rate, r.guess_rate.expected);
    println!("P after {} rounds = {} (M = {})", last.r, last.p, last.m);
    let f = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4}"));
    println!("MI pre {} bits, post {} bits", f(r.mi_pre), f(r.mi_post));
    let c = &r.fids_op_counts;
    println!("forks {} shuffles {} retires {}", c.forks, c.shuffles, c.retires);
    if let Some(a) = &r.audit {
        println!("lineage audit {}", if a.passed() { "ok" } else { "VIOLATED" });
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Mkcorpus { workload, seed, out } => {
            std::fs::create_dir_all(&out)?;
            let chosen: Vec<Workload> = workload.map_or(Workload::ALL.to_vec(), |w| vec![w]);
            for w in chosen {
                let lib = w.library(seed);
                let path = out.join(format!("{w}.jsonl"));
                lib.write_jsonl(BufWriter::new(File::create(&path)?))?;
                let st = lib.stats()?;
                println!(
                    "{w}: {} segments, {} calls, N = {}, H = {:.3} bits -> {}",
                    st.segments,
                    st.calls,
                    st.cardinality,
                    st.entropy_bits,
                    path.display()
                );
            }
        }
        Cmd::Run(a) => {
            let cfg = a.config()?;
            let art = run(&cfg)?;
            art.write_to(&a.out)?;
            summary(&art.report);
            println!("wrote {}", a.out.display());
        }
        Cmd::Attack { k, n, trials, seed } => {
            let o = random_guess_attack(k, n, trials, seed)?;
            println!("{}", serde_json::to_string_pretty(&o)?);
        }
        Cmd::Audit { lineage, t_ms, target } => {
            let log = LineageEvent::read_jsonl(&std::fs::read_to_string(&lineage)?)?;
            let rep = extinct_lineage_audit(&log)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
            let end = log.last().map_or(0, |e| e.time);
            let life = max_name_lifetime(&log, end);
            println!("max name lifetime {life} us");
            if let Some(t) = target {
                for p in anonymity_curve(&log, t)? {
                    println!("{} {} {}", p.r, p.m, p.p);
                }
            }
            if !rep.passed() {
                bail!("lineage audit failed at event {:?}", rep.first_violation);
            }
            if let Some(t) = t_ms {
                if life > t * 1000 {
                    bail!("a name stayed visible {life} us, longer than T");
                }
            }
        }
        Cmd::Mi {
            seed,
            samples,
            padding_pct,
        } => {
            let o = timing_experiment(seed, samples, padding_pct)?;
            println!("{}", serde_json::to_string_pretty(&o)?);
        }
        Cmd::Report { dir } => {
            let text = std::fs::read_to_string(dir.join(REPORT_FILE))?;
            summary(&serde_json::from_str(&text)?);
        }
        Cmd::Cow(a) => {
            let o = compare_cow(&a.config()?)?;
            println!("{}", serde_json::to_string_pretty(&o)?);
        }
        Cmd::Stress {
            seed,
            k,
            workload,
            segments,
        } => {
            let o = stress(&StressConfig {
                seed,
                k,
                workload,
                segments_per_image: segments,
                ..StressConfig::default()
            })?;
            println!("{}", serde_json::to_string_pretty(&o)?);
        }
    }
    Ok(())
}
