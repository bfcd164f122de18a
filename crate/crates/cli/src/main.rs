use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use memtrack::config::{Ablation, Config};
use memtrack::dataset::{format_boxes, load_sequence, parse_boxes, save_sequence};
use memtrack::gradcheck::run_suite;
use memtrack::metrics::compute_metrics;
use memtrack::model::Model;
use memtrack::synth::synth_sequence;
use memtrack::tracker::Tracker;
use memtrack::train::{train, DataSource};

#[derive(Parser)]
#[command(name = "memtrack", version, about = "Memory-augmented visual object tracker")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on synthetic clips or on sequence directories.
    Train {
        /// Checkpoint to write; the configuration goes next to it as `<ckpt>.cfg`.
        #[arg(long)]
        out: PathBuf,
        /// Configuration file of `key = value` lines (desk defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory of sequence directories; synthetic data when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write `step,loss` lines here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Track one sequence directory and write "x,y,w,h" lines.
    Track {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        /// Results file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "none")]
        ablation: Ablation,
        #[arg(long)]
        npos: Option<usize>,
        #[arg(long)]
        nneg: Option<usize>,
        /// Configuration to use instead of the checkpoint's sidecar.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report frames per second on stderr.
        #[arg(long)]
        timing: bool,
    },
    /// Score a results file against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        /// Sequence directory or ground-truth file.
        #[arg(long)]
        gt: PathBuf,
        /// Metrics JSON; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Precision and success curves as CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
        /// Frame rate to record in the report.
        #[arg(long)]
        fps: Option<f64>,
    },
    /// Write procedural sequences as sequence directories.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => Config::desk(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override '{o}' is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("groundtruth_rect.txt").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { out, config, overrides, steps, seed, data, log } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let source = match data {
                Some(root) => {
                    let seqs = sequence_dirs(&root)?
                        .iter()
                        .map(load_sequence)
                        .collect::<memtrack::Result<Vec<_>>>()?;
                    if seqs.is_empty() {
                        bail!("no sequence directories under {}", root.display());
                    }
                    DataSource::Sequences { seqs, cycle: true }
                }
                None => DataSource::Synthetic(cfg.synth.clone()),
            };
            let init = Model::init(&cfg.model, cfg.train.seed)?;
            let every = (cfg.train.steps / 20).max(1);
            let outcome = train(&cfg, init, &source, |step, loss| {
                if step % every == 0 || step + 1 == cfg.train.steps {
                    eprintln!("step {step:>6}  loss {loss:.5}");
                }
            })?;
            outcome.model.save(&out)?;
            fs::write(sidecar(&out), cfg.to_text())?;
            if let Some(p) = log {
                let text: String = outcome.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
                fs::write(p, text)?;
            }
        }
        Cmd::Track { ckpt, seq, out, ablation, npos, nneg, config, timing } => {
            let cfg_path = config.unwrap_or_else(|| sidecar(&ckpt));
            let mut cfg = Config::load(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
            cfg.tracker.ablation = ablation;
            if let Some(n) = npos {
                cfg.tracker.npos = n;
            }
            if let Some(n) = nneg {
                cfg.tracker.nneg = n;
            }
            cfg.validate()?;
            let model = Model::load(&ckpt, &cfg.model)?;
            let sequence = load_sequence(&seq)?;
            let mut tracker = Tracker::new(model, cfg.tracker)?;
            let start = Instant::now();
            let boxes = tracker.run(&sequence.frames, sequence.boxes[0])?;
            if timing {
                eprintln!("fps {:.2}", boxes.len() as f64 / start.elapsed().as_secs_f64());
            }
            write_or_print(out.as_deref(), &format_boxes(&boxes))?;
        }
        Cmd::Eval { results, gt, out, curves, fps } => {
            let gt_file = if gt.is_dir() { gt.join("groundtruth_rect.txt") } else { gt };
            let truth = parse_boxes(&fs::read_to_string(&gt_file).with_context(|| format!("reading {}", gt_file.display()))?)?;
            let pred = parse_boxes(&fs::read_to_string(&results).with_context(|| format!("reading {}", results.display()))?)?;
            let report = compute_metrics(&pred, &truth, fps)?;
            if let Some(p) = curves {
                fs::write(p, report.curves_csv())?;
            }
            write_or_print(out.as_deref(), &(report.to_json() + "\n"))?;
        }
        Cmd::Synth { out, num, seed, config, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            for i in 0..num as u64 {
                let s = synth_sequence(seed + i, &cfg.synth)?;
                save_sequence(&s, out.join(&s.name))?;
            }
        }
        Cmd::Gradcheck { seed, tol, seeds } => {
            let start = Instant::now();
            let report = run_suite(seed, seeds, tol)?;
            for c in report.failures() {
                eprintln!("FAIL {} seed {}: max relative error {:.3e}", c.name, c.seed, c.max_rel);
            }
            println!(
                "{} checks, {} coordinates, {} skipped at kinks, max relative error {:.3e}, {:.1}s",
                report.checks.len(),
                report.coords(),
                report.skipped(),
                report.max_rel(),
                start.elapsed().as_secs_f64()
            );
            if !report.passed() {
                bail!("gradient check failed at tolerance {tol}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
