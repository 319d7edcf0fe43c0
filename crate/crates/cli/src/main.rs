use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use trajdistill::io::{self as tio, RunConfig};
use trajdistill::metrics::{self, MetricReport};
use trajdistill::pipeline::{self, CheckpointPaths};
use trajdistill::ratr;
use trajdistill::train::TrainState;
use trajdistill::trajectory::{self, SamplerMode, TrajectoryPoint};
use trajdistill::verify;
use trajdistill::{MicroNet, Tensor};

/// Teacher pretraining, refined-trajectory distillation and few-step
/// low-light enhancement on a desk-scale diffusion model.
#[derive(Debug, Parser)]
#[command(name = "trajdistill", version)]
struct Cli {
    /// Run configuration (`key = value` lines); defaults apply otherwise.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the teacher on synthetic pairs and write a checkpoint.
    TrainTeacher {
        /// Checkpoint path [default: teacher_path from the config, else teacher.tdpw].
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Distill a few-step student from a teacher checkpoint.
    Distill {
        /// Teacher checkpoint [default: teacher_path from the config, else teacher.tdpw].
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
        /// Student step count.
        #[arg(long, value_name = "K")]
        steps: Option<usize>,
        /// Refinement strength in (0, 1].
        #[arg(long, value_name = "W")]
        omega: Option<f64>,
        /// Checkpoint path [default: student_path from the config, else student.tdpw].
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Sample one patch and optionally dump every latent.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        source: SourceArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR", default_value = "sample")]
        out: PathBuf,
        /// Write each intermediate latent as a numbered image.
        #[arg(long)]
        trace: bool,
    },
    /// Enhance an image tile by tile and log a metric CSV row.
    Enhance {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        source: SourceArgs,
        /// Output image (PGM/PPM).
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// CSV to append the metric row to [default: <out>.csv].
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
    /// Write the illumination, noise and latent clean maps of an image.
    Ratr {
        #[command(flatten)]
        source: SourceArgs,
        /// Output directory.
        #[arg(long, value_name = "DIR", default_value = "ratr")]
        out: PathBuf,
    },
    /// Compare two images; prints `psnr,ssim,mse` and one value row.
    Metrics {
        /// Image under test.
        a: PathBuf,
        /// Reference image.
        b: PathBuf,
    },
    /// Run the property suite and print one line per property.
    Verify {
        /// Also run the desk experiment and the refinement sweep.
        #[arg(long)]
        long: bool,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model checkpoint [default: student_path from the config, else student.tdpw].
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Sampling step count [default: k_student].
    #[arg(long, value_name = "K")]
    steps: Option<usize>,
    /// Use posterior draws instead of deterministic jumps.
    #[arg(long)]
    ancestral: bool,
}

#[derive(Debug, Args)]
struct SourceArgs {
    /// Low-light input image (PGM/PPM).
    #[arg(long, value_name = "PATH", conflicts_with = "index")]
    input: Option<PathBuf>,
    /// Reference image for metrics.
    #[arg(long, value_name = "PATH", requires = "input")]
    reference: Option<PathBuf>,
    /// Held-out synthetic pair to use instead of an input file.
    #[arg(long, value_name = "I")]
    index: Option<usize>,
}

struct Source {
    low: Tensor,
    reference: Option<Tensor>,
    /// Pair index for synthetic inputs; used to derive the noise seed.
    index: u64,
}

impl SourceArgs {
    fn load(&self, cfg: &RunConfig) -> Result<Source> {
        if let Some(path) = &self.input {
            let low = tio::read_image(path).with_context(|| format!("reading {}", path.display()))?;
            let reference = match &self.reference {
                Some(r) => Some(tio::read_image(r).with_context(|| format!("reading {}", r.display()))?),
                None => None,
            };
            return Ok(Source {
                low,
                reference,
                index: 0,
            });
        }
        let index = self.index.unwrap_or(0);
        let held = cfg.eval_source()?;
        if index >= held.len() {
            bail!("--index {index} is past the {} held-out pairs", held.len());
        }
        let pair = held.pair(index);
        Ok(Source {
            low: pair.low,
            reference: Some(pair.clean),
            index: index as u64,
        })
    }

    fn is_synthetic(&self) -> bool {
        self.input.is_none()
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn default_path(explicit: &Option<PathBuf>, configured: &Option<String>, fallback: &str) -> PathBuf {
    explicit
        .clone()
        .or_else(|| configured.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_losses_copy(cfg: &RunConfig, paths: &CheckpointPaths) -> Result<()> {
    if let Some(extra) = &cfg.loss_csv {
        fs::copy(&paths.losses, extra).with_context(|| format!("writing {extra}"))?;
    }
    Ok(())
}

fn train_teacher(cfg: &RunConfig, out: &Option<PathBuf>) -> Result<()> {
    let out = default_path(out, &cfg.teacher_path, "teacher.tdpw");
    let report = pipeline::train_teacher(cfg)?;
    let paths = pipeline::save_checkpoint(&out, cfg, &report.state, &report.losses)
        .with_context(|| format!("writing {}", out.display()))?;
    write_losses_copy(cfg, &paths)?;
    let last = report.losses.last().map_or(f64::NAN, |r| r.total);
    eprintln!(
        "teacher: {} iterations, final loss {last:.5}, checkpoint {}",
        report.losses.len(),
        paths.params.display()
    );
    println!("{}", report.state.fingerprint());
    Ok(())
}

fn distill(cfg: &RunConfig, teacher: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<()> {
    let teacher_path = default_path(teacher, &cfg.teacher_path, "teacher.tdpw");
    let out = default_path(out, &cfg.student_path, "student.tdpw");
    let (_, net) = pipeline::load_checkpoint(&teacher_path, cfg)
        .with_context(|| format!("loading teacher {}", teacher_path.display()))?;
    let report = pipeline::distill(cfg, &TrainState::from_net(net, cfg.seed))?;
    let paths = pipeline::save_checkpoint(&out, cfg, &report.state, &report.losses)
        .with_context(|| format!("writing {}", out.display()))?;
    write_losses_copy(cfg, &paths)?;
    eprintln!(
        "student: K={} omega={} {} iterations, {} teacher and {} student evaluations, {} skipped, checkpoint {}",
        cfg.k_student,
        cfg.omega,
        report.losses.len(),
        report.teacher_evals,
        report.student_evals,
        report.skipped,
        paths.params.display()
    );
    println!("{}", report.state.fingerprint());
    Ok(())
}

fn load_model(cfg: &RunConfig, args: &ModelArgs) -> Result<(RunConfig, MicroNet, usize, SamplerMode)> {
    let path = default_path(&args.model, &cfg.student_path, "student.tdpw");
    let (model_cfg, net) =
        pipeline::load_checkpoint(&path, cfg).with_context(|| format!("loading model {}", path.display()))?;
    let k = args.steps.unwrap_or(cfg.k_student);
    let mode = if args.ancestral {
        SamplerMode::Ancestral
    } else {
        SamplerMode::Deterministic
    };
    Ok((model_cfg, net, k, mode))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn image_name(dir: &Path, stem: &str, t: &Tensor) -> PathBuf {
    dir.join(format!("{stem}.{}", if t.channels() == 1 { "pgm" } else { "ppm" }))
}

fn save(t: &Tensor, path: &Path) -> Result<()> {
    tio::write_image(&t.clamp(0.0, 1.0), path).with_context(|| format!("writing {}", path.display()))
}

fn sample(cfg: &RunConfig, model: &ModelArgs, source: &SourceArgs, out: &Path, trace: bool) -> Result<()> {
    let (model_cfg, net, k, mode) = load_model(cfg, model)?;
    let src = source.load(cfg)?;
    let sched = model_cfg.schedule()?;
    let grid = trajectory::sampling_grid(sched.steps(), k)?;
    create_dir(out)?;
    let seed = cfg.eval_seed().wrapping_add(src.index);
    let mut latents: Vec<TrajectoryPoint> = Vec::new();
    let result = trajectory::sample_on_grid(&net, &src.low, &grid, &sched, mode, seed, |_, p| {
        if trace {
            latents.push(p.clone());
        }
        Ok(())
    })?;
    for (i, p) in latents.iter().enumerate() {
        save(&p.x, &image_name(out, &format!("latent_{i:03}_t{:03}", p.step), &p.x))?;
    }
    save(&result.image, &image_name(out, "sample", &result.image))?;
    if source.is_synthetic() {
        save(&src.low, &image_name(out, "cond", &src.low))?;
    }
    let mut line = format!("steps {k}, nfe {}", result.nfe);
    if let Some(r) = &src.reference {
        if source.is_synthetic() {
            save(r, &image_name(out, "ref", r))?;
        }
        let m = metrics::report(&result.image, r)?;
        line.push_str(&format!(", psnr {:.3} dB, ssim {:.4}", m.psnr, m.ssim));
    }
    eprintln!("{line}; written to {}", out.display());
    Ok(())
}

const ENHANCE_CSV_HEADER: &str = "output,steps,nfe,psnr,ssim,mse";

fn enhance(cfg: &RunConfig, model: &ModelArgs, source: &SourceArgs, out: &Path, csv: &Option<PathBuf>) -> Result<()> {
    let (model_cfg, net, k, mode) = load_model(cfg, model)?;
    let src = source.load(cfg)?;
    let sched = model_cfg.schedule()?;
    let seed = cfg.eval_seed().wrapping_add(src.index);
    let enhanced = pipeline::enhance(&net, &src.low, model_cfg.patch, k, &sched, mode, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save(&enhanced, out)?;
    let report = match &src.reference {
        Some(r) => Some(metrics::report(&enhanced, r).context("comparing with the reference")?),
        None => None,
    };
    let csv_path = csv.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".csv");
        PathBuf::from(s)
    });
    let nfe = k * pipeline::tile_count(src.low.height(), src.low.width(), model_cfg.patch);
    append_csv_row(&csv_path, out, k, nfe, report)?;
    eprintln!("wrote {} and a row in {}", out.display(), csv_path.display());
    Ok(())
}

fn append_csv_row(path: &Path, out: &Path, k: usize, nfe: usize, report: Option<MetricReport>) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{ENHANCE_CSV_HEADER}")?;
    }
    let metrics = match report {
        Some(m) => format!("{},{},{}", m.psnr, m.ssim, m.mse),
        None => ",,".to_string(),
    };
    writeln!(f, "{},{k},{nfe},{metrics}", out.display())?;
    Ok(())
}

fn ratr_dump(cfg: &RunConfig, source: &SourceArgs, out: &Path) -> Result<()> {
    let src = source.load(cfg)?;
    let d = ratr::latent_clean(&src.low)?;
    create_dir(out)?;
    save(&d.illumination, &image_name(out, "illumination", &d.illumination))?;
    save(&d.noise_map, &image_name(out, "noise", &d.noise_map))?;
    save(&d.latent_clean, &image_name(out, "latent_clean", &d.latent_clean))?;
    eprintln!("decomposition written to {}", out.display());
    Ok(())
}

fn metrics_cmd(a: &Path, b: &Path) -> Result<()> {
    let ta = tio::read_image(a).with_context(|| format!("reading {}", a.display()))?;
    let tb = tio::read_image(b).with_context(|| format!("reading {}", b.display()))?;
    let m = metrics::report(&ta, &tb)?;
    println!("psnr,ssim,mse");
    println!("{},{},{}", m.psnr, m.ssim, m.mse);
    Ok(())
}

fn verify_cmd(cfg: &RunConfig, long: bool) -> Result<bool> {
    let results = verify::run_suite(cfg, long, |r| println!("{r}"));
    let ok = verify::all_hard_passed(&results);
    let failed = results.iter().filter(|r| !r.passed && !r.soft).count();
    eprintln!("{} properties, {failed} failed", results.len());
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::TrainTeacher { out } => train_teacher(&cfg, out)?,
        Command::Distill {
            teacher,
            steps,
            omega,
            out,
        } => {
            if let Some(k) = steps {
                cfg.k_student = *k;
            }
            if let Some(w) = omega {
                cfg.omega = *w;
            }
            distill(&cfg, teacher, out)?
        }
        Command::Sample {
            model,
            source,
            out,
            trace,
        } => sample(&cfg, model, source, out, *trace)?,
        Command::Enhance {
            model,
            source,
            out,
            csv,
        } => enhance(&cfg, model, source, out, csv)?,
        Command::Ratr { source, out } => ratr_dump(&cfg, source, out)?,
        Command::Metrics { a, b } => metrics_cmd(a, b)?,
        Command::Verify { long } => return verify_cmd(&cfg, *long),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn enhance_csv_appends_one_row_per_call() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("m.csv");
        let m = MetricReport {
            psnr: 20.0,
            ssim: 0.5,
            mse: 0.01,
        };
        append_csv_row(&csv, Path::new("o.ppm"), 2, 2, Some(m)).unwrap();
        append_csv_row(&csv, Path::new("p.ppm"), 4, 16, None).unwrap();
        let text = fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec![ENHANCE_CSV_HEADER, "o.ppm,2,2,20,0.5,0.01", "p.ppm,4,16,,,"]);
    }
}
