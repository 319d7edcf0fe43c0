//! The desk-scale experiment: pretrain a teacher on synthetic low-light
//! pairs, distill a few-step student, and compare both on held-out pairs.

use crate::data::SyntheticPairSource;
use crate::error::{Error, Result};
use crate::io::RunConfig;
use crate::metrics;
use crate::schedule::NoiseSchedule;
use crate::score::{self, MicroNet, ScoreFunction};
use crate::tensor::Tensor;
use crate::train::{self, DistillReport, LossRecord, TrainReport, TrainState};
use crate::trajectory::{self, SamplerMode};
use std::path::{Path, PathBuf};

/// Required margin of the few-step student over the few-step teacher.
pub const MIN_GAIN_DB: f64 = 0.5;
/// Required fraction of the teacher's many-step PSNR.
pub const MIN_MANY_STEP_RATIO: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub steps: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean PSNR/SSIM of `k`-step samples against the clean images. Pair `i`
/// starts from noise seeded with `seed + i`, so two predictors evaluated with
/// the same seed see identical starting noise.
pub fn evaluate<S: ScoreFunction + ?Sized>(
    score: &S,
    pairs: &SyntheticPairSource,
    k: usize,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    seed: u64,
) -> Result<EvalSummary> {
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for i in 0..pairs.len() {
        let p = pairs.pair(i);
        let out = trajectory::sample(score, &p.low, k, sched, mode, seed.wrapping_add(i as u64))?;
        psnr += metrics::psnr(&out, &p.clean)?;
        if out.height() >= metrics::SSIM_WINDOW && out.width() >= metrics::SSIM_WINDOW {
            ssim += metrics::ssim(&out, &p.clean)?;
        }
    }
    let n = pairs.len() as f64;
    Ok(EvalSummary {
        steps: k,
        psnr: psnr / n,
        ssim: ssim / n,
    })
}

pub fn train_teacher(cfg: &RunConfig) -> Result<TrainReport> {
    train::train_teacher(
        &cfg.train_source()?,
        &cfg.schedule()?,
        cfg.architecture()?,
        &cfg.teacher_config(),
    )
}

pub fn distill(cfg: &RunConfig, teacher: &TrainState) -> Result<DistillReport> {
    train::distill(
        teacher,
        &cfg.train_source()?,
        &cfg.schedule()?,
        &cfg.distill_config(),
        &cfg.feature_bank(),
    )
}

/// Tile origins covering `len` with windows of `patch`; the last window is
/// pulled back to end at the border.
fn tile_starts(len: usize, patch: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..len.saturating_sub(patch) + 1).step_by(patch).collect();
    if starts.last().is_some_and(|&s| s + patch < len) {
        starts.push(len - patch);
    }
    starts
}

/// Number of tiles [`enhance`] samples for an image.
pub fn tile_count(height: usize, width: usize, patch: usize) -> usize {
    if height < patch || width < patch {
        return 0;
    }
    tile_starts(height, patch).len() * tile_starts(width, patch).len()
}

/// Enhances an image of any size at least `patch x patch` by sampling each
/// patch-sized tile independently. Tile `i` draws noise from `seed + i`;
/// where edge tiles overlap, the later tile wins.
pub fn enhance<S: ScoreFunction + ?Sized>(
    score: &S,
    y: &Tensor,
    patch: usize,
    k: usize,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    seed: u64,
) -> Result<Tensor> {
    if y.height() < patch || y.width() < patch {
        return Err(Error::TooSmall {
            height: y.height(),
            width: y.width(),
            window: patch,
        });
    }
    let ch = y.channels();
    let mut out = Tensor::zeros(ch, y.height(), y.width());
    let mut tile = 0u64;
    for &i0 in &tile_starts(y.height(), patch) {
        for &j0 in &tile_starts(y.width(), patch) {
            let cond = Tensor::from_fn(ch, patch, patch, |c, i, j| y.get(c, i0 + i, j0 + j));
            let x = trajectory::sample(score, &cond, k, sched, mode, seed.wrapping_add(tile))?;
            for c in 0..ch {
                for i in 0..patch {
                    for j in 0..patch {
                        out.set(c, i0 + i, j0 + j, x.get(c, i, j));
                    }
                }
            }
            tile += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DeskOutcome {
    pub teacher: TrainReport,
    pub student: DistillReport,
    pub teacher_few: EvalSummary,
    pub teacher_many: EvalSummary,
    pub student_few: EvalSummary,
}

/// Teacher evaluated at `k_student` and `many_steps` deterministic steps,
/// student at `k_student`, all on the held-out pairs with shared noise.
pub fn desk_experiment(cfg: &RunConfig, many_steps: usize) -> Result<DeskOutcome> {
    let teacher = train_teacher(cfg)?;
    let student = distill(cfg, &teacher.state)?;
    let (sched, held, seed) = (cfg.schedule()?, cfg.eval_source()?, cfg.eval_seed());
    let t_net = teacher.state.ema_net();
    let s_net = student.state.ema_net();
    let det = SamplerMode::Deterministic;
    Ok(DeskOutcome {
        teacher_few: evaluate(&t_net, &held, cfg.k_student, &sched, det, seed)?,
        teacher_many: evaluate(&t_net, &held, many_steps, &sched, det, seed)?,
        student_few: evaluate(&s_net, &held, cfg.k_student, &sched, det, seed)?,
        teacher,
        student,
    })
}

/// Distills one student per refinement strength from the same teacher and
/// evaluates each at `k_student` steps.
pub fn omega_sweep(cfg: &RunConfig, teacher: &TrainState, omegas: &[f64]) -> Result<Vec<(f64, EvalSummary)>> {
    let (sched, held, seed) = (cfg.schedule()?, cfg.eval_source()?, cfg.eval_seed());
    omegas
        .iter()
        .map(|&omega| {
            let c = RunConfig { omega, ..cfg.clone() };
            let student = distill(&c, teacher)?;
            let e = evaluate(&student.state.ema_net(), &held, c.k_student, &sched, SamplerMode::Deterministic, seed)?;
            Ok((omega, e))
        })
        .collect()
}

/// Files making up one checkpoint: the averaged parameters at `base`, the
/// configuration that produced them and the per-iteration loss log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointPaths {
    pub params: PathBuf,
    pub config: PathBuf,
    pub losses: PathBuf,
}

impl CheckpointPaths {
    pub fn new(base: impl AsRef<Path>) -> Self {
        let base = base.as_ref();
        let with = |ext: &str| {
            let mut s = base.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        Self {
            params: base.to_path_buf(),
            config: with(".cfg"),
            losses: with(".loss.csv"),
        }
    }
}

/// Writes the moving-average parameters, `cfg` and the loss log.
pub fn save_checkpoint(
    base: impl AsRef<Path>,
    cfg: &RunConfig,
    state: &TrainState,
    losses: &[LossRecord],
) -> Result<CheckpointPaths> {
    let paths = CheckpointPaths::new(base);
    if let Some(dir) = paths.params.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    score::write_params(&paths.params, &state.ema_params)?;
    cfg.save(&paths.config)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(&paths.losses)?);
    train::write_loss_csv(&mut file, losses)?;
    std::io::Write::flush(&mut file)?;
    Ok(paths)
}

/// Loads a checkpoint's network. The architecture comes from the saved
/// configuration when present, otherwise from `fallback`.
pub fn load_checkpoint(base: impl AsRef<Path>, fallback: &RunConfig) -> Result<(RunConfig, MicroNet)> {
    let paths = CheckpointPaths::new(base);
    let cfg = if paths.config.exists() {
        RunConfig::load(&paths.config)?
    } else {
        fallback.clone()
    };
    let params = score::read_params(&paths.params)?;
    let arch = cfg.architecture()?;
    if params.len() != arch.param_count() {
        return Err(Error::Config(format!(
            "{} holds {} parameters but the configured network has {}",
            paths.params.display(),
            params.len(),
            arch.param_count()
        )));
    }
    Ok((cfg, MicroNet::from_params(arch, params)?))
}
