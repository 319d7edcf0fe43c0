//! Teacher pretraining and refined-trajectory distillation.

use crate::data::SyntheticPairSource;
use crate::error::{Error, Result};
use crate::loss::{self, FeatureBank, LossParts, LossWeights};
use crate::ratr;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::score::{Architecture, CountingScore, MicroNet};
use crate::tensor::Tensor;
use crate::trajectory::{self, TimeTriple};
use rand::Rng;
use sha2::{Digest, Sha256};
use std::io::Write;

pub const EMA_DECAY: f64 = 0.9999;

/// Parameters, their moving average and the optimizer's moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub net: MicroNet,
    pub ema_params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub iter: u64,
    pub rng_seed: u64,
}

impl TrainState {
    /// Fresh state; parameters come from the `init` substream of `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let net = MicroNet::init(arch, &mut rng::substream(seed, rng::INIT));
        Self::from_net(net, seed)
    }

    /// State whose parameters and moving average both start at `net`.
    pub fn from_net(net: MicroNet, seed: u64) -> Self {
        let n = net.params().len();
        Self {
            ema_params: net.params().to_vec(),
            net,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            iter: 0,
            rng_seed: seed,
        }
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    /// A network carrying the moving-average parameters.
    pub fn ema_net(&self) -> MicroNet {
        self.net
            .with_params(self.ema_params.clone())
            .expect("ema has the parameter count of the net")
    }

    /// SHA-256 over the raw and averaged parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.net.params().iter().chain(&self.ema_params) {
            h.update(p.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(state: &mut TrainState, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::param("decay", format!("{decay} not in [0, 1)")));
    }
    let keep = 1.0 - decay;
    for (e, &p) in state.ema_params.iter_mut().zip(state.net.params()) {
        *e = decay * *e + keep * p;
    }
    Ok(())
}

/// Decay actually applied after `iter` completed steps. Early steps use a
/// shorter horizon so the average is not dominated by the initialization.
pub fn warmup_decay(decay: f64, iter: u64) -> f64 {
    decay.min((1.0 + iter as f64) / (10.0 + iter as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Optimizer {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional L2 penalty coefficient added to the gradient.
    pub l2: f64,
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
        }
    }

    /// One adaptive-moment step with the learning rate decayed linearly to 0
    /// over `total` steps.
    fn step(&self, state: &mut TrainState, grad: &mut [f64], total: u64) {
        let k = state.iter;
        let lr = self.lr * (1.0 - k as f64 / total.max(1) as f64);
        let n = (k + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(n);
        let bc2 = 1.0 - self.beta2.powi(n);
        let l2 = self.l2;
        let params = state.net.params_mut();
        for i in 0..params.len() {
            let g = grad[i] + l2 * params[i];
            let m = self.beta1 * state.adam_m[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * state.adam_v[i] + (1.0 - self.beta2) * g * g;
            state.adam_m[i] = m;
            state.adam_v[i] = v;
            params[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            grad[i] = 0.0;
        }
        state.iter += 1;
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub parts: LossParts,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,main,pixel,perceptual,total";

/// Writes `iteration,main,pixel,perceptual,total` rows; `main` is the
/// ε-loss for the teacher and the distillation loss for the student.
pub fn write_loss_csv<W: Write>(mut w: W, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.iteration, r.parts.main, r.parts.pixel, r.parts.perceptual, r.total
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub iterations: u64,
    pub lr: f64,
    pub batch: usize,
    pub ema_decay: f64,
    pub l2: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            lr: 1e-4,
            batch: 16,
            ema_decay: EMA_DECAY,
            l2: 0.0,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::param("batch", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", format!("{}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::param("ema_decay", format!("{}", self.ema_decay)));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub state: TrainState,
    pub losses: Vec<LossRecord>,
}

/// ε-prediction pretraining on the Gaussian flow.
pub fn train_teacher(
    data: &SyntheticPairSource,
    sched: &NoiseSchedule,
    arch: Architecture,
    config: &TeacherConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if arch.image != data.shape() {
        return Err(Error::Shape {
            expected: arch.image,
            got: data.shape(),
        });
    }
    let mut state = TrainState::new(arch, config.seed);
    let losses = continue_teacher(&mut state, data, sched, config)?;
    Ok(TrainReport { state, losses })
}

/// Runs `config.iterations` teacher steps on an existing state.
pub fn continue_teacher(
    state: &mut TrainState,
    data: &SyntheticPairSource,
    sched: &NoiseSchedule,
    config: &TeacherConfig,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    let mut opt = Optimizer::adam(config.lr);
    opt.l2 = config.l2;
    let mut r = rng::substream(config.seed, rng::TRAIN);
    let mut grad = vec![0.0; state.params().len()];
    let mut losses = Vec::with_capacity(config.iterations as usize);
    let scale = 1.0 / config.batch as f64;
    let shape = data.shape();
    let start = state.iter;

    for _ in 0..config.iterations {
        let mut batch_loss = 0.0;
        for _ in 0..config.batch {
            let pair = data.pair(r.random_range(0..data.len()));
            let t = r.random_range(1..=sched.steps());
            let eps = Tensor::randn(shape, &mut r);
            let x_t = trajectory::forward_diffuse(&pair.clean, t, &eps, sched)?;
            let (pred, cache) = state.net.forward_cached(&x_t, &pair.low, t)?;
            let (l, g) = loss::eps_loss_with_grad(&eps, &pred, &config.weights)?;
            batch_loss += l * scale;
            state.net.backward_into(&g.scale(scale), &cache, &mut grad)?;
        }
        if !batch_loss.is_finite() {
            return Err(Error::Diverged { iteration: state.iter });
        }
        let iteration = state.iter;
        opt.step(state, &mut grad, start + config.iterations);
        let decay = warmup_decay(config.ema_decay, state.iter);
        ema_update(state, decay)?;
        let parts = LossParts {
            main: batch_loss,
            ..Default::default()
        };
        losses.push(LossRecord {
            iteration,
            parts,
            total: loss::total_loss(&parts)?,
        });
    }
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub k_student: usize,
    pub omega: f64,
    pub iterations: u64,
    pub lr: f64,
    pub batch: usize,
    pub patch: usize,
    pub ema_decay: f64,
    pub weights: LossWeights,
    /// Distill from the teacher's moving average instead of its raw weights.
    pub ema_teacher: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            k_student: 2,
            omega: 0.8,
            iterations: 5000,
            lr: 1e-4,
            batch: 16,
            patch: 8,
            ema_decay: EMA_DECAY,
            weights: LossWeights::default(),
            ema_teacher: true,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.k_student == 0 || self.k_student > sched.steps() {
            return Err(Error::param(
                "k_student",
                format!("{} not in 1..={}", self.k_student, sched.steps()),
            ));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::param("omega", format!("{} not in (0, 1]", self.omega)));
        }
        if self.batch == 0 {
            return Err(Error::param("batch", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr", format!("{}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::param("ema_decay", format!("{}", self.ema_decay)));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone)]
pub struct DistillReport {
    pub state: TrainState,
    pub losses: Vec<LossRecord>,
    /// Items dropped because their `(t, s)` extraction was singular.
    pub skipped: u64,
    pub teacher_evals: u64,
    pub student_evals: u64,
}

/// Per-iteration score-evaluation budget per batch item.
pub const TEACHER_EVALS_PER_ITEM: usize = 3;
pub const STUDENT_EVALS_PER_ITEM: usize = 1;

/// One distillation item's loss terms and the gradient of each with respect
/// to the student's ε prediction.
#[derive(Debug, Clone)]
pub struct StudentItem {
    pub parts: LossParts,
    pub x_est: Tensor,
    /// `[distill, pixel, perceptual]`.
    pub grad_eps: [Tensor; 3],
}

impl StudentItem {
    pub fn grad_eps_total(&self) -> Result<Tensor> {
        self.grad_eps[0].add(&self.grad_eps[1])?.add(&self.grad_eps[2])
    }
}

/// Maps the refined teacher trajectory and the student's one-jump
/// trajectory to clean-image estimates and scores the student against the
/// target and `x0`. `x_est` is affine in ε with slope `c_eps / den`.
#[allow(clippy::too_many_arguments)]
pub fn student_item(
    x_t: &Tensor,
    eps_student: &Tensor,
    refined: &Tensor,
    x0: &Tensor,
    t: usize,
    s: usize,
    sched: &NoiseSchedule,
    weights: &LossWeights,
    bank: &FeatureBank,
) -> Result<StudentItem> {
    let den = trajectory::extraction_denominator(t, s, sched)?;
    let x_target = trajectory::extract_clean(refined, x_t, t, s, sched)?;
    let x_student = trajectory::decode_with_eps(x_t, eps_student, t, s, sched)?;
    let x_est = trajectory::extract_clean(&x_student, x_t, t, s, sched)?;
    let (main, gd) = loss::distill_loss_with_grad(&x_target, &x_est, t, sched)?;
    let (pixel, gp) = loss::pixel_loss_with_grad(x0, &x_est, weights)?;
    let (perceptual, gq) = loss::perceptual_loss_with_grad(x0, &x_est, bank, weights)?;
    let slope = trajectory::decoder_coefficients(t, s, sched).1 / den;
    Ok(StudentItem {
        parts: LossParts {
            main,
            pixel,
            perceptual,
        },
        x_est,
        grad_eps: [gd.scale(slope), gp.scale(slope), gq.scale(slope)],
    })
}

/// Fraction of skipped items above which distillation is rejected.
pub const MAX_SKIP_FRACTION: f64 = 0.01;

/// Trains a student, initialized from the teacher, to match the refined
/// teacher trajectory on the adjacent node pairs of its `k_student` grid.
///
/// Per item: `x_t` from the forward process; the teacher decodes
/// `t -> u -> s` and builds the anchor `a_s x~0 + sigma_s eps(x_u, u)` from
/// the reflectance of `y`; the blended trajectory and the student's one-jump
/// trajectory are mapped to clean-image estimates and compared with the
/// adaptive weight, alongside pixel and perceptual terms against `x0`.
pub fn distill(
    teacher: &TrainState,
    data: &SyntheticPairSource,
    sched: &NoiseSchedule,
    dconf: &DistillConfig,
    bank: &FeatureBank,
) -> Result<DistillReport> {
    dconf.validate(sched)?;
    let teacher_net = if dconf.ema_teacher {
        teacher.ema_net()
    } else {
        teacher.net.clone()
    };
    if teacher_net.architecture().image != data.shape() {
        return Err(Error::Shape {
            expected: teacher_net.architecture().image,
            got: data.shape(),
        });
    }
    let teacher_score = CountingScore::new(teacher_net.clone());
    let mut state = TrainState::from_net(teacher_net, dconf.seed);

    let grid = trajectory::sampling_grid(sched.steps(), dconf.k_student)?;
    let opt = Optimizer::adam(dconf.lr);
    let mut r = rng::substream(dconf.seed, rng::TRAIN);
    let mut grad = vec![0.0; state.params().len()];
    let mut losses = Vec::with_capacity(dconf.iterations as usize);
    let shape = data.shape();
    let mut skipped = 0u64;
    let (mut teacher_evals, mut student_evals) = (0u64, 0u64);

    for _ in 0..dconf.iterations {
        let mut sums = LossParts::default();
        let mut used = 0usize;
        let mut item_grads: Vec<(Tensor, crate::score::ForwardCache)> = Vec::with_capacity(dconf.batch);
        teacher_score.reset();
        for _ in 0..dconf.batch {
            let pair = data.pair(r.random_range(0..data.len()));
            let node = r.random_range(0..dconf.k_student);
            let (t, s) = (grid[node], grid[node + 1]);
            let triple = TimeTriple::midpoint(t, s, sched)?;
            let eps = Tensor::randn(shape, &mut r);
            let x_t = trajectory::forward_diffuse(&pair.clean, t, &eps, sched)?;
            let x_tilde0 = ratr::latent_clean(&pair.low)?.latent_clean;

            let second = trajectory::teacher_second_order_parts(&teacher_score, &x_t, &pair.low, triple, sched)?;
            let anchor = ratr::refinement_anchor(&teacher_score, &second.x_u, &pair.low, triple.u, s, &x_tilde0, sched)?;
            let refined = trajectory::refine(&second.x_s, &anchor, dconf.omega)?;

            let (eps_student, cache) = state.net.forward_cached(&x_t, &pair.low, t)?;
            student_evals += 1;

            let item = match student_item(&x_t, &eps_student, &refined, &pair.clean, t, s, sched, &dconf.weights, bank) {
                Ok(item) => item,
                Err(Error::DegeneratePair { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            sums.main += item.parts.main;
            sums.pixel += item.parts.pixel;
            sums.perceptual += item.parts.perceptual;
            item_grads.push((item.grad_eps_total()?, cache));
            used += 1;
        }
        let evals = teacher_score.calls();
        debug_assert_eq!(evals, TEACHER_EVALS_PER_ITEM * dconf.batch);
        teacher_evals += evals as u64;

        let iteration = state.iter;
        if used > 0 {
            let scale = 1.0 / used as f64;
            for (g, cache) in &item_grads {
                state.net.backward_into(&g.scale(scale), cache, &mut grad)?;
            }
            sums.main *= scale;
            sums.pixel *= scale;
            sums.perceptual *= scale;
        }
        let total = loss::total_loss(&sums).map_err(|_| Error::Diverged { iteration })?;
        opt.step(&mut state, &mut grad, dconf.iterations);
        let decay = warmup_decay(dconf.ema_decay, state.iter);
        ema_update(&mut state, decay)?;
        losses.push(LossRecord {
            iteration,
            parts: sums,
            total,
        });
    }

    let items = dconf.iterations * dconf.batch as u64;
    if items > 0 && skipped as f64 > MAX_SKIP_FRACTION * items as f64 {
        return Err(Error::Config(format!(
            "{skipped} of {items} distillation items had a singular extraction pair"
        )));
    }
    Ok(DistillReport {
        state,
        losses,
        skipped,
        teacher_evals,
        student_evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::linear_beta_schedule;

    fn small_arch() -> Architecture {
        Architecture::new((1, 4, 4), vec![32, 32], 8).unwrap()
    }

    #[test]
    fn ema_cases() {
        let mut st = TrainState::new(small_arch(), 1);
        for p in st.net.params_mut() {
            *p = 2.0;
        }
        st.ema_params.iter_mut().for_each(|e| *e = 0.0);
        ema_update(&mut st, 0.0).unwrap();
        assert_eq!(st.ema_params, st.params());

        st.ema_params.iter_mut().for_each(|e| *e = 0.0);
        let decay: f64 = 0.9;
        for k in 1..=20 {
            ema_update(&mut st, decay).unwrap();
            let gap = 2.0 * decay.powi(k);
            assert!((2.0 - st.ema_params[0] - gap).abs() < 1e-12);
        }
        assert!(ema_update(&mut st, 1.0).is_err());
    }

    #[test]
    fn ema_matches_scalar_recurrence() {
        let mut st = TrainState::new(Architecture::new((1, 1, 1), vec![], 0).unwrap(), 2);
        let mut r = rng::substream(3, "ema");
        let mut oracle = st.ema_params.clone();
        for _ in 0..50 {
            let vals: Vec<f64> = (0..st.params().len()).map(|_| r.random_range(-1.0..1.0)).collect();
            st.net.set_params(&vals).unwrap();
            ema_update(&mut st, 0.95).unwrap();
            for (o, v) in oracle.iter_mut().zip(&vals) {
                *o = 0.95 * *o + 0.05 * v;
            }
        }
        for (a, b) in st.ema_params.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let s = linear_beta_schedule(64, 1e-4, 2e-2).unwrap();
        let data = SyntheticPairSource::new(1, 8, 4, 1, Default::default()).unwrap();
        let cfg = TeacherConfig {
            iterations: 0,
            ..Default::default()
        };
        let rep = train_teacher(&data, &s, small_arch(), &cfg).unwrap();
        assert_eq!(rep.state, TrainState::new(small_arch(), 0));
        assert!(rep.losses.is_empty());
    }

    #[test]
    fn teacher_training_is_deterministic_and_learns() {
        let s = linear_beta_schedule(64, 1e-4, 2e-2).unwrap();
        let data = SyntheticPairSource::new(1, 64, 4, 1, Default::default()).unwrap();
        let cfg = TeacherConfig {
            iterations: 300,
            lr: 1e-3,
            batch: 8,
            ..Default::default()
        };
        let a = train_teacher(&data, &s, small_arch(), &cfg).unwrap();
        let b = train_teacher(&data, &s, small_arch(), &cfg).unwrap();
        assert_eq!(a.state.fingerprint(), b.state.fingerprint());
        assert_eq!(a.losses, b.losses);
        let head: f64 = a.losses[..50].iter().map(|r| r.total).sum();
        let tail: f64 = a.losses[250..].iter().map(|r| r.total).sum();
        assert!(tail < head);
    }

    #[test]
    fn distill_budget_and_teacher_immutability() {
        let s = linear_beta_schedule(64, 1e-4, 2e-2).unwrap();
        let data = SyntheticPairSource::new(1, 32, 4, 1, Default::default()).unwrap();
        let teacher = TrainState::new(small_arch(), 5);
        let before = teacher.fingerprint();
        let d = DistillConfig {
            iterations: 20,
            batch: 4,
            k_student: 4,
            ..Default::default()
        };
        let rep = distill(&teacher, &data, &s, &d, &FeatureBank::seeded(1)).unwrap();
        assert_eq!(teacher.fingerprint(), before);
        assert_eq!(rep.teacher_evals, 20 * 4 * 3);
        assert_eq!(rep.student_evals, 20 * 4);
        assert_eq!(rep.skipped, 0);
        assert_eq!(rep.state.iter, 20);
        assert_eq!(rep.losses.len(), 20);
    }

    #[test]
    fn distill_rejects_bad_config() {
        let s = linear_beta_schedule(64, 1e-4, 2e-2).unwrap();
        let data = SyntheticPairSource::new(1, 4, 4, 1, Default::default()).unwrap();
        let teacher = TrainState::new(small_arch(), 5);
        for d in [
            DistillConfig { omega: 0.0, ..Default::default() },
            DistillConfig { k_student: 0, ..Default::default() },
            DistillConfig { k_student: 65, ..Default::default() },
        ] {
            assert!(distill(&teacher, &data, &s, &d, &FeatureBank::Identity).is_err());
        }
    }

    #[test]
    fn loss_csv_layout() {
        let mut buf = Vec::new();
        let rec = LossRecord {
            iteration: 3,
            parts: LossParts { main: 0.5, pixel: 0.25, perceptual: 0.125 },
            total: 0.875,
        };
        write_loss_csv(&mut buf, &[rec]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,main,pixel,perceptual,total\n3,0.5,0.25,0.125,0.875\n");
    }
}
