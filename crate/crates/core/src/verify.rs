//! Runtime property suite behind `trajdistill verify`.
//!
//! Every check is seeded and self-contained. The long mode adds the desk
//! experiment, which trains a teacher and students and takes minutes.

use crate::error::Result;
use crate::io::{self, PnmEncoding, RunConfig};
use crate::loss::{self, FeatureBank, LossWeights};
use crate::metrics;
use crate::pipeline;
use crate::ratr;
use crate::rng::{self, StreamRng};
use crate::schedule::{linear_beta_schedule, NoiseSchedule};
use crate::score::{constant_score, gaussian_oracle, Architecture, Head, MicroNet, ScoreFunction};
use crate::tensor::{Shape, Tensor};
use crate::train;
use crate::trajectory::{self, SamplerMode, TimeTriple};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Soft checks are reported but do not fail the suite.
    pub soft: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match (self.passed, self.soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

type Check = fn(u64) -> Result<(bool, String)>;

const FAST: &[(&str, Check)] = &[
    ("schedule", check_schedule),
    ("decoder-boundary", check_decoder_boundary),
    ("refinement-equivalence", check_refinement_equivalence),
    ("constant-score-collapse", check_constant_collapse),
    ("oracle-exactness", check_oracle_exactness),
    ("extraction-consistency", check_extraction),
    ("gradient-check", check_gradients),
    ("ratr-invariants", check_ratr),
    ("metric-oracles", check_metrics),
    ("config-round-trip", check_config),
    ("image-round-trip", check_images),
];

/// True when every non-soft check passed.
pub fn all_hard_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed || r.soft)
}

/// Runs the fast properties seeded by `cfg.seed`, then the desk experiment
/// configured by `cfg` when `long` is set. Errors inside a check count as
/// failures.
pub fn run_suite(cfg: &RunConfig, long: bool, mut report: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for &(name, check) in FAST {
        out.push(finish(name, check(cfg.seed)));
        report(out.last().expect("just pushed"));
    }
    if long {
        for r in desk_checks(cfg) {
            report(&r);
            out.push(r);
        }
    }
    out
}

fn finish(name: &'static str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            soft: false,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            soft: false,
            detail: format!("error: {e}"),
        },
    }
}

fn stream(seed: u64, name: &str) -> StreamRng {
    rng::substream(seed, name)
}

fn random_net(arch: Architecture, r: &mut StreamRng) -> MicroNet {
    let n = arch.param_count();
    let p = (0..n).map(|_| r.random_range(-0.3..0.3)).collect();
    MicroNet::from_params(arch, p).expect("count matches")
}

fn small_arch(shape: Shape, sched: &NoiseSchedule) -> Result<Architecture> {
    Ok(Architecture::new(shape, vec![12, 10], 8)?.with_head(Head::prior(sched, 0.5, 0.05)?))
}

fn check_schedule(_: u64) -> Result<(bool, String)> {
    let sched = linear_beta_schedule(512, 1e-4, 2e-2)?;
    let mut vp = 0.0f64;
    let mut monotone = true;
    let mut weights = true;
    for t in 1..=sched.steps() {
        vp = vp.max((sched.a(t).powi(2) + sched.sigma(t).powi(2) - 1.0).abs());
        monotone &= sched.alpha_bar(t) < sched.alpha_bar(t - 1) && sched.beta(t) >= sched.beta(t - 1);
        let w = sched.adaptive_weight(t)?;
        weights &= w >= 1.0 && w >= sched.snr(t) && (w == 1.0 || w == sched.snr(t));
    }
    let ok = vp <= 1e-12 && monotone && weights;
    Ok((ok, format!("max |a²+σ²−1| = {vp:.1e}, monotone {monotone}, weights {weights}")))
}

fn check_decoder_boundary(seed: u64) -> Result<(bool, String)> {
    let sched = linear_beta_schedule(64, 1e-4, 2e-2)?;
    let mut r = stream(seed, "verify-boundary");
    let x = Tensor::randn((2, 3, 3), &mut r);
    let e = Tensor::randn((2, 3, 3), &mut r);
    let c = constant_score(e.clone());
    let same = trajectory::decode(&c, &x, &x, 17, 17, &sched)? == x;
    let reversed = trajectory::decode(&c, &x, &x, 5, 9, &sched).is_err();
    // x_t = a_t x0 + sigma_t e decodes to x0 at step 0 when the score returns e
    let x0 = Tensor::uniform((2, 3, 3), 0.0, 1.0, &mut r);
    let xt = trajectory::forward_diffuse(&x0, 40, &e, &sched)?;
    let err = trajectory::decode(&c, &xt, &x, 40, 0, &sched)?.max_abs_diff(&x0)?;
    Ok((
        same && reversed && err < 1e-12,
        format!("s = t identity {same}, s > t rejected {reversed}, t -> 0 error {err:.1e}"),
    ))
}

fn check_refinement_equivalence(seed: u64) -> Result<(bool, String)> {
    let sched = linear_beta_schedule(512, 1e-4, 2e-2)?;
    let shape = (3, 4, 4);
    let mut r = stream(seed, "verify-refine");
    let net = random_net(small_arch(shape, &sched)?, &mut r);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let t = r.random_range(2..=sched.steps());
        let s = r.random_range(0..t - 1);
        let u = r.random_range(s + 1..t);
        let triple = TimeTriple::new(t, u, s, &sched)?;
        let omega = r.random_range(0.01..=1.0);
        let x_t = Tensor::randn(shape, &mut r);
        let y = Tensor::uniform(shape, 0.0, 0.5, &mut r);
        let x_tilde0 = Tensor::uniform(shape, 0.0, 1.0, &mut r);
        let eps_tilde = ratr::residual_noise(&x_t, &x_tilde0, t, &sched)?;
        let oracle;
        let score: &dyn ScoreFunction = if case % 2 == 0 {
            oracle = gaussian_oracle(Tensor::uniform(shape, 0.0, 1.0, &mut r), r.random_range(0.0..0.2), &sched)?;
            &oracle
        } else {
            &net
        };
        let second = trajectory::teacher_second_order_parts(score, &x_t, &y, triple, &sched)?;
        let anchor = ratr::refinement_anchor(score, &second.x_u, &y, u, s, &x_tilde0, &sched)?;
        let blended = trajectory::refine(&second.x_s, &anchor, omega)?;
        let direct = trajectory::refined_direct(score, &x_t, &y, triple, &eps_tilde, omega, &sched)?;
        for (b, d) in blended.as_slice().iter().zip(direct.as_slice()) {
            worst = worst.max((b - d).abs() / (1.0 + d.abs()));
        }
    }
    Ok((worst <= 1e-10, format!("1000 cases, max relative gap {worst:.1e}")))
}

fn check_constant_collapse(seed: u64) -> Result<(bool, String)> {
    let sched = linear_beta_schedule(32, 1e-4, 2e-2)?;
    let shape = (2, 3, 3);
    let mut r = stream(seed, "verify-collapse");
    let c = constant_score(Tensor::randn(shape, &mut r));
    let x_t = Tensor::randn(shape, &mut r);
    let mut worst = 0.0f64;
    let mut triples = 0;
    for t in 1..=32 {
        for u in 0..t {
            for s in 0..=u {
                let triple = TimeTriple::new(t, u, s, &sched)?;
                let two = trajectory::teacher_second_order(&c, &x_t, &x_t, triple, &sched)?;
                let one = trajectory::decode(&c, &x_t, &x_t, t, s, &sched)?;
                worst = worst.max(two.max_abs_diff(&one)?);
                triples += 1;
            }
        }
    }
    Ok((worst < 1e-10, format!("{triples} triples, max error {worst:.1e}")))
}

fn check_oracle_exactness(seed: u64) -> Result<(bool, String)> {
    let sched = linear_beta_schedule(512, 1e-4, 2e-2)?;
    let mut r = stream(seed, "verify-oracle");
    let mu = Tensor::uniform((3, 4, 4), 0.0, 1.0, &mut r);
    let oracle = gaussian_oracle(mu.clone(), 0.0, &sched)?;
    let mut worst = 0.0f64;
    for k in [1, 2, 4, 8, 16] {
        let out = trajectory::sample(&oracle, &mu, k, &sched, SamplerMode::Deterministic, seed ^ k as u64)?;
        worst = worst.max(out.max_abs_diff(&mu)?);
    }
    Ok((worst < 1e-8, format!("K in {{1,2,4,8,16}}, max error {worst:.1e}")))
}

fn check_extraction(seed: u64) -> Result<(bool, String)> {
    let sched = linear_beta_schedule(512, 1e-4, 2e-2)?;
    let mut r = stream(seed, "verify-extract");
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let t = r.random_range(1..=sched.steps());
        let s = r.random_range(0..t);
        let x0 = Tensor::uniform((1, 4, 4), 0.0, 1.0, &mut r);
        let e = Tensor::randn((1, 4, 4), &mut r);
        let x_t = trajectory::forward_diffuse(&x0, t, &e, &sched)?;
        let x_s = trajectory::forward_diffuse(&x0, s, &e, &sched)?;
        let back = trajectory::extract_clean(&x_s, &x_t, t, s, &sched)?;
        worst = worst.max(back.max_abs_diff(&x0)?);
    }
    Ok((worst < 1e-8, format!("200 shared-noise pairs, max error {worst:.1e}")))
}

/// Central differences over random parameter coordinates. Coordinates whose
/// gradient is below `1e-3` of the largest are skipped: there the difference
/// quotient is dominated by rounding in the loss, not by the gradient.
fn probe_gradient(
    net: &MicroNet,
    analytic: &[f64],
    loss_at: impl Fn(&MicroNet) -> Result<f64>,
    probes: usize,
    r: &mut StreamRng,
) -> Result<f64> {
    const H: f64 = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    let largest = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let resolvable: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i].abs() >= 1e-3 * largest).collect();
    if resolvable.is_empty() {
        return Err(crate::Error::param("gradient", "identically zero"));
    }
    for _ in 0..probes {
        let i = resolvable[r.random_range(0..resolvable.len())];
        let base = net.params()[i];
        probe.params_mut()[i] = base + H;
        let up = loss_at(&probe)?;
        probe.params_mut()[i] = base - H;
        let down = loss_at(&probe)?;
        probe.params_mut()[i] = base;
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1e-8));
    }
    Ok(worst)
}

fn check_gradients(seed: u64) -> Result<(bool, String)> {
    let sched = linear_beta_schedule(512, 1e-4, 2e-2)?;
    let shape = (3, 8, 8);
    let mut r = stream(seed, "verify-grad");
    let net = random_net(small_arch(shape, &sched)?, &mut r);
    let bank = FeatureBank::seeded(seed);
    let w = LossWeights::default();
    let x0 = Tensor::uniform(shape, 0.2, 1.0, &mut r);
    let y = x0.scale(0.3);
    let (t, s) = (300, 140);
    let x_t = trajectory::forward_diffuse(&x0, t, &Tensor::randn(shape, &mut r), &sched)?;
    let refined = Tensor::randn(shape, &mut r);
    let eps_true = Tensor::randn(shape, &mut r);
    const PROBES: usize = 60;

    let (pred, cache) = net.forward_cached(&x_t, &y, t)?;
    let (_, g) = loss::eps_loss_with_grad(&eps_true, &pred, &w)?;
    let analytic = net.backward(&g, &cache)?;
    let eps_term = |n: &MicroNet| loss::eps_loss(&eps_true, &n.forward(&x_t, &y, t)?, &w);
    let mut worst = vec![("eps", probe_gradient(&net, &analytic, eps_term, PROBES, &mut r)?)];

    let item = train::student_item(&x_t, &pred, &refined, &x0, t, s, &sched, &w, &bank)?;
    let term = |n: &MicroNet, k: usize| -> Result<f64> {
        let it = train::student_item(&x_t, &n.forward(&x_t, &y, t)?, &refined, &x0, t, s, &sched, &w, &bank)?;
        Ok([it.parts.main, it.parts.pixel, it.parts.perceptual][k])
    };
    for (k, name) in ["distill", "pixel", "perceptual"].into_iter().enumerate() {
        let analytic = net.backward(&item.grad_eps[k], &cache)?;
        worst.push((name, probe_gradient(&net, &analytic, |n| term(n, k), PROBES, &mut r)?));
    }
    let ok = worst.iter().all(|(_, e)| *e < 1e-4);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, format!("{PROBES} probes per term, max relative error: {detail}")))
}

fn check_ratr(seed: u64) -> Result<(bool, String)> {
    let sched = linear_beta_schedule(512, 1e-4, 2e-2)?;
    let flat = Tensor::full(3, 6, 6, 0.37);
    let flat_ok = ratr::latent_clean(&flat)?.latent_clean == Tensor::full(3, 6, 6, 1.0);

    let mut r = stream(seed, "verify-ratr");
    let shape = (3, 8, 8);
    let x0 = Tensor::uniform(shape, 0.0, 1.0, &mut r);
    let e = Tensor::randn(shape, &mut r);
    let x_t = trajectory::forward_diffuse(&x0, 200, &e, &sched)?;
    let recover = ratr::residual_noise(&x_t, &x0, 200, &sched)?.max_abs_diff(&e)?;

    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
    for _ in 0..10_000 / x0.len() + 1 {
        let t = r.random_range(1..=sched.steps());
        let e = Tensor::randn(shape, &mut r);
        let x_t = trajectory::forward_diffuse(&x0, t, &e, &sched)?;
        for v in ratr::residual_noise(&x_t, &x0, t, &sched)?.as_slice() {
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    }
    let mean = sum / n;
    let var = sq / n - mean * mean;
    // standard errors of the sample mean and variance of unit normals
    let (se_mean, se_var) = (1.0 / n.sqrt(), (2.0 / n).sqrt());
    let moments = mean.abs() < 3.0 * se_mean && (var - 1.0).abs() < 3.0 * se_var;
    Ok((
        flat_ok && recover <= 1e-12 && moments,
        format!("flat field {flat_ok}, ε recovery {recover:.1e}, {n} draws mean {mean:.4} var {var:.4}"),
    ))
}

fn check_metrics(seed: u64) -> Result<(bool, String)> {
    let mut r = stream(seed, "verify-metrics");
    let a = Tensor::uniform((3, 16, 16), 0.2, 0.8, &mut r);
    let shifted = a.map(|v| v + 0.1);
    let p = metrics::psnr(&a, &shifted)?;
    let self_ssim = metrics::ssim(&a, &a)?;
    let b = Tensor::uniform((3, 16, 16), 0.0, 1.0, &mut r);
    let naive = naive_psnr(&a, &b);
    let gap = (metrics::psnr(&a, &b)? - naive).abs();
    Ok((
        (p - 20.0).abs() <= 1e-6 && self_ssim == 1.0 && gap < 1e-9,
        format!("offset PSNR {p:.9} dB, self SSIM {self_ssim}, naive PSNR gap {gap:.1e}"),
    ))
}

fn naive_psnr(a: &Tensor, b: &Tensor) -> f64 {
    let (la, lb) = (a.luminance(), b.luminance());
    let mut sum = 0.0;
    for i in 0..la.height() {
        for j in 0..la.width() {
            sum += (la.get(0, i, j) - lb.get(0, i, j)).powi(2);
        }
    }
    10.0 * (1.0 / (sum / la.len() as f64)).log10()
}

fn check_config(seed: u64) -> Result<(bool, String)> {
    let mut r = stream(seed, "verify-config");
    let mut cfg = RunConfig {
        seed: r.random(),
        omega: r.random_range(0.01..1.0),
        teacher_lr: r.random_range(1e-6..1e-2),
        hidden: vec![r.random_range(1..300), r.random_range(1..300)],
        loss_csv: Some("runs/loss.csv".into()),
        ..RunConfig::default()
    };
    cfg.prior_var = r.random_range(1e-3..1.0);
    let back = RunConfig::parse(&cfg.serialize())?;
    let unknown = RunConfig::parse("not_a_key = 1").is_err();
    Ok((back == cfg && unknown, format!("round trip {}, unknown key rejected {unknown}", back == cfg)))
}

fn check_images(seed: u64) -> Result<(bool, String)> {
    let mut r = stream(seed, "verify-images");
    let img = Tensor::uniform((3, 5, 7), 0.0, 1.0, &mut r);
    let mut worst = 0.0f64;
    for enc in [PnmEncoding::Plain, PnmEncoding::Binary] {
        for maxval in [255u16, 65535] {
            let back = io::decode_pnm(&io::encode_pnm(&img, enc, maxval)?)?;
            worst = worst.max(back.max_abs_diff(&img)? * maxval as f64);
        }
    }
    Ok((worst <= 0.5 + 1e-9, format!("max error {worst:.3} quantization steps")))
}

/// Desk experiment checks: the distilled two-step student against the
/// teacher, and the refinement strength comparison.
pub fn desk_checks(cfg: &RunConfig) -> Vec<CheckResult> {
    match desk_checks_inner(cfg) {
        Ok(v) => v,
        Err(e) => vec![CheckResult {
            name: "desk-distillation",
            passed: false,
            soft: false,
            detail: format!("error: {e}"),
        }],
    }
}

fn desk_checks_inner(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let outcome = pipeline::desk_experiment(cfg, 16)?;
    let (t2, t16, s2) = (outcome.teacher_few.psnr, outcome.teacher_many.psnr, outcome.student_few.psnr);
    let distill_ok = s2 >= t2 + pipeline::MIN_GAIN_DB && s2 >= pipeline::MIN_MANY_STEP_RATIO * t16;
    let mut out = vec![CheckResult {
        name: "desk-distillation",
        passed: distill_ok,
        soft: false,
        detail: format!(
            "student K={k} {s2:.3} dB, teacher K={k} {t2:.3} dB, teacher K=16 {t16:.3} dB (seed {})",
            cfg.seed,
            k = cfg.k_student
        ),
    }];
    let sweep = pipeline::omega_sweep(cfg, &outcome.teacher.state, &[cfg.omega, 1.0])?;
    let (with, without) = (sweep[0].1.psnr, sweep[1].1.psnr);
    out.push(CheckResult {
        name: "omega-sweep",
        passed: with > without,
        soft: true,
        detail: format!(
            "ω={} {with:.3} dB vs ω=1 {without:.3} dB (seed {}, soft)",
            cfg.omega, cfg.seed
        ),
    });
    Ok(out)
}
