//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero when any hard criterion fails. Reference values are
//! computed here with plain loops, independently of the library code paths
//! they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};
use trajdistill::io::RunConfig;
use trajdistill::loss::{self, FeatureBank, LossWeights};
use trajdistill::pipeline::{self, DeskOutcome};
use trajdistill::score::gaussian_oracle;
use trajdistill::{
    linear_beta_schedule, metrics, ratr, train, trajectory, Architecture, Head, MicroNet, NoiseSchedule,
    SamplerMode, ScoreFunction, Tensor, TimeTriple,
};

const SEED: u64 = 20_240_601;

struct Outcome {
    passed: bool,
    soft: bool,
    detail: String,
}

impl Outcome {
    fn hard(passed: bool, detail: String) -> Self {
        Self { passed, soft: false, detail }
    }
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(SEED ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn randn(shape: (usize, usize, usize), r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, r)
}

fn seconds(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

/// Alpha-bar by direct product of `1 - beta_i` over the linear ramp.
fn reference_alpha_bar(steps: usize, b0: f64, b1: f64) -> Vec<f64> {
    let mut out = vec![1.0];
    let mut prod = 1.0;
    for i in 1..=steps {
        let beta = b0 + (b1 - b0) * (i - 1) as f64 / (steps - 1) as f64;
        prod *= 1.0 - beta;
        out.push(prod);
    }
    out
}

fn schedule_sanity() -> Outcome {
    let sched = linear_beta_schedule(512, 1e-4, 2e-2).unwrap();
    let reference = reference_alpha_bar(512, 1e-4, 2e-2);
    let (mut vp, mut rel, mut monotone, mut weights) = (0.0f64, 0.0f64, true, true);
    for (t, &ab) in reference.iter().enumerate() {
        let (a, s) = (sched.a(t), sched.sigma(t));
        vp = vp.max((a * a + s * s - 1.0).abs());
        rel = rel.max((sched.alpha_bar(t) - ab).abs() / ab);
        if t >= 1 {
            monotone &= sched.alpha_bar(t) < sched.alpha_bar(t - 1);
            monotone &= sched.sigma(t) > sched.sigma(t - 1);
            let expected = (ab / (1.0 - ab)).max(1.0);
            let w = sched.adaptive_weight(t).unwrap();
            weights &= w >= 1.0 && (w - expected).abs() <= 1e-9 * expected;
        }
    }
    Outcome::hard(
        vp <= 1e-12 && rel <= 1e-12 && monotone && weights,
        format!("max |a²+σ²−1| {vp:.1e}, alpha-bar vs product {rel:.1e}, monotone {monotone}, weights {weights}"),
    )
}

fn small_net(shape: (usize, usize, usize), sched: &NoiseSchedule, r: &mut ChaCha8Rng) -> MicroNet {
    let arch = Architecture::new(shape, vec![16, 12], 8)
        .unwrap()
        .with_head(Head::prior(sched, 0.5, 0.05).unwrap());
    let params = (0..arch.param_count()).map(|_| r.random_range(-0.3..0.3)).collect();
    MicroNet::from_params(arch, params).unwrap()
}

/// Second-order trajectory blended with the anchor, written with raw slices.
#[allow(clippy::too_many_arguments)]
fn reference_refined(
    score: &dyn ScoreFunction,
    x_t: &Tensor,
    y: &Tensor,
    (t, u, s): (usize, usize, usize),
    x_tilde0: &Tensor,
    omega: f64,
    sched: &NoiseSchedule,
) -> Vec<f64> {
    let jump = |x: &[f64], e: &[f64], from: usize, to: usize| -> Vec<f64> {
        let ratio = sched.a(to) / sched.a(from);
        x.iter()
            .zip(e)
            .map(|(x, e)| ratio * x + (sched.sigma(to) - ratio * sched.sigma(from)) * e)
            .collect()
    };
    let eps_t = score.predict(x_t, y, t).unwrap();
    let (c, h, w) = x_t.shape();
    let x_u = Tensor::from_vec(c, h, w, jump(x_t.as_slice(), eps_t.as_slice(), t, u)).unwrap();
    let eps_u = score.predict(&x_u, y, u).unwrap();
    let x_s = jump(x_u.as_slice(), eps_u.as_slice(), u, s);
    x_s.iter()
        .zip(eps_u.as_slice())
        .zip(x_tilde0.as_slice())
        .map(|((xs, eu), c)| omega * xs + (1.0 - omega) * (sched.a(s) * c + sched.sigma(s) * eu))
        .collect()
}

fn refinement_equivalence() -> Outcome {
    let start = Instant::now();
    let sched = linear_beta_schedule(512, 1e-4, 2e-2).unwrap();
    let shape = (3, 4, 4);
    let mut r = rng(1);
    let net = small_net(shape, &sched, &mut r);
    let (mut blend_vs_direct, mut blend_vs_reference) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let t = r.random_range(2..=512);
        let s = r.random_range(0..t - 1);
        let u = r.random_range(s + 1..t);
        let omega = r.random_range(0.01..=1.0);
        let x_t = randn(shape, &mut r);
        let y = Tensor::uniform(shape, 0.0, 0.5, &mut r);
        let x_tilde0 = Tensor::uniform(shape, 0.0, 1.0, &mut r);
        let oracle = gaussian_oracle(Tensor::uniform(shape, 0.0, 1.0, &mut r), r.random_range(0.0..0.2), &sched).unwrap();
        let score: &dyn ScoreFunction = if case % 2 == 0 { &oracle } else { &net };

        let triple = TimeTriple::new(t, u, s, &sched).unwrap();
        let parts = trajectory::teacher_second_order_parts(score, &x_t, &y, triple, &sched).unwrap();
        let anchor = ratr::refinement_anchor(score, &parts.x_u, &y, u, s, &x_tilde0, &sched).unwrap();
        let blended = trajectory::refine(&parts.x_s, &anchor, omega).unwrap();
        let eps_tilde = ratr::residual_noise(&x_t, &x_tilde0, t, &sched).unwrap();
        let direct = trajectory::refined_direct(score, &x_t, &y, triple, &eps_tilde, omega, &sched).unwrap();
        let reference = reference_refined(score, &x_t, &y, (t, u, s), &x_tilde0, omega, &sched);
        for ((b, d), e) in blended.as_slice().iter().zip(direct.as_slice()).zip(&reference) {
            blend_vs_direct = blend_vs_direct.max((b - d).abs() / d.abs().max(1.0));
            blend_vs_reference = blend_vs_reference.max((b - e).abs() / e.abs().max(1.0));
        }
    }
    let elapsed = start.elapsed();
    Outcome::hard(
        blend_vs_direct <= 1e-10 && blend_vs_reference <= 1e-10 && elapsed < Duration::from_secs(10),
        format!(
            "1000 cases (oracle and micro net), blend vs direct {blend_vs_direct:.1e}, \
             blend vs reference {blend_vs_reference:.1e}, {}",
            seconds(elapsed)
        ),
    )
}

fn constant_score_collapse() -> Outcome {
    let start = Instant::now();
    let sched = linear_beta_schedule(32, 1e-4, 2e-2).unwrap();
    let shape = (3, 4, 4);
    let mut r = rng(2);
    let e = randn(shape, &mut r);
    let score = trajdistill::score::constant_score(e.clone());
    let x_t = randn(shape, &mut r);
    let (mut worst, mut count) = (0.0f64, 0usize);
    for t in 1..=32 {
        for u in 0..t {
            for s in 0..=u {
                let triple = TimeTriple::new(t, u, s, &sched).unwrap();
                let two = trajectory::teacher_second_order(&score, &x_t, &x_t, triple, &sched).unwrap();
                let ratio = sched.a(s) / sched.a(t);
                let one: Vec<f64> = x_t
                    .as_slice()
                    .iter()
                    .zip(e.as_slice())
                    .map(|(x, e)| ratio * x + (sched.sigma(s) - ratio * sched.sigma(t)) * e)
                    .collect();
                for (a, b) in two.as_slice().iter().zip(&one) {
                    worst = worst.max((a - b).abs());
                }
                count += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome::hard(
        worst < 1e-10 && elapsed < Duration::from_secs(5),
        format!("{count} triples on T=32, max error {worst:.1e}, {}", seconds(elapsed)),
    )
}

fn oracle_exactness() -> Outcome {
    let sched = linear_beta_schedule(512, 1e-4, 2e-2).unwrap();
    let mut r = rng(3);
    let mu = Tensor::uniform((3, 8, 8), 0.0, 1.0, &mut r);
    let oracle = gaussian_oracle(mu.clone(), 0.0, &sched).unwrap();
    let y = Tensor::uniform((3, 8, 8), 0.0, 0.3, &mut r);
    let mut per_k = Vec::new();
    for k in [1, 2, 4, 8, 16] {
        let out = trajectory::sample(&oracle, &y, k, &sched, SamplerMode::Deterministic, SEED + k as u64).unwrap();
        let err = out.as_slice().iter().zip(mu.as_slice()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        per_k.push((k, err));
    }
    let worst = per_k.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
    let detail = per_k.iter().map(|(k, e)| format!("K={k} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome::hard(worst < 1e-8, detail)
}

/// Central differences on coordinates whose analytic gradient is at least
/// `1e-3` of the largest; smaller ones sit below the rounding floor of the
/// difference quotient at this step size.
fn finite_difference_check(
    net: &MicroNet,
    analytic: &[f64],
    loss_at: &dyn Fn(&MicroNet) -> f64,
    probes: usize,
    r: &mut ChaCha8Rng,
) -> (f64, usize) {
    const H: f64 = 1e-5;
    let largest = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let pool: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i].abs() >= 1e-3 * largest).collect();
    assert!(!pool.is_empty(), "gradient vanished");
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = pool[r.random_range(0..pool.len())];
        let base = net.params()[i];
        probe.params_mut()[i] = base + H;
        let up = loss_at(&probe);
        probe.params_mut()[i] = base - H;
        let down = loss_at(&probe);
        probe.params_mut()[i] = base;
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1e-8));
    }
    (worst, pool.len())
}

fn gradient_checks() -> Outcome {
    const PROBES: usize = 64;
    let sched = linear_beta_schedule(512, 1e-4, 2e-2).unwrap();
    let shape = (3, 8, 8);
    let bank = FeatureBank::seeded(SEED);
    let w = LossWeights::default();
    let mut lines = Vec::new();
    let mut ok = true;
    for (label, head) in [("prior head", true), ("epsilon head", false)] {
        let mut r = rng(4 + head as u64);
        let mut arch = Architecture::new(shape, vec![32, 24, 16], 8).unwrap();
        if head {
            arch = arch.with_head(Head::prior(&sched, 0.6, 0.05).unwrap());
        }
        let params = (0..arch.param_count()).map(|_| r.random_range(-0.2..0.2)).collect();
        let net = MicroNet::from_params(arch, params).unwrap();
        let x0 = Tensor::uniform(shape, 0.2, 1.0, &mut r);
        let y = x0.map(|v| 0.25 * v);
        let (t, s) = (r.random_range(100..500), r.random_range(10..90));
        let noise = randn(shape, &mut r);
        let x_t = trajectory::forward_diffuse(&x0, t, &noise, &sched).unwrap();
        let refined = randn(shape, &mut r);

        let (pred, cache) = net.forward_cached(&x_t, &y, t).unwrap();
        let (_, g) = loss::eps_loss_with_grad(&noise, &pred, &w).unwrap();
        let analytic = net.backward(&g, &cache).unwrap();
        let eps_term = |n: &MicroNet| loss::eps_loss(&noise, &n.forward(&x_t, &y, t).unwrap(), &w).unwrap();
        let mut errors = vec![("eps", finite_difference_check(&net, &analytic, &eps_term, PROBES, &mut r))];

        let item = train::student_item(&x_t, &pred, &refined, &x0, t, s, &sched, &w, &bank).unwrap();
        for (k, name) in ["distill", "pixel", "perceptual"].into_iter().enumerate() {
            let analytic = net.backward(&item.grad_eps[k], &cache).unwrap();
            let term = |n: &MicroNet| {
                let eps = n.forward(&x_t, &y, t).unwrap();
                let it = train::student_item(&x_t, &eps, &refined, &x0, t, s, &sched, &w, &bank).unwrap();
                [it.parts.main, it.parts.pixel, it.parts.perceptual][k]
            };
            errors.push((name, finite_difference_check(&net, &analytic, &term, PROBES, &mut r)));
        }
        ok &= errors.iter().all(|(_, (e, _))| *e < 1e-4);
        let text = errors
            .iter()
            .map(|(n, (e, pool))| format!("{n} {e:.1e} ({pool} coords)"))
            .collect::<Vec<_>>()
            .join(", ");
        lines.push(format!("{label} t={t} s={s}: {text}"));
    }
    Outcome::hard(ok, format!("{PROBES} probes per term; {}", lines.join("; ")))
}

fn ratr_invariants() -> Outcome {
    let sched = linear_beta_schedule(512, 1e-4, 2e-2).unwrap();
    let mut flat_ok = true;
    for level in [0.05, 0.37, 0.9] {
        let flat = Tensor::full(3, 8, 8, level);
        flat_ok &= ratr::latent_clean(&flat).unwrap().latent_clean.as_slice().iter().all(|&v| v == 1.0);
    }

    let mut r = rng(6);
    let shape = (3, 8, 8);
    let x0 = Tensor::uniform(shape, 0.0, 1.0, &mut r);
    let mut recover = 0.0f64;
    for t in [1, 17, 256, 512] {
        let e = randn(shape, &mut r);
        let x_t = trajectory::forward_diffuse(&x0, t, &e, &sched).unwrap();
        let back = ratr::residual_noise(&x_t, &x0, t, &sched).unwrap();
        for (a, b) in back.as_slice().iter().zip(e.as_slice()) {
            recover = recover.max((a - b).abs());
        }
    }

    let mut draws = Vec::with_capacity(10_000);
    while draws.len() < 10_000 {
        let t = r.random_range(1..=512);
        let e = randn(shape, &mut r);
        let x_t = trajectory::forward_diffuse(&x0, t, &e, &sched).unwrap();
        draws.extend_from_slice(ratr::residual_noise(&x_t, &x0, t, &sched).unwrap().as_slice());
    }
    draws.truncate(10_000);
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (se_mean, se_var) = (1.0 / n.sqrt(), (2.0 / n).sqrt());
    let moments = mean.abs() < 3.0 * se_mean && (var - 1.0).abs() < 3.0 * se_var;
    Outcome::hard(
        flat_ok && recover <= 1e-12 && moments,
        format!(
            "flat field ones {flat_ok}, ε recovery {recover:.1e}, {} draws mean {mean:+.4} (3 SE {:.4}) var {var:.4} (3 SE {:.4})",
            draws.len(),
            3.0 * se_mean,
            3.0 * se_var
        ),
    )
}

fn naive_luminance(x: &Tensor) -> Vec<Vec<f64>> {
    let (c, h, w) = x.shape();
    (0..h)
        .map(|i| (0..w).map(|j| (0..c).map(|k| x.get(k, i, j)).sum::<f64>() / c as f64).collect())
        .collect()
}

fn naive_psnr(a: &Tensor, b: &Tensor) -> f64 {
    let (la, lb) = (naive_luminance(a), naive_luminance(b));
    let (mut sum, mut n) = (0.0, 0.0);
    for (ra, rb) in la.iter().zip(&lb) {
        for (x, y) in ra.iter().zip(rb) {
            sum += (x - y) * (x - y);
            n += 1.0;
        }
    }
    10.0 * (1.0 / (sum / n)).log10()
}

fn naive_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let (la, lb) = (naive_luminance(a), naive_luminance(b));
    let (h, w) = (la.len(), la[0].len());
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut windows = 0.0;
    for i0 in 0..=h - 8 {
        for j0 in 0..=w - 8 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in i0..i0 + 8 {
                for j in j0..j0 + 8 {
                    ma += la[i][j];
                    mb += lb[i][j];
                }
            }
            ma /= 64.0;
            mb /= 64.0;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in i0..i0 + 8 {
                for j in j0..j0 + 8 {
                    va += (la[i][j] - ma).powi(2);
                    vb += (lb[i][j] - mb).powi(2);
                    cov += (la[i][j] - ma) * (lb[i][j] - mb);
                }
            }
            let (va, vb, cov) = (va / 64.0, vb / 64.0, cov / 64.0);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1.0;
        }
    }
    total / windows
}

fn metric_oracles() -> Outcome {
    let mut r = rng(7);
    let a = Tensor::uniform((3, 16, 12), 0.1, 0.8, &mut r);
    let shifted = a.map(|v| v + 0.1);
    let offset = metrics::psnr(&a, &shifted).unwrap();
    let self_ssim = metrics::ssim(&a, &a).unwrap();
    let (mut psnr_gap, mut ssim_gap) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let jitter = Tensor::uniform((3, 16, 12), -0.3, 0.3, &mut r);
        let b = a.zip_map(&jitter, |x, d| (x + d).clamp(0.0, 1.0)).unwrap();
        psnr_gap = psnr_gap.max((metrics::psnr(&a, &b).unwrap() - naive_psnr(&a, &b)).abs());
        ssim_gap = ssim_gap.max((metrics::ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs());
    }
    psnr_gap = psnr_gap.max((offset - naive_psnr(&a, &shifted)).abs());
    ssim_gap = ssim_gap.max((self_ssim - naive_ssim(&a, &a)).abs());
    Outcome::hard(
        (offset - 20.0).abs() <= 1e-6 && self_ssim == 1.0 && psnr_gap <= 1e-9 && ssim_gap <= 1e-9,
        format!(
            "offset-0.1 PSNR {offset:.9} dB, self SSIM {self_ssim}, naive gaps PSNR {psnr_gap:.1e} SSIM {ssim_gap:.1e}"
        ),
    )
}

struct DeskRun {
    outcome: DeskOutcome,
    elapsed: Duration,
}

fn desk_run(cfg: &RunConfig) -> DeskRun {
    let start = Instant::now();
    let outcome = pipeline::desk_experiment(cfg, 16).expect("desk experiment runs");
    DeskRun {
        outcome,
        elapsed: start.elapsed(),
    }
}

fn desk_distillation(cfg: &RunConfig, run: &DeskRun) -> Outcome {
    let o = &run.outcome;
    let (t2, t16, s2) = (o.teacher_few.psnr, o.teacher_many.psnr, o.student_few.psnr);
    let gain = s2 - t2;
    let ratio = s2 / t16;
    Outcome::hard(
        gain >= pipeline::MIN_GAIN_DB && ratio >= pipeline::MIN_MANY_STEP_RATIO && run.elapsed < Duration::from_secs(1200),
        format!(
            "seed {}: student K={k} {s2:.3} dB (SSIM {:.4}), teacher K={k} {t2:.3} dB (SSIM {:.4}), \
             teacher K=16 {t16:.3} dB (SSIM {:.4}); gain {gain:+.3} dB (need ≥ {}), ratio {ratio:.3} (need ≥ {}); \
             {} teacher and {} student evaluations, {} skipped; {}",
            cfg.seed,
            o.student_few.ssim,
            o.teacher_few.ssim,
            o.teacher_many.ssim,
            pipeline::MIN_GAIN_DB,
            pipeline::MIN_MANY_STEP_RATIO,
            o.student.teacher_evals,
            o.student.student_evals,
            o.student.skipped,
            seconds(run.elapsed),
            k = cfg.k_student,
        ),
    )
}

fn teacher_step_count(run: &DeskRun) -> Outcome {
    let o = &run.outcome;
    Outcome {
        passed: o.teacher_few.psnr < o.teacher_many.psnr,
        soft: true,
        detail: format!(
            "teacher K=2 {:.3} dB vs K=16 {:.3} dB (informational)",
            o.teacher_few.psnr, o.teacher_many.psnr
        ),
    }
}

fn omega_sweep(cfg: &RunConfig, run: &DeskRun) -> Outcome {
    let sweep = pipeline::omega_sweep(cfg, &run.outcome.teacher.state, &[1.0]).expect("sweep runs");
    let refined = run.outcome.student_few.psnr;
    let plain = sweep[0].1.psnr;
    Outcome {
        passed: refined > plain,
        soft: true,
        detail: format!("seed {}: ω={} {refined:.3} dB vs ω=1 {plain:.3} dB (soft)", cfg.seed, cfg.omega),
    }
}

fn checkpoint_bytes(cfg: &RunConfig, run: &DeskRun, dir: &std::path::Path) -> Vec<Vec<u8>> {
    let o = &run.outcome;
    let mut files = Vec::new();
    for (name, state, losses) in [
        ("teacher.tdpw", &o.teacher.state, &o.teacher.losses),
        ("student.tdpw", &o.student.state, &o.student.losses),
    ] {
        let paths = pipeline::save_checkpoint(dir.join(name), cfg, state, losses).unwrap();
        for p in [paths.params, paths.config, paths.losses] {
            files.push(std::fs::read(p).unwrap());
        }
    }
    files
}

fn determinism(cfg: &RunConfig, first: &DeskRun) -> Outcome {
    let second = desk_run(cfg);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (checkpoint_bytes(cfg, first, da.path()), checkpoint_bytes(cfg, &second, db.path()));
    let identical = a == b;
    let metrics_equal = [
        (&first.outcome.teacher_few, &second.outcome.teacher_few),
        (&first.outcome.teacher_many, &second.outcome.teacher_many),
        (&first.outcome.student_few, &second.outcome.student_few),
    ]
    .iter()
    .all(|(x, y)| x.psnr.to_bits() == y.psnr.to_bits() && x.ssim.to_bits() == y.ssim.to_bits());
    let bytes: usize = a.iter().map(Vec::len).sum();
    Outcome::hard(
        identical && metrics_equal,
        format!(
            "two seeded desk runs: {} files ({bytes} bytes) identical {identical}, evaluation bits identical {metrics_equal}, \
             teacher {} student {}",
            a.len(),
            first.outcome.teacher.state.fingerprint(),
            first.outcome.student.state.fingerprint()
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters from other targets pass through here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = Vec::new();
    let mut report = |name: &str, o: Outcome| {
        let tag = match (o.passed, o.soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        println!("[{tag}] {name}: {}", o.detail);
        if !o.passed && !o.soft {
            failed.push(name.to_string());
        }
    };
    report("refinement-equivalence", refinement_equivalence());
    report("constant-score-collapse", constant_score_collapse());
    report("schedule-sanity", schedule_sanity());
    report("oracle-exactness", oracle_exactness());
    report("gradient-checks", gradient_checks());
    report("ratr-invariants", ratr_invariants());
    report("metric-oracles", metric_oracles());

    let cfg = RunConfig {
        seed: 0,
        ..RunConfig::default()
    };
    let run = desk_run(&cfg);
    report("desk-distillation", desk_distillation(&cfg, &run));
    report("teacher-step-count", teacher_step_count(&run));
    report("omega-sweep", omega_sweep(&cfg, &run));
    report("determinism", determinism(&cfg, &run));

    if failed.is_empty() {
        println!("acceptance: all hard criteria passed");
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
