//! Run configuration as flat `key = value` lines.
//!
//! `#` starts a comment. Unknown and duplicate keys are rejected; missing
//! keys take their defaults. Paths are optional and an empty value unsets
//! them.

use crate::data::{Degradation, SyntheticPairSource};
use crate::error::{Error, Result};
use crate::loss::{FeatureBank, LossWeights};
use crate::rng;
use crate::schedule::{linear_beta_schedule, NoiseSchedule};
use crate::score::{Architecture, Head};
use crate::train::{DistillConfig, TeacherConfig};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

/// Output parameterization of the micro net, by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Epsilon,
    Prior,
}

impl FromStr for HeadKind {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "epsilon" => Ok(HeadKind::Epsilon),
            "prior" => Ok(HeadKind::Prior),
            _ => Err(()),
        }
    }
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Epsilon => "epsilon",
            HeadKind::Prior => "prior",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub channels: usize,
    pub patch: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub head: HeadKind,
    pub prior_mean: f64,
    pub prior_var: f64,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub teacher_iterations: u64,
    pub teacher_lr: f64,
    pub batch: usize,
    pub ema_decay: f64,
    pub l2: f64,
    pub distill_iterations: u64,
    pub distill_lr: f64,
    pub k_student: usize,
    pub omega: f64,
    pub lambda_eps: f64,
    pub lambda_pix: f64,
    pub lambda_per: f64,
    pub ema_teacher: bool,
    pub seed: u64,
    pub teacher_path: Option<String>,
    pub student_path: Option<String>,
    pub loss_csv: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            steps: 512,
            beta_start: 1e-4,
            beta_end: 2e-2,
            channels: 3,
            patch: 8,
            hidden: vec![128, 128, 128],
            embed_dim: 16,
            head: HeadKind::Prior,
            prior_mean: 0.6,
            prior_var: 0.05,
            train_pairs: 4096,
            eval_pairs: 200,
            teacher_iterations: 20_000,
            teacher_lr: 1e-4,
            batch: 16,
            ema_decay: crate::train::EMA_DECAY,
            l2: 0.0,
            distill_iterations: 5000,
            distill_lr: 1e-4,
            k_student: 2,
            omega: 0.8,
            lambda_eps: w.lambda_eps,
            lambda_pix: w.lambda_pix,
            lambda_per: w.lambda_per,
            ema_teacher: true,
            seed: 0,
            teacher_path: None,
            student_path: None,
            loss_csv: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("line {line}: bad value `{raw}` for `{key}`")))
}

fn parse_list(key: &str, raw: &str, line: usize) -> Result<Vec<usize>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|p| parse_value(key, p.trim(), line)).collect()
}

fn opt_path(raw: &str) -> Option<String> {
    (!raw.is_empty()).then(|| raw.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let n = idx + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected key = value")))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {n}: duplicate key `{key}`")));
            }
            match key {
                "steps" => c.steps = parse_value(key, v, n)?,
                "beta_start" => c.beta_start = parse_value(key, v, n)?,
                "beta_end" => c.beta_end = parse_value(key, v, n)?,
                "channels" => c.channels = parse_value(key, v, n)?,
                "patch" => c.patch = parse_value(key, v, n)?,
                "hidden" => c.hidden = parse_list(key, v, n)?,
                "embed_dim" => c.embed_dim = parse_value(key, v, n)?,
                "head" => c.head = parse_value(key, v, n)?,
                "prior_mean" => c.prior_mean = parse_value(key, v, n)?,
                "prior_var" => c.prior_var = parse_value(key, v, n)?,
                "train_pairs" => c.train_pairs = parse_value(key, v, n)?,
                "eval_pairs" => c.eval_pairs = parse_value(key, v, n)?,
                "teacher_iterations" => c.teacher_iterations = parse_value(key, v, n)?,
                "teacher_lr" => c.teacher_lr = parse_value(key, v, n)?,
                "batch" => c.batch = parse_value(key, v, n)?,
                "ema_decay" => c.ema_decay = parse_value(key, v, n)?,
                "l2" => c.l2 = parse_value(key, v, n)?,
                "distill_iterations" => c.distill_iterations = parse_value(key, v, n)?,
                "distill_lr" => c.distill_lr = parse_value(key, v, n)?,
                "k_student" => c.k_student = parse_value(key, v, n)?,
                "omega" => c.omega = parse_value(key, v, n)?,
                "lambda_eps" => c.lambda_eps = parse_value(key, v, n)?,
                "lambda_pix" => c.lambda_pix = parse_value(key, v, n)?,
                "lambda_per" => c.lambda_per = parse_value(key, v, n)?,
                "ema_teacher" => c.ema_teacher = parse_value(key, v, n)?,
                "seed" => c.seed = parse_value(key, v, n)?,
                "teacher_path" => c.teacher_path = opt_path(v),
                "student_path" => c.student_path = opt_path(v),
                "loss_csv" => c.loss_csv = opt_path(v),
                other => return Err(Error::Config(format!("line {n}: unknown key `{other}`"))),
            }
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    /// Every key, one per line; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let hidden: Vec<String> = self.hidden.iter().map(|w| w.to_string()).collect();
        let path = |p: &Option<String>| p.clone().unwrap_or_default();
        let _ = writeln!(s, "# schedule");
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "beta_start = {:?}", self.beta_start);
        let _ = writeln!(s, "beta_end = {:?}", self.beta_end);
        let _ = writeln!(s, "# model and data");
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "hidden = {}", hidden.join(","));
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "head = {}", self.head.name());
        let _ = writeln!(s, "prior_mean = {:?}", self.prior_mean);
        let _ = writeln!(s, "prior_var = {:?}", self.prior_var);
        let _ = writeln!(s, "train_pairs = {}", self.train_pairs);
        let _ = writeln!(s, "eval_pairs = {}", self.eval_pairs);
        let _ = writeln!(s, "# optimization");
        let _ = writeln!(s, "teacher_iterations = {}", self.teacher_iterations);
        let _ = writeln!(s, "teacher_lr = {:?}", self.teacher_lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "ema_decay = {:?}", self.ema_decay);
        let _ = writeln!(s, "l2 = {:?}", self.l2);
        let _ = writeln!(s, "distill_iterations = {}", self.distill_iterations);
        let _ = writeln!(s, "distill_lr = {:?}", self.distill_lr);
        let _ = writeln!(s, "k_student = {}", self.k_student);
        let _ = writeln!(s, "omega = {:?}", self.omega);
        let _ = writeln!(s, "lambda_eps = {:?}", self.lambda_eps);
        let _ = writeln!(s, "lambda_pix = {:?}", self.lambda_pix);
        let _ = writeln!(s, "lambda_per = {:?}", self.lambda_per);
        let _ = writeln!(s, "ema_teacher = {}", self.ema_teacher);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "# paths");
        let _ = writeln!(s, "teacher_path = {}", path(&self.teacher_path));
        let _ = writeln!(s, "student_path = {}", path(&self.student_path));
        let _ = writeln!(s, "loss_csv = {}", path(&self.loss_csv));
        s
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        linear_beta_schedule(self.steps, self.beta_start, self.beta_end)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let arch = Architecture::new((self.channels, self.patch, self.patch), self.hidden.clone(), self.embed_dim)?;
        Ok(match self.head {
            HeadKind::Epsilon => arch,
            HeadKind::Prior => arch.with_head(Head::prior(&self.schedule()?, self.prior_mean, self.prior_var)?),
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_eps: self.lambda_eps,
            lambda_pix: self.lambda_pix,
            lambda_per: self.lambda_per,
        }
    }

    /// Seed for one named component, derived from the master seed.
    pub fn derived_seed(&self, name: &str) -> u64 {
        use rand::RngCore;
        rng::substream(self.seed, name).next_u64()
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            iterations: self.teacher_iterations,
            lr: self.teacher_lr,
            batch: self.batch,
            ema_decay: self.ema_decay,
            l2: self.l2,
            weights: self.weights(),
            seed: self.derived_seed("teacher"),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            k_student: self.k_student,
            omega: self.omega,
            iterations: self.distill_iterations,
            lr: self.distill_lr,
            batch: self.batch,
            patch: self.patch,
            ema_decay: self.ema_decay,
            weights: self.weights(),
            ema_teacher: self.ema_teacher,
            seed: self.derived_seed("distill"),
        }
    }

    pub fn train_source(&self) -> Result<SyntheticPairSource> {
        SyntheticPairSource::new(
            self.derived_seed("train-data"),
            self.train_pairs,
            self.patch,
            self.channels,
            Degradation::default(),
        )
    }

    /// Held-out pairs, disjoint in seed from the training set.
    pub fn eval_source(&self) -> Result<SyntheticPairSource> {
        SyntheticPairSource::new(
            self.derived_seed("heldout-data"),
            self.eval_pairs,
            self.patch,
            self.channels,
            Degradation::default(),
        )
    }

    pub fn feature_bank(&self) -> FeatureBank {
        FeatureBank::seeded(self.derived_seed("features"))
    }

    pub fn eval_seed(&self) -> u64 {
        self.derived_seed("eval-noise")
    }
}
