//! Refined-trajectory distillation for conditional diffusion models.
//!
//! The crate is organized bottom-up:
//!
//! * [`schedule`]: discrete variance-preserving noise schedule;
//! * [`score`]: ε-predictors (Gaussian oracle, constant, micro network);
//! * [`trajectory`]: forward process, trajectory decoder, second-order
//!   teacher, refinement, clean-image extraction and samplers;
//! * [`ratr`]: Retinex decomposition of the low-light condition and the
//!   refinement anchor;
//! * [`loss`]: ε, distillation, pixel and perceptual objectives;
//! * [`train`]: teacher pretraining and distillation;
//! * [`metrics`]: PSNR and SSIM;
//! * [`io`]: Netpbm images and run configs;
//! * [`pipeline`]: the desk-scale teacher/student experiment;
//! * [`verify`]: runtime property checks behind `trajdistill verify`.

pub mod data;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod ratr;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod tensor;
pub mod train;
pub mod trajectory;
pub mod verify;

pub use error::{Error, Result};
pub use schedule::{linear_beta_schedule, NoiseSchedule};
pub use score::{Architecture, ConstantScore, GaussianOracle, Head, MicroNet, ScoreFunction};
pub use tensor::{Shape, Tensor};
pub use train::{DistillConfig, TeacherConfig, TrainState};
pub use trajectory::{SamplerMode, TimeTriple};
