//! Second-moment loss (SML) for dropout-network uncertainty in regression.
//!
//! A dropout network is trained with the usual MSE on its full output plus
//! a term pulling the distance between each sampled sub-network and the
//! full network towards the absolute residual. At prediction time the
//! spread of sampled sub-networks is then a calibrated uncertainty.
//!
//! The crate also provides the baselines it is compared against (MC
//! dropout, last-layer MC dropout, parametric uncertainty, deep ensembles
//! and their combination), calibration metrics, IID and shifted data
//! splits, and an analytical study of the objective.
//!
//! ```no_run
//! use sml_core::{data, estimators::{self, EstimatorKind, TrainConfig, Units}};
//! use rand::SeedableRng;
//!
//! let ds = data::gen_heteroskedastic_toy(2000, 1)?;
//! let idx: Vec<usize> = (0..ds.len()).collect();
//! let model = estimators::train_estimator(EstimatorKind::Sml, &ds, &idx, &TrainConfig::default(), 7)?;
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
//! let est = model.predict(&[0.5], 200, &mut rng, Units::Original)?;
//! println!("{} ± {}", est.mu, est.sigma_total);
//! # Ok::<(), sml_core::SmlError>(())
//! ```

pub mod analysis;
pub mod data;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod netcore;
pub mod stats;

pub use error::{Result, SmlError};
pub use estimators::{EstimatorKind, PredictiveEstimate, TrainConfig, TrainedModel, Units};
pub use exec::Execution;
