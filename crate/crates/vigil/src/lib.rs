//! Host-side tooling around `vigil-core`: synthetic drift datasets, file
//! formats, the annotation server and the run driver behind the `vigil` CLI.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod io;
pub mod runner;
pub mod server;

pub use checkpoint::Checkpoint;
pub use config::{AnnotatorMode, RunConfig};
pub use datagen::{generate, DatasetManifest, Gaussian, SyntheticStreamSpec};
pub use io::{load_dataset, read_report, write_report, DataError, Dataset};
pub use runner::{execute, execute_with_hub, RunError, RunOutcome};
pub use server::AnnotationHub;
