//! Layerwise representation probing.
//!
//! Standardize a layer's activations, project them onto their leading
//! principal components, and measure how well three surrogate classifiers
//! (k-nearest neighbours, nearest class center, one-vs-rest linear SVM) do as
//! the number of components grows. Neural-collapse statistics and a
//! multi-probe detector locate the layer where all probes first reach the
//! network's own accuracy with only a handful of components.
//!
//! Modules, bottom-up:
//!
//! - [`activation_io`]: the `PROBEAK1` file format and layer manifest
//! - [`preprocess`]: train-fit standardization
//! - [`pca`]: component fitting, projection, resumable model blobs
//! - [`probes`]: k-NN, NCC and linear SVM
//! - [`sweep`]: the layer x probe x d sweep with a resumable journal
//! - [`collapse`]: NC1/NC4 statistics and collapse-layer detection
//! - [`synth`]: seeded synthetic layer families
//! - [`config`], [`report`]: run configuration, pipeline and outputs

pub mod activation_io;
pub mod collapse;
pub mod config;
pub mod pca;
pub mod preprocess;
pub mod probes;
pub mod report;
pub mod seeds;
pub mod sweep;
pub mod synth;

pub use activation_io::{ActivationSet, ActivationSetHeader, Label, Manifest, Split};
pub use collapse::{CollapseBoundary, CollapseParams, CollapseReport};
pub use config::RunConfig;
pub use pca::PcaModel;
pub use preprocess::Standardizer;
pub use probes::{ModelKind, ProbeModel};
pub use report::RunReport;
pub use sweep::{AccuracyCurve, MinPcStat, SweepConfig, SweepGrid, SweepReport};
pub use synth::LayerFamilySpec;
