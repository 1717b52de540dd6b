//! File formats, ingestion of raw station data and run configuration.

pub mod config;
pub mod fit_json;
pub mod fourier;
pub mod ingest;
pub mod panel_csv;

pub use config::{GridConfig, McCell, McSection, RunConfig, Tuning};
pub use fit_json::{read_fit, read_params, write_fit, write_params, FitDocument, ParamsDocument, SCHEMA_VERSION};
pub use fourier::{fourier_design, Frequency};
pub use ingest::{impute_backward_forward, ingest, read_stations, Completeness, Ingested, Station};
pub use panel_csv::{read_panel, write_panel};
