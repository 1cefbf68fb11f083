//! Alignment of image records with an hourly climate grid, and the JSON-Lines
//! manifest that pairs each image with its caption and metadata.

mod grid;
mod manifest;
mod pipeline;

pub use grid::GridIndex;
pub use manifest::{
    load_training_examples, DatasetManifest, ManifestHeader, ManifestRecord, NamedValues,
};
pub use pipeline::{
    aggregate_window, align_stub, build_manifest, great_circle_angle, match_hour, nearest_cell,
    read_stubs, window_values, write_stubs, BuildOptions, ImageStub, SkipReason, SkipSummary,
    WINDOW_HOURS,
};
