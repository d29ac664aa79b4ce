//! Artifact emission: SVG figures, circuit graphs, run manifests and the
//! command implementations behind the CLI.

pub mod commands;
pub mod dot;
pub mod manifest;
pub mod svg;

pub use commands::{
    cmd_analyze, cmd_eval, cmd_patch, cmd_report, cmd_train, AnalysisBundle, AnalyzeOptions, EvalOptions, Log,
    PatchOptions, ReportOptions, TrainOptions,
};
pub use dot::{circuit_dot, emit_circuit_dot};
pub use manifest::{RunManifest, MANIFEST_NAME};
pub use svg::{emit_heatmap_svg, heatmap_svg, scatter_svg, ColorScale, HeatmapSpec};
