//! Information-theoretic diagnostics and edit-quality metrics.

mod metrics;
mod mi;
mod probe;

pub use metrics::{compute_edit_metrics, expected_overlap, summarize, EditMetrics, EditSummary};
pub use mi::{mi_closed_form, mi_curve, mi_monte_carlo, MiCurve, MiPoint};
pub use probe::{discrete_latent_mi_probe, discrete_latent_pairs, plugin_mutual_information, PluginEstimate, MAX_PROBE_STATES};
