//! Image metrics, the permutation-robustness protocol, novel-view
//! evaluation sweeps and report tables.

pub mod metrics;
mod protocol;

pub use metrics::{mse, psnr, ssim, PSNR_CAP};
pub use protocol::{
    eval_episodes, fingerprint, nearest_input, nvs_eval, permutation_eval, render_csv, render_table, std_dev, Episode,
    EvalConfig, InferenceModel, MetricReport, Prediction, SceneMetrics,
};
