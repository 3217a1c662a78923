//! Image comparison and the compensation benchmark.

mod benchmark;
pub mod ssim;

pub use benchmark::{
    run_benchmark, windowed_ssim, ArmResult, ArmSummary, BenchmarkContext, BenchmarkReport, BenchmarkScenario,
    ScenarioName, SeedBaseline,
};
pub use ssim::ssim;
