//! Simulation laboratory: finite populations, PPS-with-replacement samples,
//! Monte Carlo campaigns and their summary metrics.

pub mod bvn;
pub mod campaign;
pub mod metrics;
pub mod population;
pub mod sampling;

pub use campaign::{run_campaign, CellSummary, Method, MethodOutcome, ReplicateRecord, SimulationConfig, SimulationReport};
pub use metrics::{classify_selection, compute_arb, compute_mse, robust_sd_suite, RobustSd, Selection, SelectionRates};
pub use population::{generate_population, FinitePopulation, PopulationConfig};
pub use sampling::draw_sample_ppswr;
