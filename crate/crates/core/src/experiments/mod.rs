//! Simulation studies, the θ₀ / θ° oracles and the navigation evaluation.

pub mod nav;
pub mod navstudy;
pub mod oracle;
pub mod statespace;
pub mod study;

pub use nav::{nav_eval, NavMetrics, NavScenario};
pub use navstudy::{run_nav_study, NavStudyConfig, NavStudyReport};
pub use oracle::{theta0_oracle, OracleTargets};
pub use statespace::{model_to_state_space, AugmentedState, StateSpaceSpec};
pub use study::{run_simulation_study, StudyConfig, StudyReport};

/// Standard error of a sample median under normality: `1.2533 sd / sqrt(n)`.
pub fn median_se(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.2533 * var.sqrt() / (n as f64).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
