//! Monte Carlo INS/GNSS evaluation of fitted gyroscope error models.
//!
//! A planar vehicle (east/north position, velocity and heading) is dead
//! reckoned from a yaw-rate gyro and a two-axis accelerometer. An error-state
//! EKF fuses GNSS positions and carries the bias states implied by the model
//! under test. Gyro errors are chunks of recorded or simulated replicates;
//! accelerometer errors are white noise of known variance, modeled exactly by
//! every filter. Truth comes from the same discrete mechanization as the
//! filter, so noise-free inputs reproduce the trajectory exactly.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::median;
use crate::experiments::statespace::{model_to_state_space, AugmentedState, StateSpaceSpec};
use crate::models::{CompositeModel, Replicate};
use crate::rng::StreamKey;

/// Runs whose normalized error exceeds this at an evaluation tick are
/// treated as diverged.
pub const DIVERGENCE_NEES: f64 = 1e6;

/// Half-width of a central 50% normal interval in standard deviations.
pub const HALF_WIDTH_50: f64 = 0.674_489_750_196_081_7;

/// Piece of trajectory with constant yaw rate and along-track acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration_s: f64,
    pub yaw_rate: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavScenario {
    pub segments: Vec<Segment>,
    pub initial_speed: f64,
    pub imu_rate_hz: f64,
    pub gnss_rate_hz: f64,
    /// GNSS position noise standard deviation per axis (m).
    pub gnss_sigma: f64,
    pub outage_start_s: f64,
    pub outage_duration_s: f64,
    /// Absolute evaluation window `(start, end)` in seconds.
    pub eval_window_s: (f64, f64),
    pub eval_step_s: f64,
    pub n_runs: usize,
    /// Per-sample variance of each accelerometer axis.
    pub accel_noise_var: f64,
}

impl Default for NavScenario {
    fn default() -> Self {
        let seg = |duration_s, yaw_rate, accel| Segment {
            duration_s,
            yaw_rate,
            accel,
        };
        Self {
            segments: vec![
                seg(10.0, 0.0, 0.5),
                seg(10.0, 0.1, 0.0),
                seg(10.0, 0.0, 0.0),
                seg(10.0, -0.1, 0.0),
                seg(10.0, 0.0, -0.2),
                seg(10.0, 0.1, 0.0),
                seg(10.0, 0.1, 0.0),
                seg(10.0, -0.1, 0.2),
                seg(10.0, 0.1, 0.0),
            ],
            initial_speed: 15.0,
            imu_rate_hz: 100.0,
            gnss_rate_hz: 10.0,
            gnss_sigma: 0.025,
            outage_start_s: 60.0,
            outage_duration_s: 30.0,
            eval_window_s: (75.0, 90.0),
            eval_step_s: 0.5,
            n_runs: 100,
            accel_noise_var: 1e-6,
        }
    }
}

impl NavScenario {
    pub fn duration_s(&self) -> f64 {
        self.segments.iter().map(|s| s.duration_s).sum()
    }

    pub fn steps(&self) -> usize {
        (self.duration_s() * self.imu_rate_hz).round() as usize
    }

    pub fn outage_end_s(&self) -> f64 {
        self.outage_start_s + self.outage_duration_s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.segments.is_empty() || self.segments.iter().any(|s| !(s.duration_s > 0.0)) {
            return bad("trajectory needs segments of positive duration".into());
        }
        if !(self.imu_rate_hz > 0.0 && self.gnss_rate_hz > 0.0) {
            return bad("sensor rates must be > 0".into());
        }
        let ratio = self.imu_rate_hz / self.gnss_rate_hz;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return bad("IMU rate must be an integer multiple of the GNSS rate".into());
        }
        if !(self.gnss_sigma >= 0.0 && self.accel_noise_var >= 0.0) {
            return bad("noise levels must be >= 0".into());
        }
        let end = self.duration_s();
        if !(self.outage_start_s >= 0.0 && self.outage_duration_s > 0.0 && self.outage_end_s() <= end + 1e-9) {
            return bad(format!(
                "outage [{}, {}] s must lie inside the {end} s trajectory",
                self.outage_start_s,
                self.outage_end_s()
            ));
        }
        let (a, b) = self.eval_window_s;
        if !(a >= self.outage_start_s && a <= b && b <= self.outage_end_s() + 1e-9) {
            return bad(format!(
                "evaluation window [{a}, {b}] s must lie inside the outage [{}, {}] s",
                self.outage_start_s,
                self.outage_end_s()
            ));
        }
        if !(self.eval_step_s > 0.0) || self.n_runs == 0 {
            return bad("evaluation step and run count must be positive".into());
        }
        Ok(())
    }

    pub fn eval_times(&self) -> Vec<f64> {
        let (a, b) = self.eval_window_s;
        let n = ((b - a) / self.eval_step_s + 1e-9).floor() as usize;
        (0..=n).map(|i| a + i as f64 * self.eval_step_s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedModel {
    pub label: String,
    pub model: CompositeModel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct NavState {
    p: [f64; 2],
    v: [f64; 2],
    psi: f64,
}

fn rotate(psi: f64, f: [f64; 2]) -> [f64; 2] {
    let (s, c) = psi.sin_cos();
    [c * f[0] - s * f[1], s * f[0] + c * f[1]]
}

fn mechanize(s: &NavState, omega: f64, f: [f64; 2], dt: f64) -> NavState {
    let a = rotate(s.psi, f);
    NavState {
        p: [s.p[0] + s.v[0] * dt, s.p[1] + s.v[1] * dt],
        v: [s.v[0] + a[0] * dt, s.v[1] + a[1] * dt],
        psi: s.psi + omega * dt,
    }
}

struct Trajectory {
    dt: f64,
    gyro: Vec<f64>,
    accel: Vec<[f64; 2]>,
    truth: Vec<NavState>,
}

fn build_trajectory(sc: &NavScenario) -> Trajectory {
    let dt = 1.0 / sc.imu_rate_hz;
    let n = sc.steps();
    let mut gyro = Vec::with_capacity(n);
    let mut accel = Vec::with_capacity(n);
    let mut speed = sc.initial_speed;
    let mut seg = 0;
    let mut seg_end = sc.segments[0].duration_s;
    for k in 0..n {
        let t = k as f64 * dt;
        while t >= seg_end - 1e-9 && seg + 1 < sc.segments.len() {
            seg += 1;
            seg_end += sc.segments[seg].duration_s;
        }
        let s = sc.segments[seg];
        gyro.push(s.yaw_rate);
        accel.push([s.accel, speed * s.yaw_rate]);
        speed += s.accel * dt;
    }
    let mut truth = Vec::with_capacity(n + 1);
    truth.push(NavState {
        p: [0.0, 0.0],
        v: [sc.initial_speed, 0.0],
        psi: 0.0,
    });
    for k in 0..n {
        let next = mechanize(&truth[k], gyro[k], accel[k], dt);
        truth.push(next);
    }
    Trajectory {
        dt,
        gyro,
        accel,
        truth,
    }
}

/// Errors (truth minus estimate) and variances at one evaluation tick.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TickError {
    err: [f64; 3],
    var: [f64; 3],
}

impl TickError {
    fn nees(&self) -> f64 {
        self.err
            .iter()
            .zip(&self.var)
            .map(|(e, v)| if *e == 0.0 { 0.0 } else { e * e / v })
            .sum()
    }

    fn covered(&self, axis: usize) -> bool {
        self.err[axis].abs() <= HALF_WIDTH_50 * self.var[axis].max(0.0).sqrt()
    }
}

/// One filter run over the whole trajectory.
fn run_filter(
    sc: &NavScenario,
    traj: &Trajectory,
    ss: &StateSpaceSpec,
    gyro_noise: &[f64],
    eval_steps: &[usize],
    key: StreamKey,
) -> Vec<TickError> {
    let dt = traj.dt;
    let n_steps = traj.gyro.len();
    let m = ss.n_states();
    let n = 5 + m;
    let mut rng = key.rng();
    let accel_sd = sc.accel_noise_var.sqrt();
    let gnss_every = (sc.imu_rate_hz / sc.gnss_rate_hz).round() as usize;
    let r_gnss = sc.gnss_sigma * sc.gnss_sigma + 1e-12;

    let mut nominal = traj.truth[0];
    let mut bias = vec![0.0; m];
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut f = DMatrix::<f64>::identity(n, n);
    let mut q = vec![0.0; n];
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    q[2] = sc.accel_noise_var * dt * dt;
    q[3] = q[2];
    q[4] = ss.white_noise_variance * dt * dt;
    for (i, s) in ss.states.iter().enumerate() {
        let b = 5 + i;
        f[(4, b)] = -dt;
        match *s {
            AugmentedState::GaussMarkov {
                phi,
                q: qi,
                stationary_variance,
                ..
            } => {
                f[(b, b)] = phi;
                q[b] = qi;
                p[(b, b)] = stationary_variance;
            }
            AugmentedState::RandomWalk { q: qi } => {
                q[b] = qi;
                p[(b, b)] = qi * n_steps as f64;
            }
            AugmentedState::Drift { omega } => {
                p[(b, b)] = (omega * n_steps as f64).powi(2);
            }
        }
    }
    let drift: Vec<f64> = ss
        .states
        .iter()
        .map(|s| match *s {
            AugmentedState::Drift { omega } => omega,
            _ => 0.0,
        })
        .collect();

    let mut tmp = DMatrix::<f64>::zeros(n, n);
    let mut tmp_t = DMatrix::<f64>::zeros(n, n);
    let mut out = Vec::with_capacity(eval_steps.len());
    let mut next_eval = 0;
    let outage = (sc.outage_start_s, sc.outage_end_s());

    for k in 0..n_steps {
        let gyro = traj.gyro[k] + gyro_noise[k];
        let acc = [
            traj.accel[k][0] + accel_sd * rng.sample::<f64, _>(StandardNormal),
            traj.accel[k][1] + accel_sd * rng.sample::<f64, _>(StandardNormal),
        ];
        let omega = gyro - bias.iter().sum::<f64>();
        let a_nav = rotate(nominal.psi, acc);
        f[(2, 4)] = -a_nav[1] * dt;
        f[(3, 4)] = a_nav[0] * dt;
        nominal = mechanize(&nominal, omega, acc, dt);
        for (i, s) in ss.states.iter().enumerate() {
            if let AugmentedState::GaussMarkov { phi, .. } = *s {
                bias[i] *= phi;
            }
            bias[i] += drift[i];
        }

        tmp.gemm(1.0, &f, &p, 0.0);
        tmp.transpose_to(&mut tmp_t);
        p.gemm(1.0, &f, &tmp_t, 0.0);
        for (i, qi) in q.iter().enumerate() {
            p[(i, i)] += qi;
        }

        let step = k + 1;
        let t = step as f64 * dt;
        let in_outage = t >= outage.0 - 1e-9 && t <= outage.1 + 1e-9;
        if step % gnss_every == 0 && !in_outage {
            let truth = traj.truth[step];
            let y = [
                truth.p[0] + sc.gnss_sigma * rng.sample::<f64, _>(StandardNormal) - nominal.p[0],
                truth.p[1] + sc.gnss_sigma * rng.sample::<f64, _>(StandardNormal) - nominal.p[1],
            ];
            gnss_update(&mut p, &y, r_gnss, &mut nominal, &mut bias);
        }

        while next_eval < eval_steps.len() && eval_steps[next_eval] == step {
            let truth = traj.truth[step];
            out.push(TickError {
                err: [
                    truth.p[0] - nominal.p[0],
                    truth.p[1] - nominal.p[1],
                    truth.psi - nominal.psi,
                ],
                var: [p[(0, 0)], p[(1, 1)], p[(4, 4)]],
            });
            next_eval += 1;
        }
    }
    out
}

/// Joseph-form position update followed by error injection.
fn gnss_update(
    p: &mut DMatrix<f64>,
    y: &[f64; 2],
    r: f64,
    nominal: &mut NavState,
    bias: &mut [f64],
) {
    let n = p.nrows();
    let s = [
        [p[(0, 0)] + r, p[(0, 1)]],
        [p[(1, 0)], p[(1, 1)] + r],
    ];
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let s_inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let k = DMatrix::from_fn(n, 2, |i, c| p[(i, 0)] * s_inv[0][c] + p[(i, 1)] * s_inv[1][c]);
    let dx: Vec<f64> = (0..n).map(|i| k[(i, 0)] * y[0] + k[(i, 1)] * y[1]).collect();
    let mut ikh = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        ikh[(i, 0)] -= k[(i, 0)];
        ikh[(i, 1)] -= k[(i, 1)];
    }
    let updated = &ikh * &*p * ikh.transpose() + &k * k.transpose() * r;
    *p = crate::linalg::symmetrize(&updated);
    nominal.p[0] += dx[0];
    nominal.p[1] += dx[1];
    nominal.v[0] += dx[2];
    nominal.v[1] += dx[3];
    nominal.psi += dx[4];
    for (b, d) in bias.iter_mut().zip(&dx[5..]) {
        *b += d;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub source: String,
    /// Mean over ticks of the median position error norm (m).
    pub position_error: f64,
    /// Mean over ticks of the median absolute heading error (rad).
    pub orientation_error: f64,
    /// Median position error norm per evaluation tick.
    pub position_error_curve: Vec<f64>,
    pub coverage_east: f64,
    pub coverage_north: f64,
    pub coverage_heading: f64,
    /// Median of the three per-axis coverages.
    pub coverage: f64,
    pub runs: usize,
    pub diverged_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub label: String,
    pub per_source: Vec<SourceMetrics>,
    /// Means over sources.
    pub position_error: f64,
    pub orientation_error: f64,
    /// Percent above the best model (best is 0).
    pub relative_position_error: f64,
    pub relative_orientation_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavMetrics {
    pub eval_times_s: Vec<f64>,
    pub models: Vec<ModelMetrics>,
}

impl NavMetrics {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "model",
            "source",
            "position_error",
            "orientation_error",
            "coverage_east",
            "coverage_north",
            "coverage_heading",
            "coverage",
            "relative_position_error",
            "relative_orientation_error",
            "diverged_runs",
        ])?;
        for m in &self.models {
            for s in &m.per_source {
                w.write_record([
                    m.label.clone(),
                    s.source.clone(),
                    format!("{:e}", s.position_error),
                    format!("{:e}", s.orientation_error),
                    format!("{}", s.coverage_east),
                    format!("{}", s.coverage_north),
                    format!("{}", s.coverage_heading),
                    format!("{}", s.coverage),
                    format!("{}", m.relative_position_error),
                    format!("{}", m.relative_orientation_error),
                    s.diverged_runs.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn source_metrics(source: &str, runs: &[Vec<TickError>]) -> SourceMetrics {
    let kept: Vec<&Vec<TickError>> = runs
        .iter()
        .filter(|r| r.iter().all(|t| t.nees() <= DIVERGENCE_NEES))
        .collect();
    let n_ticks = kept.first().map_or(0, |r| r.len());
    let per_tick = |value: fn(&TickError) -> f64| -> Vec<f64> {
        (0..n_ticks)
            .map(|t| median(&kept.iter().map(|r| value(&r[t])).collect::<Vec<_>>()))
            .collect()
    };
    let pos_curve = per_tick(|t| t.err[0].hypot(t.err[1]));
    let att_curve = per_tick(|t| t.err[2].abs());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let total = (kept.len() * n_ticks) as f64;
    let coverage_axis = |axis: usize| {
        kept.iter()
            .flat_map(|r| r.iter())
            .filter(|t| t.covered(axis))
            .count() as f64
            / total
    };
    let (ce, cn, ch) = (coverage_axis(0), coverage_axis(1), coverage_axis(2));
    SourceMetrics {
        source: source.to_string(),
        position_error: mean(&pos_curve),
        orientation_error: mean(&att_curve),
        position_error_curve: pos_curve,
        coverage_east: ce,
        coverage_north: cn,
        coverage_heading: ch,
        coverage: median(&[ce, cn, ch]),
        runs: runs.len(),
        diverged_runs: runs.len() - kept.len(),
    }
}

/// Runs `scenario.n_runs` filter Monte Carlos for every (model, source)
/// pair. Run `r` on a source uses its `r`-th non-overlapping chunk; the
/// accelerometer and GNSS noise of a run is shared across models.
pub fn nav_eval(
    scenario: &NavScenario,
    models: &[NamedModel],
    sources: &[Replicate],
    seed: u64,
) -> Result<NavMetrics> {
    scenario.validate()?;
    if models.is_empty() || sources.is_empty() {
        return Err(Error::Config("need at least one model and one noise source".into()));
    }
    let traj = build_trajectory(scenario);
    let n_steps = traj.gyro.len();
    let needed = n_steps * scenario.n_runs;
    for s in sources {
        if s.len() < needed {
            return Err(Error::DataExhausted(format!(
                "source {:?} has {} samples, {} runs of {n_steps} need {needed}",
                s.label,
                s.len(),
                scenario.n_runs
            )));
        }
    }
    let specs: Vec<StateSpaceSpec> = models
        .iter()
        .map(|m| model_to_state_space(&m.model, scenario.imu_rate_hz))
        .collect::<Result<_>>()?;
    let eval_times = scenario.eval_times();
    let eval_steps: Vec<usize> = eval_times
        .iter()
        .map(|t| (t * scenario.imu_rate_hz).round() as usize)
        .collect();

    let key = StreamKey::new(seed).child(0x6e61_7665);
    let jobs: Vec<(usize, usize, usize)> = (0..models.len())
        .flat_map(|m| {
            (0..sources.len()).flat_map(move |s| (0..scenario.n_runs).map(move |r| (m, s, r)))
        })
        .collect();
    let results: Vec<Vec<TickError>> = jobs
        .par_iter()
        .map(|&(m, s, r)| {
            let chunk = &sources[s].samples[r * n_steps..(r + 1) * n_steps];
            let run_key = key.child(s as u64).child(r as u64);
            run_filter(scenario, &traj, &specs[m], chunk, &eval_steps, run_key)
        })
        .collect();

    let per_pair = sources.len() * scenario.n_runs;
    let mut out: Vec<ModelMetrics> = models
        .iter()
        .enumerate()
        .map(|(m, named)| {
            let per_source: Vec<SourceMetrics> = sources
                .iter()
                .enumerate()
                .map(|(s, src)| {
                    let start = m * per_pair + s * scenario.n_runs;
                    source_metrics(&src.label, &results[start..start + scenario.n_runs])
                })
                .collect();
            let k = per_source.len() as f64;
            ModelMetrics {
                label: named.label.clone(),
                position_error: per_source.iter().map(|s| s.position_error).sum::<f64>() / k,
                orientation_error: per_source.iter().map(|s| s.orientation_error).sum::<f64>() / k,
                per_source,
                relative_position_error: 0.0,
                relative_orientation_error: 0.0,
            }
        })
        .collect();
    let best_pos = out.iter().map(|m| m.position_error).fold(f64::INFINITY, f64::min);
    let best_att = out.iter().map(|m| m.orientation_error).fold(f64::INFINITY, f64::min);
    let relative = |v: f64, best: f64| if best > 0.0 { 100.0 * (v / best - 1.0) } else { 0.0 };
    for m in &mut out {
        m.relative_position_error = relative(m.position_error, best_pos);
        m.relative_orientation_error = relative(m.orientation_error, best_att);
    }
    Ok(NavMetrics {
        eval_times_s: eval_times,
        models: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{simulate_path, LatentBlock};

    fn short_scenario(n_runs: usize) -> NavScenario {
        NavScenario {
            n_runs,
            imu_rate_hz: 50.0,
            ..NavScenario::default()
        }
    }

    #[test]
    fn validation_rejects_window_outside_outage() {
        let mut sc = NavScenario {
            eval_window_s: (50.0, 65.0),
            ..NavScenario::default()
        };
        assert!(matches!(sc.validate(), Err(Error::Config(_))));
        sc.eval_window_s = (75.0, 95.0);
        assert!(matches!(sc.validate(), Err(Error::Config(_))));
        assert!(NavScenario::default().validate().is_ok());
        assert_eq!(NavScenario::default().eval_times().len(), 31);
    }

    #[test]
    fn noise_free_run_is_exact() {
        let mut sc = short_scenario(2);
        sc.gnss_sigma = 0.0;
        sc.accel_noise_var = 0.0;
        let n = sc.steps() * sc.n_runs;
        let zero = Replicate::new(vec![0.0; n], sc.imu_rate_hz, "zero").unwrap();
        let model = NamedModel {
            label: "wn".into(),
            model: CompositeModel::new(vec![LatentBlock::WhiteNoise { sigma2: 1e-8 }]).unwrap(),
        };
        let m = nav_eval(&sc, &[model], &[zero], 1).unwrap();
        let s = &m.models[0].per_source[0];
        assert!(s.position_error < 1e-6, "{}", s.position_error);
        assert_eq!(s.coverage, 1.0);
    }

    #[test]
    fn short_source_is_exhausted() {
        let sc = short_scenario(3);
        let src = Replicate::new(vec![0.0; sc.steps() * 2], sc.imu_rate_hz, "short").unwrap();
        let model = NamedModel {
            label: "wn".into(),
            model: CompositeModel::new(vec![LatentBlock::WhiteNoise { sigma2: 1e-8 }]).unwrap(),
        };
        assert!(matches!(nav_eval(&sc, &[model], &[src], 0), Err(Error::DataExhausted(_))));
    }

    #[test]
    fn matched_white_noise_filter_is_calibrated() {
        let sc = short_scenario(100);
        let model = CompositeModel::new(vec![LatentBlock::WhiteNoise { sigma2: 1e-4 }]).unwrap();
        let src = simulate_path(&model, sc.steps() * sc.n_runs, StreamKey::new(3)).unwrap();
        let named = NamedModel {
            label: "matched".into(),
            model,
        };
        let m = nav_eval(&sc, &[named], &[src], 4).unwrap();
        let s = &m.models[0].per_source[0];
        assert!((0.40..=0.60).contains(&s.coverage), "{s:?}");
        assert_eq!(s.diverged_runs, 0);
        let c = &s.position_error_curve;
        assert!(c.last().unwrap() > c.first().unwrap());
    }
}
