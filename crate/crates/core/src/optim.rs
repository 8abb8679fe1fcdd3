//! Derivative-free Nelder-Mead simplex minimizer with restarts.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Converged once the simplex fits in a box of this half-width.
    pub xtol: f64,
    /// Relative spread of simplex values accepted together with `loose_xtol`.
    pub ftol: f64,
    pub loose_xtol: f64,
    pub initial_step: f64,
    /// Fresh simplices built around the incumbent after convergence.
    pub restarts: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 20_000,
            xtol: 1e-10,
            ftol: 1e-15,
            loose_xtol: 1e-6,
            initial_step: 0.5,
            restarts: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn eval(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], evals: &mut usize) -> f64 {
    *evals += 1;
    let v = f(x);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn run(
    f: &mut impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    opts: &NelderMeadOptions,
    evals: &mut usize,
    budget: usize,
) -> (Vec<f64>, f64, usize, bool) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(f, x, evals)).collect();
    let mut iterations = 0;
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let best = values[0];
        let worst = values[n];
        let diameter = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let fspread = worst - best;
        if diameter <= opts.xtol
            || (fspread <= opts.ftol * best.abs() && diameter <= opts.loose_xtol)
        {
            return (simplex.swap_remove(0), best, iterations, true);
        }
        if *evals >= budget {
            return (simplex.swap_remove(0), best, iterations, false);
        }
        iterations += 1;

        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(alpha);
        let fr = eval(f, &xr, evals);
        if fr < values[0] {
            let xe = along(gamma);
            let fe = eval(f, &xe, evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(rho);
            let fc = eval(f, &xc, evals);
            (xc, fc.min(f64::INFINITY))
        } else {
            let xc = along(-rho);
            let fc = eval(f, &xc, evals);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        // Shrink towards the best vertex.
        for i in 1..=n {
            let shrunk: Vec<f64> = simplex[0]
                .iter()
                .zip(&simplex[i])
                .map(|(b, x)| b + sigma * (x - b))
                .collect();
            values[i] = eval(f, &shrunk, evals);
            simplex[i] = shrunk;
        }
    }
}

/// Minimizes `f` from `x0`. After the first convergence the search restarts
/// from the incumbent with a smaller simplex until a restart no longer
/// improves the value or `opts.restarts` is exhausted.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    opts: &NelderMeadOptions,
) -> NelderMeadResult {
    let mut evals = 0;
    let budget = opts.max_evals;
    let (mut x, mut fx, mut iterations, mut converged) =
        run(&mut f, x0, opts.initial_step, opts, &mut evals, budget);
    let mut step = opts.initial_step * 0.1;
    for _ in 0..opts.restarts {
        if evals >= budget {
            break;
        }
        let (x2, f2, it2, c2) = run(&mut f, &x, step, opts, &mut evals, budget);
        iterations += it2;
        let improved = f2 < fx;
        if improved {
            x = x2;
            fx = f2;
        }
        converged = c2;
        if !improved || (fx - f2).abs() <= 1e-13 * fx.abs() {
            break;
        }
        step *= 0.1;
    }
    NelderMeadResult {
        x,
        f: fx,
        evals,
        iterations,
        converged,
    }
}
