//! Derivative-free multi-start coordinate search, used to maximise model
//! evidence over log-hyperparameters.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    pub initial_step: f64,
    pub min_step: f64,
    /// Evaluation budget per start.
    pub max_evals: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            min_step: 1e-3,
            max_evals: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub x: Vec<f64>,
    pub value: f64,
    /// Value at the first start's initial point.
    pub initial_value: f64,
    /// Best value after every sweep, across all starts.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

/// Maximises `f` over the box `bounds` starting from each point in `starts`.
///
/// Each sweep tries `±step` along every coordinate and keeps strict
/// improvements; a sweep without improvement halves the step. Non-finite or
/// failing evaluations count as `-inf`.
pub fn coordinate_search<F>(
    mut f: F,
    starts: &[Vec<f64>],
    bounds: &[(f64, f64)],
    options: &SearchOptions,
) -> Result<SearchResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if starts.is_empty() {
        return Err(Error::Argument("coordinate search needs at least one start".into()));
    }
    let clamp = |x: &mut Vec<f64>| {
        for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
            *v = v.clamp(lo, hi);
        }
    };
    let mut eval = |x: &[f64], count: &mut usize| -> f64 {
        *count += 1;
        match f(x) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    };

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut trace = Vec::new();
    let mut evaluations = 0;
    let mut initial_value = f64::NEG_INFINITY;
    for (s, start) in starts.iter().enumerate() {
        let mut x = start.clone();
        clamp(&mut x);
        let mut fx = eval(&x, &mut evaluations);
        if s == 0 {
            initial_value = fx;
        }
        let mut used = 1;
        let mut step = options.initial_step;
        while step >= options.min_step && used < options.max_evals {
            let mut improved = false;
            for i in 0..x.len() {
                for dir in [1.0, -1.0] {
                    let mut cand = x.clone();
                    cand[i] += dir * step;
                    clamp(&mut cand);
                    if cand[i] == x[i] || used >= options.max_evals {
                        continue;
                    }
                    let fc = eval(&cand, &mut evaluations);
                    used += 1;
                    if fc > fx {
                        x = cand;
                        fx = fc;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
            let overall = best.as_ref().map_or(fx, |b| b.1.max(fx));
            trace.push(overall);
        }
        if best.as_ref().map_or(true, |b| fx > b.1) {
            best = Some((x, fx));
        }
    }
    let (x, value) = best.expect("at least one start");
    if !value.is_finite() {
        return Err(Error::Optimiser {
            message: "no start produced a finite objective".into(),
            trace,
        });
    }
    Ok(SearchResult {
        x,
        value,
        initial_value,
        trace,
        evaluations,
    })
}
