//! Greedy angle selection under a Matérn-½ prior with both objectives, using
//! Monte Carlo estimates from posterior pseudo-samples.

use std::sync::Arc;

use ctdesign::design::{equidistant_design, init_state, run_design, DesignConfig, JitterPolicy, Objective};
use ctdesign::prior::{Matern12Prior, PriorCovariance};
use ctdesign::tomo::{build_geometry, default_detector_count, TomoOperator};

fn main() -> ctdesign::Result<()> {
    let (h, w, n) = (32, 32, 60);
    let op = Arc::new(TomoOperator::new(build_geometry(h, w, n, default_detector_count(h, w))?));
    let prior: Arc<dyn PriorCovariance> = Arc::new(Matern12Prior::new(h, w, 0.05, 4.0)?);
    let pilot = equidistant_design(3, n)?;

    for objective in [Objective::Eig, Objective::Ese] {
        let mut state = init_state(prior.clone(), 1e-3, op.clone(), pilot.clone(), None, JitterPolicy::default())?;
        let config = DesignConfig { objective, k: 500, steps: 8, ..Default::default() };
        let run = run_design(&mut state, &config, &|_| Ok(None), None)?;
        let degrees: Vec<String> = run
            .selected()
            .iter()
            .map(|&a| format!("{:.0}", op.geometry().angles_deg[a]))
            .collect();
        let secs: f64 = run.steps.iter().map(|s| s.seconds).sum();
        println!("{:3}: {} ({secs:.1} s)", objective.name(), degrees.join(" "));
    }
    Ok(())
}
