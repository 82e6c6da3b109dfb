//! Monte-Carlo check of MMR-based selection on the heteroskedastic task.

use rayon::prelude::*;

use fgel::data::{NoiseProfile, HETEROSKEDASTIC_THETA};
use fgel::experiment::{fit_estimator, Estimator, Replicate, Settings, Task};

#[test]
fn tuned_error_close_to_best_grid_point() {
    let task = Task::Heteroskedastic {
        noise: NoiseProfile::FiveSquare,
    };
    let settings = Settings::default();
    let per_seed: Vec<(f64, Vec<f64>)> = (0..30u64)
        .into_par_iter()
        .map(|k| {
            let rep = Replicate::draw(&task, 512, &settings, 31, k).unwrap();
            let fit = fit_estimator(Estimator::KernelFgel, &task, &rep, &settings).unwrap();
            let err = |t: &[f64]| (t[0] - HETEROSKEDASTIC_THETA).powi(2);
            let grid: Vec<f64> = fit.tuning.unwrap().rows.iter().map(|r| err(r.theta.as_ref().unwrap())).collect();
            (err(&fit.theta), grid)
        })
        .collect();
    let tuned = per_seed.iter().map(|s| s.0).sum::<f64>() / 30.0;
    let candidates = per_seed[0].1.len();
    let best = (0..candidates)
        .map(|c| per_seed.iter().map(|s| s.1[c]).sum::<f64>() / 30.0)
        .fold(f64::INFINITY, f64::min);
    assert!(tuned <= 1.2 * best, "tuned {tuned} vs best grid point {best}");
}
