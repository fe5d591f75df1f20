//! Report-level checks for the sweeps and the parametric tail fits.

use tracecommit_core::probe::{parametric_p99, TailFamily};
use tracecommit_core::stats::{
    estimate_rho, fpr_csv, fpr_table, k_sweep, k_sweep_csv, mask_flip_csv, mask_flip_sweep, n_sweep,
};
use tracecommit_core::synth::{Deployment, TraceModel};

#[test]
fn k_sweep_honest_scores_stay_below_substitute() {
    let d = Deployment::build(1).unwrap();
    let sub = d.backend.pool(&TraceModel::substitute(), &d.library, &d.fleet, 3, true).unwrap();
    let rows = k_sweep(&d.pool, Some(&sub), &[1, 4, 8, 16, 32]).unwrap();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!(r.honest_median <= r.honest_max);
        assert!(r.attacker_median.unwrap() > r.honest_max, "{r:?}");
        assert_eq!(r.auc, Some(1.0));
    }
    let csv = k_sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,"));
}

#[test]
fn mask_flip_degrades_separation_gracefully() {
    let d = Deployment::build(2).unwrap();
    let rows = mask_flip_sweep(&d, &[0.0, 0.25, 0.5], 24, 0).unwrap();
    assert_eq!(rows[0].fraction, 0.0);
    // Flipping supports away from the honest features raises honest scores.
    assert!(rows[2].honest_median > rows[0].honest_median);
    for r in &rows {
        assert!(r.auc >= 0.9, "{r:?}");
    }
    assert_eq!(mask_flip_csv(&rows).lines().count(), 4);
}

#[test]
fn n_sweep_extremes() {
    let d = Deployment::build(0).unwrap();
    let r = n_sweep(&d, &[0.0, 1.0], &[1, 96], 1000, 1).unwrap();
    for (n, a) in r.curve(1.0) {
        assert!(a > 0.99, "N={n} AUC={a}");
    }
    for (n, a) in r.curve(0.0) {
        assert!((a - 0.5).abs() <= 0.03, "N={n} AUC={a}");
    }
    assert_eq!(r.to_csv().lines().count(), 1 + 4);
}

#[test]
fn pool_correlation_and_tail_fits() {
    let d = Deployment::build(0).unwrap();
    let rho = estimate_rho(&d.pool).unwrap();
    assert!(rho > 0.5 && rho < 1.0, "{rho}");
    let g = parametric_p99(&d.pool, TailFamily::Gaussian).unwrap();
    let t5 = parametric_p99(&d.pool, TailFamily::StudentTDf5).unwrap();
    assert!(t5 > g);
    let csv = fpr_csv(&fpr_table(4, 0.01, rho, 20_000, 0).unwrap());
    assert_eq!(csv.lines().count(), 5);
}
