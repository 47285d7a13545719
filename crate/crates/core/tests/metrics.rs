use moevc::features::FeatureSeq;
use moevc::metrics::{aggregate_sweep, mcd, parse_sweep_csv, SweepRow, Trend, SWEEP_CSV_HEADER};
use moevc::Error;
use proptest::prelude::*;

fn seq(frames: Vec<f32>, t: usize, d: usize) -> FeatureSeq {
    FeatureSeq::new(frames, t, d).unwrap()
}

#[test]
fn mcd_closed_form_examples() {
    let a = seq(vec![0.0, 0.0, 0.0], 1, 3);
    assert_eq!(mcd(&a, &a).unwrap().mcd_db, 0.0);
    let one = mcd(&a, &seq(vec![0.0, 1.0, 0.0], 1, 3)).unwrap();
    let exact = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
    assert!((one.mcd_db - exact).abs() < 1e-12);
    assert!((one.mcd_db - 6.1415).abs() < 1e-3);
    assert_eq!(one.frames_compared, 1);
    let two = mcd(&a, &seq(vec![0.0, 2.0, 0.0], 1, 3)).unwrap();
    assert!((two.mcd_db - 12.2829).abs() < 1e-3);
    assert!((two.mcd_db - 2.0 * one.mcd_db).abs() < 1e-12);
}

#[test]
fn mcd_averages_frames_and_rejects_mismatches() {
    let a = seq(vec![0.0; 4], 2, 2);
    let b = seq(vec![1.0, 0.0, 0.0, 0.0], 2, 2);
    let r = mcd(&a, &b).unwrap();
    assert_eq!(r.frames_compared, 2);
    assert!((r.mcd_db - 5.0 / std::f64::consts::LN_10 * 2f64.sqrt()).abs() < 1e-12);
    assert!(matches!(
        mcd(&a, &seq(vec![0.0; 6], 3, 2)),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(matches!(
        mcd(&a, &seq(vec![0.0; 4], 1, 4)),
        Err(Error::ShapeMismatch { .. })
    ));
}

fn row(beta: f64, seed: u64, frr: f64, mcd: f64) -> SweepRow {
    SweepRow {
        beta,
        seed,
        mean_frr: frr,
        mean_mcd_convert: mcd,
        mean_mcd_recon: mcd / 2.0,
        loss_recon: 1.5,
        loss_lat: 0.25,
        loss_mi: -0.5,
        loss_ce: 0.125,
        loss_ae: 1.0,
        loss_spc: 0.75,
        zero_gate_frac: frr.max(0.0),
    }
}

#[test]
fn one_row_report_is_byte_stable() {
    let r = aggregate_sweep(&[row(0.0, 0, 0.1, 5.0)]).unwrap();
    let csv = r.csv();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(csv.lines().next().unwrap(), SWEEP_CSV_HEADER);
    assert!(csv.ends_with('\n') && !csv.contains('\r'));
    assert_eq!(
        aggregate_sweep(&[row(0.0, 0, 0.1, 5.0)]).unwrap().csv(),
        csv
    );
    assert_eq!(parse_sweep_csv(&csv).unwrap(), r.rows);
}

#[test]
fn increasing_frr_grid_is_reported_as_such() {
    let rows = [
        row(10.0, 0, 0.7, 3.0),
        row(0.0, 0, 0.1, 1.0),
        row(1.0, 0, 0.4, 2.0),
    ];
    let r = aggregate_sweep(&rows).unwrap();
    assert_eq!(r.frr_trend, Trend::Increasing);
    assert_eq!(r.mcd_trend, Trend::Increasing);
    assert_eq!(
        r.rows.iter().map(|x| x.beta).collect::<Vec<_>>(),
        vec![0.0, 1.0, 10.0]
    );
    assert!(r.summary().contains("FRR vs beta: increasing"));
}

#[test]
fn seeds_are_averaged_before_the_verdict() {
    // seed 1 alone would break monotonicity; the per-β mean does not
    let rows = [
        row(0.0, 1, 0.3, 1.0),
        row(0.0, 0, 0.1, 1.0),
        row(1.0, 0, 0.5, 1.0),
        row(1.0, 1, 0.2, 1.0),
    ];
    let r = aggregate_sweep(&rows).unwrap();
    assert_eq!(r.betas.len(), 2);
    assert_eq!(r.betas[0].runs, 2);
    assert!((r.betas[0].mean_frr - 0.2).abs() < 1e-12);
    assert!((r.betas[1].mean_frr - 0.35).abs() < 1e-12);
    assert_eq!(r.frr_trend, Trend::Increasing);
    assert_eq!(r.mcd_trend, Trend::NotMonotone);
    assert_eq!(
        r.rows.iter().map(|x| (x.beta, x.seed)).collect::<Vec<_>>(),
        vec![(0.0, 0), (0.0, 1), (1.0, 0), (1.0, 1)]
    );
}

#[test]
fn invalid_rows_are_rejected() {
    assert!(aggregate_sweep(&[row(0.0, 0, 1.5, 1.0)]).is_err());
    assert!(aggregate_sweep(&[row(0.0, 0, f64::NAN, 1.0)]).is_err());
    assert!(parse_sweep_csv("beta,seed\n").is_err());
    assert!(SweepRow::from_csv_row("1,2,3").is_err());
}

proptest! {
    #[test]
    fn mcd_is_symmetric_and_zero_only_on_equal(
        a in prop::collection::vec(-10.0f32..10.0, 12),
        b in prop::collection::vec(-10.0f32..10.0, 12),
    ) {
        let (x, y) = (seq(a.clone(), 3, 4), seq(b.clone(), 3, 4));
        let xy = mcd(&x, &y).unwrap().mcd_db;
        prop_assert_eq!(xy, mcd(&y, &x).unwrap().mcd_db);
        prop_assert!(xy >= 0.0);
        prop_assert_eq!(xy == 0.0, a == b);
    }

    #[test]
    fn sweep_rows_round_trip_through_csv(
        beta in 0.0f64..1e3, seed in any::<u64>(), frr in -1.0f64..1.0, m in 0.0f64..500.0,
    ) {
        let r = row(beta, seed, frr, m);
        prop_assert_eq!(SweepRow::from_csv_row(&r.to_csv_row()).unwrap(), r);
    }
}
