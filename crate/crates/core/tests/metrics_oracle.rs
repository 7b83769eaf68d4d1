use std::fs;

use faultline::metrics::{
    self, export, failure_free_overhead, import_csv, import_json, median, quantile,
    relative_overhead, sample_std, BoxSummary, ExportFormat, RunRecord, Variant,
};
use proptest::prelude::*;

/// Type-7 quantile as the piecewise-linear curve through `(i / (n - 1), x_(i))`.
fn quantile_by_segments(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let step = 1.0 / (n - 1) as f64;
    for i in 0..n - 1 {
        let lo = i as f64 * step;
        let hi = (i + 1) as f64 * step;
        if p <= hi || i == n - 2 {
            let t = ((p - lo) / step).clamp(0.0, 1.0);
            return sorted[i] + t * (sorted[i + 1] - sorted[i]);
        }
    }
    unreachable!()
}

/// Exact sample variance of integers, as a rational `num / den`.
fn exact_variance(xs: &[i64]) -> (i128, i128) {
    let n = xs.len() as i128;
    let s: i128 = xs.iter().map(|&x| x as i128).sum();
    let s2: i128 = xs.iter().map(|&x| (x as i128) * (x as i128)).sum();
    (n * s2 - s * s, n * (n - 1))
}

#[test]
fn reference_medians() {
    let r = relative_overhead(&[13441.8312f64], &[13266.8864]).unwrap();
    // (13441.8312 - 13266.8864) / 13441.8312
    let exact = 174.9448f64 / 13441.8312;
    assert!((r.relative_overhead - exact).abs() < 1e-12);
    assert!((r.relative_overhead - 0.013015).abs() < 1e-6);
    assert_eq!(format!("{:.6}", r.relative_overhead), "0.013015");
}

#[test]
fn quartiles_of_one_to_eight() {
    let xs: Vec<f64> = (1..=8).map(f64::from).collect();
    let b = BoxSummary::of(&xs).unwrap();
    assert_eq!((b.min, b.q1, b.median, b.q3, b.max), (1.0, 2.75, 4.5, 6.25, 8.0));
}

#[test]
fn empty_and_degenerate_inputs() {
    assert_eq!(median::<f64>(&[]).unwrap_err().name(), "EmptySamples");
    assert_eq!(relative_overhead(&[1.0f64], &[]).unwrap_err().name(), "EmptySamples");
    assert_eq!(sample_std(&[3.0f64]).unwrap(), 0.0);
    assert!(failure_free_overhead(0.0f64, 1.0).is_err());
    assert_eq!(failure_free_overhead(10.0f64, 9.0).unwrap(), 0.1);
}

proptest! {
    #[test]
    fn quantiles_match_segment_oracle(
        mut xs in prop::collection::vec(-1e6f64..1e6, 1..40),
        p in 0.0f64..=1.0,
    ) {
        let got = quantile(&xs, p).unwrap();
        xs.sort_by(f64::total_cmp);
        let want = quantile_by_segments(&xs, p);
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{} vs {}", got, want);
    }

    #[test]
    fn median_matches_sorting(mut xs in prop::collection::vec(-1e6f64..1e6, 1..40)) {
        let got = median(&xs).unwrap();
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        let want = if n % 2 == 1 { xs[n / 2] } else { (xs[n / 2 - 1] + xs[n / 2]) / 2.0 };
        prop_assert_eq!(got, want);
    }

    #[test]
    fn std_matches_exact_variance(xs in prop::collection::vec(-100_000i64..100_000, 2..40)) {
        let fs: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
        let (num, den) = exact_variance(&xs);
        let want = (num as f64 / den as f64).sqrt();
        let got = sample_std(&fs).unwrap();
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want), "{} vs {}", got, want);
    }

    #[test]
    fn overhead_is_zero_for_identical_samples(xs in prop::collection::vec(1e-3f64..1e4, 1..20)) {
        let r = relative_overhead(&xs, &xs).unwrap();
        prop_assert_eq!(r.relative_overhead, 0.0);
        prop_assert_eq!(r.std_with_s, r.std_without_s);
    }

    #[test]
    fn records_roundtrip(
        rows in prop::collection::vec((any::<bool>(), 0.0f64..1e6, 0u64..5, prop::collection::vec(0.0f64..10.0, 0..4)), 1..12),
    ) {
        let records: Vec<RunRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (inst, t, faults, steps))| RunRecord {
                run_id: format!("run-{i}"),
                variant: if inst { Variant::Instrumented } else { Variant::Baseline },
                total_wall_s: t,
                superstep_wall_s: steps.clone(),
                checkpoint_cost_s: if inst { steps } else { Vec::new() },
                recovery_cost_s: Vec::new(),
                fault_count: faults,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();

        let json = dir.path().join("r.json");
        export(&records, &json, ExportFormat::Json).unwrap();
        prop_assert_eq!(&import_json(&json).unwrap(), &records);

        let csv = dir.path().join("r.csv");
        export(&records, &csv, ExportFormat::Csv).unwrap();
        let back = import_csv(&csv).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(&a.run_id, &b.run_id);
            prop_assert_eq!(a.variant, b.variant);
            prop_assert_eq!(a.total_wall_s, b.total_wall_s);
            prop_assert_eq!(a.fault_count, b.fault_count);
        }
        prop_assert!(fs::read_to_string(metrics::summary_path(&csv)).unwrap().starts_with(metrics::SUMMARY_HEADER));
    }
}

#[test]
fn malformed_rows_name_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    fs::write(&p, "run_id,variant,total_wall_s,fault_count\nx,baseline,1,0\ny,sideways,1,0\n").unwrap();
    let err = import_csv(&p).unwrap_err();
    assert_eq!(err.name(), "ParseError");
    assert!(err.to_string().contains("line 3"), "{err}");
    fs::write(&p, "id,kind\n").unwrap();
    assert!(import_csv(&p).unwrap_err().to_string().contains("line 1"));
}
