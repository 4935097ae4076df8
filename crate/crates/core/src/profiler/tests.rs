use super::*;
use crate::model::{Model, ModelConfig, Scale};
use crate::rng::Rng;

fn random_report(rng: &mut Rng) -> FlopReport {
    let kinds = ["Conv", "C3k2", "A2C2F", "Upsample", "Concat", "Detect", "odd, \"quoted\"\nkind"];
    let rows = (0..rng.below(8))
        .map(|i| FlopRow {
            layer_id: i,
            kind: kinds[rng.below(kinds.len())].to_string(),
            output_shape: format!("1x{}x{}x{};1x4x2x2", rng.below(512), rng.below(80), rng.below(80)),
            params: rng.below(1 << 20) as u64,
            macs: (rng.below(1 << 30) as u64) << rng.below(8),
        })
        .collect();
    let scale = [None, Some(Scale::N), Some(Scale::X)][rng.below(3)];
    FlopReport::new(scale, 32 * (1 + rng.below(20)), rows)
}

#[test]
fn nano_report_totals() {
    let model: Model<f32> = Model::new(ModelConfig::new(Scale::N), 0).unwrap();
    let r = flop_report(&model, 640).unwrap();
    assert_eq!(r.rows.len(), 22);
    assert!(r.is_consistent());
    assert_eq!(r.total_macs, model.macs(640).unwrap());
    assert_eq!(r.rows[0].output_shape, "1x16x320x320");
    assert_eq!(r.rows[21].output_shape, "1x84x80x80;1x84x40x40;1x84x20x20");
    assert_eq!(r.scale.as_deref(), Some("n"));
}

#[test]
fn nano_small_ratio() {
    let g = |s| {
        let m: Model<f32> = Model::new(ModelConfig::new(s), 0).unwrap();
        flop_report(&m, 640).unwrap().gflops
    };
    let ratio = g(Scale::N) / g(Scale::S);
    let reference = 6.5 / 21.4;
    assert!((ratio / reference - 1.0).abs() <= 0.2, "ratio {ratio}");
}

#[test]
fn instrumented_check() {
    let model: Model<f32> = Model::new(ModelConfig::new(Scale::N), 0).unwrap();
    let (a, b) = verify_instrumented(&model, 64).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_report() {
    let r = FlopReport::new(None, 640, vec![]);
    assert_eq!((r.total_macs, r.total_params, r.gflops), (0, 0, 0.0));
    let csv = to_csv(&r.rows).unwrap();
    assert_eq!(csv, "layer_id,kind,output_shape,params,macs\n");
    assert!(from_csv(&csv).unwrap().is_empty());
}

#[test]
fn round_trips() {
    let mut rng = Rng::seed(11);
    for _ in 0..20 {
        let r = random_report(&mut rng);
        assert_eq!(from_json(&to_json(&r).unwrap()).unwrap(), r);
        assert_eq!(from_csv(&to_csv(&r.rows).unwrap()).unwrap(), r.rows);
    }
}

#[test]
fn csv_quoting() {
    let r = FlopReport::new(
        None,
        32,
        vec![FlopRow {
            layer_id: 0,
            kind: "a,b".into(),
            output_shape: "1x1x1x1".into(),
            params: 1,
            macs: 2,
        }],
    );
    assert_eq!(to_csv(&r.rows).unwrap().lines().nth(1), Some("0,\"a,b\",1x1x1x1,1,2"));
}

#[test]
fn bad_inputs() {
    assert!(matches!(from_csv("a,b\n1,2\n"), Err(crate::Error::Report(_))));
    let mut r = FlopReport::new(None, 32, vec![]);
    r.schema_version = "2".into();
    let text = serde_json::to_string(&r).unwrap();
    assert!(matches!(from_json(&text), Err(crate::Error::Report(_))));
}

#[test]
fn unwritable_path() {
    let r = FlopReport::new(None, 32, vec![]);
    let path = std::path::Path::new("/nonexistent-dir/x/report.json");
    match emit_report(&r, ReportFormat::Json, path) {
        Err(e @ crate::Error::Io { .. }) => assert!(e.to_string().contains("/nonexistent-dir/x/report.json")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn emit_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let model: Model<f32> = Model::new(ModelConfig::new(Scale::N), 0).unwrap();
    let r = flop_report(&model, 320).unwrap();
    let j = dir.path().join("r.json");
    let c = dir.path().join("r.csv");
    emit_report(&r, ReportFormat::Json, &j).unwrap();
    emit_report(&r, ReportFormat::Csv, &c).unwrap();
    assert_eq!(from_json(&std::fs::read_to_string(j).unwrap()).unwrap(), r);
    assert_eq!(from_csv(&std::fs::read_to_string(c).unwrap()).unwrap(), r.rows);
}

#[test]
fn percentiles() {
    let v: Vec<f64> = (0..=100).map(f64::from).collect();
    assert_eq!(percentile(&v, 0.5), 50.0);
    assert_eq!(percentile(&v, 0.05), 5.0);
    assert_eq!(percentile(&[1.0, 2.0], 0.5), 1.5);
}

#[test]
fn bench_rules() {
    let p = AttentionPoint {
        n: 64,
        h: 2,
        d: 8,
        l: 4,
        kernel: KernelKind::Area,
    };
    assert!(matches!(bench_attention(&[p], 19, 5, 0), Err(crate::Error::Bench(_))));
    assert!(matches!(bench_attention(&[p], 20, 4, 0), Err(crate::Error::Bench(_))));
    let skip = AttentionPoint { n: 66, ..p };
    let tiled = AttentionPoint {
        kernel: KernelKind::Tiled,
        ..p
    };
    let rows = bench_attention(&[p, skip, tiled], 20, 5, 0).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].status, "ok");
    assert!(rows[1].status.starts_with("skipped"));
    assert!(rows[1].median_ms.is_none());
    for r in [&rows[0], &rows[2]] {
        let (m, lo, hi) = (r.median_ms.unwrap(), r.p5_ms.unwrap(), r.p95_ms.unwrap());
        assert!(lo <= m && m <= hi);
        assert_eq!((r.reps, r.warmup, r.threads), (20, 5, 1));
    }
    assert_eq!(bench_from_csv(&bench_to_csv(&rows).unwrap()).unwrap(), rows);
}

#[test]
fn bench_model_row() {
    assert!(bench_model(Scale::N, 64, 10, 5, 0).is_err());
    let r = bench_model(Scale::N, 64, 20, 5, 0).unwrap();
    assert_eq!(r.label, "model/n");
    assert!(r.throughput.unwrap() > 0.0);
}
