//! Table and CSV layout against checked-in files.

use esrie_core::metrics::{render_csv, render_table};
use esrie_core::MetricReport;

fn rows() -> Vec<MetricReport> {
    let row = |method: &str, v: [f64; 5]| MetricReport {
        image_id: "cyst2".into(),
        method: method.into(),
        cnr: v[0],
        ssnr: v[1],
        enl: v[1] * v[1],
        agm: v[3],
        ssim: v[4],
        rois: vec!["background".into(), "cyst".into(), "profile".into()],
        ..Default::default()
    };
    let mut net = row("edgesrie-int8", [21.613, 17.6405, 0.0, 6.1234, 0.93712]);
    net.params = Some(13530);
    net.flops = Some(887_095_296);
    net.fps = Some(22.4567);
    vec![
        row("input", [11.69, 6.5543, 0.0, 9.875, 1.0]),
        row("lee", [15.02, 9.113, 0.0, 4.5, 0.91]),
        row("srad", [-3.5, 12.0, 0.0, 3.25, 0.884999]),
        net,
    ]
}

fn golden(name: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn table_layout() {
    assert_eq!(render_table(&rows()), golden("table.txt"));
}

#[test]
fn table_without_cost_columns() {
    assert_eq!(render_table(&rows()[..3]), golden("table_plain.txt"));
}

#[test]
fn csv_layout() {
    assert_eq!(render_csv(&rows()), golden("metrics.csv"));
}
