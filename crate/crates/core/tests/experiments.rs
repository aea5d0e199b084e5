use ces_core::analysis::{
    experiment_biased_modulation, sweep_smod_surface, BiasExperiment, OutputFormat, SurfaceGrid,
    Table, TOOL_VERSION,
};
use serde_json::Value;

fn assert_columns_agree(table: &Table, analytic: &str, simulated: &str) {
    let a = table.column_f64(analytic);
    let s = table.column_f64(simulated);
    let e = table.column_f64("stderr");
    for i in 0..table.rows.len() {
        let (a, s, e) = (a[i].unwrap(), s[i].unwrap(), e[i].unwrap());
        assert!((a - s).abs() < 5.0 * e, "row {i}: {analytic} {a} vs {simulated} {s} (stderr {e})");
    }
}

fn assert_header_complete(table: &Table, params: &[&str]) {
    let csv = table.render(OutputFormat::Csv);
    assert!(csv.starts_with(&format!("# tool: {TOOL_VERSION}\n")));
    assert!(csv.contains(&format!("# master_seed: {}\n", table.master_seed)));
    let json: Value = serde_json::from_str(&table.render(OutputFormat::Json)).unwrap();
    for p in params {
        assert!(csv.contains(&format!("# {p}: ")), "{p}");
        assert!(json["meta"]["params"].get(p).is_some(), "{p}");
    }
}

#[test]
fn default_surface_matches_the_law() {
    let grid = SurfaceGrid::default();
    let table = sweep_smod_surface(&grid, 2024).unwrap();
    assert_eq!(table.rows.len(), grid.b_values.len() * grid.p_values.len());
    assert_columns_agree(&table, "s_analytic", "s_simulated");
    for (i, e) in table.column_f64("stderr").into_iter().enumerate() {
        assert!(e.unwrap() <= 0.02, "cell {i} stderr {e:?}");
    }
    assert_header_complete(&table, &["grid"]);
    let json: Value = serde_json::from_str(&table.to_json()).unwrap();
    assert_eq!(json["meta"]["params"]["grid"]["test_rounds_per_cell"], 40_000);
}

#[test]
fn default_biased_configurations_match_theory() {
    let exp = BiasExperiment::default();
    let table = experiment_biased_modulation(&exp, 2024).unwrap();
    assert_eq!(table.rows.len(), exp.configs.len());
    assert_columns_agree(&table, "s_theory", "s_measured");
    let sweeps: Vec<&str> = (0..table.rows.len())
        .map(|i| table.get(i, "sweep").unwrap().as_str().unwrap())
        .collect();
    assert!(sweeps.contains(&"s_vs_b") && sweeps.contains(&"s_vs_p"));
    // U = 0.8, p = 1/7 at V = 0.961
    let row = (0..table.rows.len())
        .find(|&i| table.get(i, "sweep").unwrap() == "s_vs_p" && table.get(i, "p_target").unwrap().as_f64() == Some(1.0 / 7.0))
        .unwrap();
    let s = table.get(row, "s_measured").unwrap().as_f64().unwrap();
    let e = table.get(row, "stderr").unwrap().as_f64().unwrap();
    let expected = 2.0 * std::f64::consts::SQRT_2 * 0.961 * 6.0 / 7.0 * 0.8;
    assert!((s - expected).abs() < 5.0 * e, "{s} vs {expected}");
    assert_header_complete(&table, &["experiment"]);
}
