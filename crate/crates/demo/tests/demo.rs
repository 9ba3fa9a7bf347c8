use regmis_demo::{estimate, heatmaps, model_sweep, EstimateResponse, Heatmaps, SweepResponse};

const SMALL: &str = r#"{"width": 4, "height": 4, "p_threshold": 2.0}"#;

#[test]
fn heatmap_layers_cover_the_grid_and_occupancies_sum_to_one() {
    let maps: Heatmaps = serde_json::from_str(&heatmaps(SMALL).unwrap()).unwrap();
    assert_eq!((maps.width, maps.height), (4, 4));
    assert_eq!(maps.goal, 15);
    assert_eq!(maps.layers.len(), 5);
    for layer in &maps.layers {
        assert_eq!(layer.values.len(), 16, "{}", layer.name);
        assert!(layer.values.iter().all(|v| v.is_finite()));
    }
    for name in ["target occupancy", "data occupancy", "least covered"] {
        let layer = maps.layers.iter().find(|l| l.name == name).unwrap();
        assert!((layer.values.iter().sum::<f64>() - 1.0).abs() < 1e-10, "{name}");
    }
    // ⟨d^π, r̄⟩ with state-only rewards equals the return
    let d_pi = &maps.layers[1].values;
    let reward = |s: usize| 1.0 / (1.0 + ((3 - s / 4) + (3 - s % 4)) as f64);
    let j: f64 = d_pi.iter().enumerate().map(|(s, d)| d * reward(s)).sum();
    assert!((j - maps.j_true).abs() < 1e-10);
}

#[test]
fn empty_request_uses_defaults() {
    let maps: Heatmaps = serde_json::from_str(&heatmaps("").unwrap()).unwrap();
    assert_eq!(maps.layers[0].values.len(), 100);
}

#[test]
fn estimate_is_seeded_and_reports_every_distribution() {
    let req = format!(r#"{{"gridwalk": {SMALL}, "reg": "U", "n": 300, "seed": 4}}"#);
    let a = estimate(&req).unwrap();
    assert_eq!(a, estimate(&req).unwrap());
    let resp: EstimateResponse = serde_json::from_str(&a).unwrap();
    assert_eq!(resp.estimate.len(), 16);
    assert_eq!(resp.errors.len(), 5);
    assert!(resp.errors.iter().all(|(_, e)| e.is_finite() && *e >= 0.0));
}

#[test]
fn bad_requests_are_reported_not_panicked() {
    assert!(estimate(r#"{"reg": "nowhere"}"#).is_err());
    assert!(heatmaps(r#"{"width": 1}"#).is_err());
    assert!(model_sweep(r#"{"m_grid": [2.0]}"#).is_err());
    assert!(estimate("not json").is_err());
}

#[test]
fn perfect_model_sweep_endpoint_is_exact() {
    let req = format!(r#"{{"gridwalk": {SMALL}, "n": 200, "runs": 3, "m_grid": [0.5, 1.0]}}"#);
    let resp: SweepResponse = serde_json::from_str(&model_sweep(&req).unwrap()).unwrap();
    assert_eq!(resp.m, vec![0.5, 1.0]);
    assert_eq!(resp.model[1], 0.0);
    assert!(resp.estimator[1] < 1e-8, "{:?}", resp.estimator);
    assert!(resp.model[0] > 0.0);
}
