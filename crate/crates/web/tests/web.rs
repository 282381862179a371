use stacklab_web::{fit_curve, sample_task, stack_trace};

#[test]
fn pushes_then_pop_restore_the_stack() {
    let t = stack_trace("1 0 0 1 0\n1 0 0 0 1\n0 1 0 9 9\n").unwrap();
    let steps = t["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 3);
    assert_eq!(steps[1]["cells"][0], serde_json::json!([0.0, 1.0]));
    assert_eq!(steps[2]["cells"][0], serde_json::json!([1.0, 0.0]));
    assert!(stack_trace("0.5 0.6 0 1").is_err());
    assert!(stack_trace("1 0 0 1\n1 0 0 1 2").is_err());
}

#[test]
fn sampled_strings_are_members() {
    let v = sample_task("count3", 6, 30, 10, 1).unwrap();
    let rows = v["strings"].as_array().unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r["member"] == true));
    assert!(sample_task("nope", 1, 2, 1, 1).is_err());
}

#[test]
fn fit_recovers_exponent() {
    let text: String = [50.0f64, 100.0, 200.0, 400.0, 800.0]
        .iter()
        .map(|t| format!("{t},{}\n", 0.002 * t.powf(1.2) + 0.3))
        .collect();
    let fit = fit_curve(&text).unwrap();
    assert!((fit["b"].as_f64().unwrap() - 1.2).abs() < 0.05, "{fit}");
    assert!(fit_curve("1,2,3").is_err());
}
