use cfn_web::{eigen_scan_json, fit_trace_json, witness_slice_json};
use serde_json::Value;

#[test]
fn slice_has_both_maxima_at_the_top() {
    let v: Value = serde_json::from_str(&witness_slice_json(21).unwrap()).unwrap();
    let z = v["z"].as_array().unwrap();
    assert_eq!(z.len(), 21 * 21);
    let best = z.iter().filter_map(Value::as_f64).fold(f64::NEG_INFINITY, f64::max);
    assert!((best - v["objective"].as_f64().unwrap()).abs() < 1e-9);
    assert_eq!(v["maxima"].as_array().unwrap().len(), 2);
}

#[test]
fn fit_trace_ascends() {
    let v: Value = serde_json::from_str(&fit_trace_json(0.05, 5000, 1, 0.5).unwrap()).unwrap();
    let obj: Vec<f64> = v["objective"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!(obj.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    assert!(v["converged"].as_bool().unwrap());
}

#[test]
fn eigen_scan_is_negative_definite() {
    let v: Value = serde_json::from_str(&eigen_scan_json(0.05, 9).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 9);
    for r in rows {
        let (a, b) = (r["lambda_min"].as_f64().unwrap(), r["lambda_max"].as_f64().unwrap());
        assert!(a <= b && b < 0.0);
    }
    assert!(eigen_scan_json(0.4, 3).is_err());
}
