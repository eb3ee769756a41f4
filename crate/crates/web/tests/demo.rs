use craft_web::Demo;
use serde_json::Value;

const CONFIG: &str = r#"{"layers":4,"experts":16,"batches":8,"zipf":1.2,"topk":2,
    "tokens":512,"seed":3,"gpus":4,"nodes":2}"#;

fn demo() -> Demo {
    Demo::from_json(CONFIG).unwrap()
}

#[test]
fn gains_have_one_row_per_layer() {
    let v: Value = serde_json::from_str(&demo().gains_json()).unwrap();
    assert_eq!(v["candidates"], serde_json::json!([1, 2, 4]));
    assert_eq!(v["gains"].as_array().unwrap().len(), 4);
    assert_eq!(v["baseline"].as_array().unwrap().len(), 4);
}

#[test]
fn sweep_rows_are_sorted_and_monotone() {
    let rows: Vec<Value> =
        serde_json::from_str(&demo().sweep_json(&[4, 0, 1, 2]).unwrap()).unwrap();
    let r: Vec<u64> = rows
        .iter()
        .map(|x| x["replication_factor"].as_u64().unwrap())
        .collect();
    assert_eq!(r, vec![0, 1, 2, 4]);
    let obj: Vec<f64> = rows
        .iter()
        .map(|x| x["objective"].as_f64().unwrap())
        .collect();
    assert!(obj.windows(2).all(|w| w[0] <= w[1]));
    // no replicas: both strategies are the placement-only plan
    assert_eq!(rows[0]["craft"], rows[0]["placement_only"]);
    assert_eq!(rows[0]["uniform"], rows[0]["placement_only"]);
}

#[test]
fn plan_view_conserves_load() {
    let d = demo();
    let v: Value = serde_json::from_str(&d.plan_json(2).unwrap()).unwrap();
    assert_eq!(v["replication_factor"], 2);
    let layers = v["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 4);
    // 8 batches x 512 tokens x top-2 per layer
    for layer in layers {
        let total: f64 = layer["gpu_loads"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .sum();
        assert!((total - 8192.0).abs() < 1e-6, "{total}");
        assert_eq!(layer["slots"].as_array().unwrap().len(), 4);
    }
    let used: u64 = v["allocation"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap())
        .sum();
    assert!(used <= 8);
}

#[test]
fn bad_config_is_an_error() {
    assert!(Demo::from_json(r#"{"layers":0}"#).is_err());
    let bad = CONFIG.replace(r#""nodes":2"#, r#""nodes":3"#);
    assert!(Demo::from_json(&bad).is_err());
}
