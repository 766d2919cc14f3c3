use eapo_web::{explore_curve, group_rollouts, train_series};
use serde_json::Value;

#[test]
fn curve_is_flat_until_the_discounted_branch_wins() {
    let curve = explore_curve(0.2, 0.8, 11).unwrap();
    assert_eq!(curve.len(), 11);
    assert_eq!(curve[0], (0.0, 0.2));
    assert!((curve[10].1 - 0.8).abs() < 1e-12);
    for w in curve.windows(2) {
        assert!(w[1].1 >= w[0].1);
    }
    let knee = (0.2f64 / 0.8).sqrt();
    assert!(curve.iter().filter(|(g, _)| *g < knee).all(|&(_, r)| r == 0.2));
    assert!(explore_curve(1.5, 0.1, 5).is_err());
    assert!(explore_curve(0.1, 0.1, 1).is_err());
}

#[test]
fn series_has_one_point_per_epoch() {
    let text = train_series("key-corridor", 2, 1, 4, "grpo-baseline", 5, 1).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["mode"], "grpo-baseline");
    let epochs = v["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 5);
    for e in epochs {
        let s = e["success_rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&s));
    }
    assert_eq!(text, train_series("key-corridor", 2, 1, 4, "grpo-baseline", 5, 1).unwrap());
    assert!(train_series("maze", 2, 1, 4, "eapo", 5, 1).is_err());
    assert!(train_series("key-corridor", 2, 1, 4, "sgd", 5, 1).is_err());
}

#[test]
fn rollouts_carry_standardised_advantages() {
    let text = group_rollouts("shop-sim", 2, 2, 8, 8, 4).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    let rollouts = v.as_array().unwrap();
    assert_eq!(rollouts.len(), 8);
    let first = rollouts[0]["steps"][0]["state"].clone();
    assert!(rollouts.iter().all(|r| r["steps"][0]["state"] == first));
    let starts: Vec<f64> = rollouts.iter().map(|r| r["steps"][0]["advantage"].as_f64().unwrap()).collect();
    assert!(starts.iter().sum::<f64>().abs() < 1e-9);
}
