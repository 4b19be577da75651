// Success paths only: building a JsError needs a wasm host.
use crowdcast_web::{density_from_heads, Corridor};

#[test]
fn corridor_sequence_and_forecast() {
    let c = Corridor::new(1, 32, 5.0).unwrap();
    assert_eq!(c.len(), 11);
    assert_eq!(c.frame(0).len(), 32 * 32);
    let fc = c.forecast(3).unwrap();
    assert_eq!(fc.len(), 32 * 32);
    assert!(fc.iter().all(|v| *v >= 0.0));
    let d = c.density(4);
    assert!((d.iter().sum::<f64>() - c.count(4)).abs() < 1e-9);
    assert_eq!(c.pmae(d, 4, 4).unwrap(), 0.0);
}

#[test]
fn clicked_heads_keep_their_mass() {
    let d = density_from_heads(vec![5.0, 20.0, 40.5], vec![7.0, 30.0, 12.0], 48, 64, 0.3, 1).unwrap();
    assert_eq!(d.len(), 48 * 64);
    assert!((d.iter().sum::<f64>() - 3.0).abs() < 1e-9);
}
