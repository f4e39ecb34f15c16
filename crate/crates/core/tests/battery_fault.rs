// Kept in its own test binary: the fault switch is process-wide.

use longiflow::flow::inject_logdet_sign_fault;
use longiflow::verify::run_battery;

#[test]
fn flipped_logdet_sign_fails_the_logdet_row() {
    inject_logdet_sign_fault(true);
    let rows = run_battery(1);
    inject_logdet_sign_fault(false);
    let logdet = rows.iter().find(|r| r.name == "log-det vs Jacobian").unwrap();
    assert!(!logdet.passed, "{logdet}");
    let round_trip = rows.iter().find(|r| r.name == "flow round trip (f64)").unwrap();
    assert!(round_trip.passed);
}
