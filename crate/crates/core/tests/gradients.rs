//! Finite-difference checks through the aggregation blocks, the expert
//! fusion, the orthogonality loss and the full objective (f64).

use pcaagg::gradsuite::cases;

#[test]
fn every_composite_passes() {
    let mut failed = Vec::new();
    for case in cases() {
        let report = (case.check)().unwrap();
        println!("{:45} max rel. error {:.2e} (tol {:e})", case.name, report.max_rel_error(), report.tol);
        if !report.passed() {
            failed.push((case.name, report.worst().cloned()));
        }
    }
    assert!(failed.is_empty(), "{failed:?}");
}
