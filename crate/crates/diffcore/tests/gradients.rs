//! Finite-difference checks for every differentiable operation (f64, step 1e-5).

use diffcore::gradsuite::cases;
use diffcore::{check_gradients, DiffError, GradCheckConfig, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, dims) in entries {
        s.insert(*name, Tensor::randn(dims.to_vec(), 1.0, &mut r)).unwrap();
    }
    s
}

#[test]
fn every_operation_passes() {
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

#[test]
fn sum_of_x_has_unit_gradient() {
    let st = store(&[("x", &[7])], 1);
    let report = check_gradients(
        &st,
        |s| -> Result<Var, DiffError> {
            let x = s.param("x")?;
            Ok(s.graph.sum_all(x))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-9);
}

#[test]
fn corrupted_gradient_is_caught() {
    let st = store(&[("x", &[5])], 3);
    let report = check_gradients(
        &st,
        |s| -> Result<Var, DiffError> {
            let x = s.param("x")?;
            let x2 = s.graph.scale_grad(x, 2.0);
            let y = s.graph.square(x2);
            Ok(s.graph.sum_all(y))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert!(report.max_rel_error() > 0.4);
}

#[test]
fn unknown_leaf_is_an_error() {
    let st = store(&[("x", &[2])], 15);
    let cfg = GradCheckConfig::default().with_leaves(&["nope"]);
    let r = check_gradients(
        &st,
        |s| -> Result<Var, DiffError> {
            let x = s.param("x")?;
            Ok(s.graph.sum_all(x))
        },
        &cfg,
    );
    assert!(matches!(r, Err(DiffError::UnknownParameter(_))));
}
