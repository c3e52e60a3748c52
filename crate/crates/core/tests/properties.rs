mod common;

fn run(check: fn() -> common::Check) {
    if let Err(e) = check() {
        panic!("{e}");
    }
}

#[test]
fn quadrature_exactness() {
    run(common::quadrature_exactness);
}

#[test]
fn spline_basis_and_monotonicity() {
    run(common::spline_basis_and_monotonicity);
}

#[test]
fn pack_unpack_bijection() {
    run(common::pack_unpack_bijection);
}

#[test]
fn penrose_conditions() {
    run(common::penrose_conditions);
}

#[test]
fn monotone_ascent() {
    run(common::monotone_ascent);
}

#[test]
fn seed_determinism() {
    run(common::seed_determinism);
}
