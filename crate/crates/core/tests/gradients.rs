mod common;

use common::{quadruplet_gradcheck, siamese_gradcheck, FD_TOL};

#[test]
fn trimargin_loss_gradient_matches_central_differences() {
    let r = siamese_gradcheck(50, 11);
    assert_eq!(r.batches, 50);
    assert!(r.max_error < FD_TOL, "{r:?}");
}

#[test]
fn quadruplet_loss_gradient_matches_central_differences() {
    let r = quadruplet_gradcheck(50, 12);
    assert_eq!(r.batches, 50);
    assert!(r.max_error < FD_TOL, "{r:?}");
}
