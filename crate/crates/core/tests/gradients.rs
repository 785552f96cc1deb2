//! Analytic gradients of the loss terms against central finite differences
//! on small double-precision networks.

mod common;

use common::gradcheck::{self, GanMode, TOL};

fn assert_close((err, n): (f64, usize), min_coords: usize) {
    assert!(n >= min_coords, "only {n} coordinates compared");
    assert!(err <= TOL, "worst relative error {err}");
}

#[test]
fn vae_loss_gradient() {
    assert_close(gradcheck::vae_loss(), 50);
}

#[test]
fn cc_loss_gradient() {
    assert_close(gradcheck::cc_loss(), 50);
}

#[test]
fn gan_d_loss_gradient() {
    assert_close(gradcheck::gan_d_loss(), 20);
}

#[test]
fn gan_g_loss_gradient_both_modes() {
    assert_close(gradcheck::gan_g_loss(GanMode::PaperSaturating), 50);
    assert_close(gradcheck::gan_g_loss(GanMode::NonSaturating), 50);
}

#[test]
fn classifier_loss_gradient_with_batch_norm() {
    assert_close(gradcheck::classifier_loss(), 20);
}
