//! Weight sharing, player alternation and checkpoint/resume exactness.

mod common;

use common::*;

#[test]
fn tied_rows_stay_identical_through_mixed_steps() {
    let (t, identical) = mixed_steps(100);
    assert!(identical);
    assert_eq!(t.step, 34);
}

#[test]
fn each_player_only_moves_its_own_parameters() {
    assert_eq!(player_isolation(), [true; 4]);
}

#[test]
fn shared_gradient_is_the_sum_over_untied_copies() {
    let (err, tied) = untied_twin_error(0);
    assert!(tied > 0);
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn shared_discriminator_rows_accumulate_both_domains() {
    let (err, tied) = untied_twin_error(1);
    let (_, base) = untied_twin_error(0);
    assert_eq!(tied, base + 2);
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn checkpoint_bytes_survive_a_round_trip() {
    assert!(checkpoint_bytes_round_trip());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let ((a, la), (b, lb)) = resume_pair(6, dir.path());
    assert_eq!(la, lb);
    assert!(a == b, "final checkpoints differ");
}
