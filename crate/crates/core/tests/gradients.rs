//! Analytic gradients of every layer and of the full objective against
//! central finite differences.

mod common;

use common::gradcheck::{self, Report};
use common::FD_TOLERANCE;

fn assert_close(report: Report) {
    assert!(!report.is_empty());
    for (name, err) in report {
        assert!(err < FD_TOLERANCE, "{name}: relative error {err:.3e}");
    }
}

#[test]
fn dense_layer() {
    assert_close(gradcheck::dense_layer());
}

#[test]
fn feature_block_layer() {
    assert_close(gradcheck::feature_block_layer());
}

#[test]
fn edge_conv_layer() {
    assert_close(gradcheck::edge_conv_layer());
}

#[test]
fn probability_head() {
    assert_close(gradcheck::probability_head());
}

#[test]
fn tps_solve_and_warp() {
    assert_close(gradcheck::tps_solve_and_warp());
}

#[test]
fn chamfer_gradient() {
    assert_close(gradcheck::chamfer_gradient());
}

#[test]
fn end_to_end_through_solve() {
    assert_close(gradcheck::end_to_end_through_solve());
}
