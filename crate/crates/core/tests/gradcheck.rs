mod common;

use common::{conv, fc, gradient_case, input, net, softmax, trajectory_error, TOL};
use lowprec::netdesc::{LayerDescriptor, LayerOp, PoolSpec};

fn check(net: lowprec::NetDescriptor, batch: usize, seed: u64) {
    let (s, err) = gradient_case(net, batch, seed).unwrap();
    assert!(err < TOL, "seed {s}: max relative error {err}");
}

#[test]
fn single_fc_one_sample() {
    check(net(vec![input(vec![5]), fc(5, 3, false), softmax()]), 1, 1);
}

#[test]
fn conv_on_5x5_input() {
    check(net(vec![input(vec![1, 5, 5]), conv("c", 1, 2, 3, 1, 0, false, None), fc(18, 3, false), softmax()]), 1, 2);
}

#[test]
fn strided_padded_conv_with_relu() {
    check(net(vec![input(vec![2, 7, 6]), conv("c", 2, 3, 3, 2, 1, true, None), fc(36, 4, false), softmax()]), 3, 3);
}

#[test]
fn conv_with_pooling() {
    check(net(vec![input(vec![1, 6, 6]), conv("c", 1, 2, 3, 1, 1, true, Some(PoolSpec::new(2, 2))), fc(18, 3, false), softmax()]), 2, 4);
}

#[test]
fn standalone_act_and_pool_layers() {
    check(
        net(vec![
            input(vec![2, 6, 6]),
            conv("c1", 2, 3, 3, 1, 1, false, None),
            LayerDescriptor::new("act", LayerOp::Act),
            LayerDescriptor::new("pool", LayerOp::MaxPool(PoolSpec::new(3, 3))),
            conv("c2", 3, 2, 1, 1, 0, true, None),
            fc(8, 3, true),
            fc(3, 2, false),
            softmax(),
        ]),
        2,
        5,
    );
}

#[test]
fn logits_without_softmax_layer() {
    check(net(vec![input(vec![4]), fc(4, 6, true), fc(6, 3, false)]), 4, 6);
}

/// With quantization off, ten optimizer steps of the trainer follow the
/// direct-loop reference step for step.
#[test]
fn float_trainer_matches_reference_trajectory() {
    let err = trajectory_error();
    assert!(err < 1e-9, "{err}");
}
