#![allow(dead_code)]

use std::collections::BTreeMap;

use diffnet_core::netmodel::{ContinuousNetwork, DiscreteModel};
use diffnet_core::pipeline::ModelSetSpec;
use diffnet_core::structured::ParamRef;
use diffnet_core::PolyMatrix;
use nalgebra::DMatrix;

pub const TS: f64 = 0.01;

/// Four-node mass-spring-damper benchmark with `k` excitations entering at
/// nodes `1..=k`.
pub fn four_node_network(k: usize) -> ContinuousNetwork {
    let x = vec![
        vec![1.0, 0.0, 0.01],
        vec![1.0, 0.0, 0.02],
        vec![1.0, 0.0, 0.05],
        vec![10.0, 0.0, 0.07],
    ];
    let mut y = BTreeMap::new();
    y.insert((0, 1), vec![4.0, 0.3]);
    y.insert((1, 2), vec![0.0, 0.4]);
    y.insert((1, 3), vec![8.0, 0.0]);
    y.insert((2, 3), vec![9.0, 0.6]);
    let b = PolyMatrix::constant(DMatrix::from_fn(4, k, |i, j| if i == j { 1.0 } else { 0.0 }));
    ContinuousNetwork::new(x, y, b).unwrap()
}

pub fn four_node_model(k: usize, c1: f64, sigma2: f64) -> DiscreteModel {
    let c = if c1 == 0.0 {
        PolyMatrix::identity(4)
    } else {
        PolyMatrix::new(vec![DMatrix::identity(4, 4), DMatrix::identity(4, 4) * c1]).unwrap()
    };
    DiscreteModel::from_network(&four_node_network(k), TS, c, DMatrix::identity(4, 4) * sigma2).unwrap()
}

/// Model set with second-order couplings between all node pairs, diagonal
/// `A_2`, `b_11 = 1` and the remaining `B_0` pattern of the excitation layout.
pub fn four_node_spec(k: usize, nc: usize) -> ModelSetSpec {
    let mut s = ModelSetSpec::new(4, k, 2, 0, nc).unwrap();
    for i in 0..4 {
        for j in (i + 1)..4 {
            s.fix(ParamRef::A { i, j, lag: 2 }, 0.0).unwrap();
        }
    }
    for i in 0..4 {
        for j in 0..k {
            if i != j {
                s.fix(ParamRef::B { i, j, lag: 0 }, 0.0).unwrap();
            }
        }
    }
    s.fix(ParamRef::B { i: 0, j: 0, lag: 0 }, 1.0).unwrap();
    s
}

/// Continuous parameter vector: ground components node-major over lags
/// `0..=2`, then negated couplings pair-major over lags `0..=1`.
pub fn component_vector(net: &ContinuousNetwork) -> Vec<f64> {
    let mut v = Vec::with_capacity(24);
    for j in 0..4 {
        for l in 0..=2 {
            v.push(net.x_at(j, l));
        }
    }
    for j in 0..4 {
        for k in (j + 1)..4 {
            for l in 0..=1 {
                v.push(-net.y_at(j, k, l));
            }
        }
    }
    v
}
