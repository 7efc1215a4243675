//! Single-primitive and composite graphs for finite-difference checks.

use super::graph::{Graph, Node};
use super::{distinct_tensor, off_zero_tensor, random_tensor, Head};
use nas_core::kernels::{ConvGeom, PoolGeom, PoolMode};
use nas_core::tensor::Shape;
use rand_chacha::ChaCha8Rng;

const SAME3: PoolGeom = PoolGeom {
    window: 3,
    stride: 1,
    padding: 1,
};

pub struct Case {
    pub name: &'static str,
    pub head: Head,
    pub graph: fn(&mut ChaCha8Rng) -> Graph,
}

fn s(b: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(b, c, h, w)
}

pub fn cases() -> Vec<Case> {
    use Node::*;
    vec![
        Case {
            name: "conv3x3",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![random_tensor(s(2, 3, 5, 5), r), random_tensor(s(4, 3, 3, 3), r)],
                nodes: vec![Conv(0, 1, ConvGeom::same(3, 1, 1, 1))],
            },
        },
        Case {
            name: "depthwise_dilated_strided",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![random_tensor(s(2, 3, 7, 7), r), random_tensor(s(3, 1, 5, 5), r)],
                nodes: vec![Conv(0, 1, ConvGeom::same(5, 2, 2, 3))],
            },
        },
        Case {
            name: "pointwise",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![random_tensor(s(2, 4, 4, 4), r), random_tensor(s(5, 4, 1, 1), r)],
                nodes: vec![Conv(0, 1, ConvGeom::same(1, 1, 1, 1))],
            },
        },
        Case {
            name: "pointwise_strided",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![random_tensor(s(2, 4, 5, 5), r), random_tensor(s(3, 4, 1, 1), r)],
                nodes: vec![Conv(0, 1, ConvGeom::same(1, 2, 1, 1))],
            },
        },
        Case {
            name: "grouped",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![random_tensor(s(1, 4, 5, 5), r), random_tensor(s(6, 2, 3, 3), r)],
                nodes: vec![Conv(0, 1, ConvGeom::same(3, 1, 1, 2))],
            },
        },
        Case {
            name: "max_pool",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![distinct_tensor(s(2, 2, 5, 5), r)],
                nodes: vec![Pool(0, PoolMode::Max, SAME3)],
            },
        },
        Case {
            name: "avg_pool_strided",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![random_tensor(s(2, 2, 5, 5), r)],
                nodes: vec![Pool(
                    0,
                    PoolMode::Average,
                    PoolGeom {
                        window: 3,
                        stride: 2,
                        padding: 1,
                    },
                )],
            },
        },
        Case {
            name: "normalize_affine",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![
                    random_tensor(s(3, 2, 3, 3), r),
                    random_tensor(s(1, 2, 1, 1), r),
                    random_tensor(s(1, 2, 1, 1), r),
                ],
                nodes: vec![Normalize(0, Some(1), Some(2))],
            },
        },
        Case {
            name: "normalize_plain",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![random_tensor(s(2, 3, 3, 3), r)],
                nodes: vec![Normalize(0, None, None)],
            },
        },
        Case {
            name: "relu",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![off_zero_tensor(s(2, 3, 3, 3), r)],
                nodes: vec![Relu(0)],
            },
        },
        Case {
            name: "add_mul_add_n",
            head: Head::Project,
            graph: |r| Graph {
                inputs: (0..3).map(|_| random_tensor(s(2, 2, 3, 3), r)).collect(),
                nodes: vec![Add(0, 1), Mul(3, 2), AddN(vec![4, 0, 2])],
            },
        },
        Case {
            name: "softmax_weighted_sum",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![
                    random_tensor(s(1, 1, 2, 3), r),
                    random_tensor(s(2, 2, 3, 3), r),
                    random_tensor(s(2, 2, 3, 3), r),
                    random_tensor(s(2, 2, 3, 3), r),
                ],
                nodes: vec![
                    SoftmaxRows(0),
                    WeightedSum(vec![1, 2, 3], 4, 0),
                    WeightedSum(vec![1, 2, 3], 4, 3),
                    Mul(5, 6),
                ],
            },
        },
        Case {
            name: "concat_slice_shift",
            head: Head::Project,
            graph: |r| Graph {
                inputs: vec![random_tensor(s(2, 3, 4, 4), r), random_tensor(s(2, 2, 4, 4), r)],
                nodes: vec![Concat(vec![0, 1]), Slice(2, 1, 3), Shift(3), Mul(4, 3)],
            },
        },
        Case {
            name: "gap_linear_cross_entropy",
            head: Head::CrossEntropy(vec![0, 2, 1, 2]),
            graph: |r| Graph {
                inputs: vec![
                    random_tensor(s(4, 3, 3, 3), r),
                    random_tensor(s(3, 3, 1, 1), r),
                    random_tensor(s(1, 3, 1, 1), r),
                ],
                nodes: vec![Gap(0), Linear(3, 1, Some(2))],
            },
        },
        Case {
            name: "composite_every_primitive",
            head: Head::CrossEntropy(vec![1, 2]),
            graph: |r| Graph {
                inputs: vec![
                    off_zero_tensor(s(2, 2, 4, 4), r), // 0 features
                    random_tensor(s(2, 1, 3, 3), r),   // 1 depthwise kernel
                    random_tensor(s(4, 2, 1, 1), r),   // 2 pointwise kernel
                    random_tensor(s(1, 4, 1, 1), r),   // 3 scale
                    random_tensor(s(1, 4, 1, 1), r),   // 4 shift
                    random_tensor(s(1, 1, 1, 2), r),   // 5 mixing logits
                    random_tensor(s(3, 6, 1, 1), r),   // 6 classifier
                    distinct_tensor(s(2, 4, 4, 4), r), // 7 max-pool input
                ],
                nodes: vec![
                    Relu(0),                                // 8
                    Conv(8, 1, ConvGeom::same(3, 1, 1, 2)), // 9
                    Conv(9, 2, ConvGeom::same(1, 1, 1, 1)), // 10
                    Normalize(10, Some(3), Some(4)),        // 11
                    Pool(7, PoolMode::Max, SAME3),          // 12
                    Pool(11, PoolMode::Average, SAME3),     // 13
                    Shift(12),                              // 14
                    Mul(14, 13),                            // 15
                    Add(15, 11),                            // 16
                    AddN(vec![16, 12, 13]),                 // 17
                    Slice(17, 0, 2),                        // 18
                    Concat(vec![17, 18]),                   // 19
                    SoftmaxRows(5),                         // 20
                    Slice(12, 1, 2),                        // 21
                    Concat(vec![11, 21]),                   // 22
                    WeightedSum(vec![19, 22], 20, 0),       // 23
                    Gap(23),                                // 24
                    Linear(24, 6, None),                    // 25
                ],
            },
        },
    ]
}
