use fiwkit::bigtensor::{bit_length, IntTensor};
use fiwkit::network::{
    fiw_empirical, fiw_static, int_infer, Architecture, IntLayerParams, IntNetwork, LayerSpec,
};
use num_bigint::BigInt;
use proptest::prelude::*;

fn arch() -> Architecture {
    Architecture {
        name: "p".into(),
        input_shape: [1, 3, 3],
        input_bits: 3,
        layers: vec![
            LayerSpec::Conv2d {
                out_channels: 2,
                kernel_h: 2,
                kernel_w: 2,
                stride: 1,
            },
            LayerSpec::Square,
            LayerSpec::SumPool {
                window: 2,
                stride: 1,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 2 },
        ],
    }
}

fn net(conv: Vec<i64>, dense: Vec<i64>, bias: Vec<i64>) -> IntNetwork {
    IntNetwork::new(
        arch(),
        vec![
            Some(IntLayerParams {
                weight: IntTensor::from_i64(vec![2, 1, 2, 2], &conv).unwrap(),
                bias: Some(IntTensor::from_i64(vec![2], &bias).unwrap()),
            }),
            None,
            None,
            None,
            Some(IntLayerParams {
                weight: IntTensor::from_i64(vec![2, 2], &dense).unwrap(),
                bias: None,
            }),
        ],
        None,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn static_bound_covers_every_input(
        conv in prop::collection::vec(-7i64..=7, 8),
        dense in prop::collection::vec(-7i64..=7, 4),
        bias in prop::collection::vec(-20i64..=20, 2),
        xs in prop::collection::vec(prop::collection::vec(0i64..=7, 9), 1..6),
    ) {
        let n = net(conv, dense, bias);
        let samples: Vec<IntTensor> = xs.iter().map(|x| IntTensor::from_i64(vec![1, 3, 3], x).unwrap()).collect();
        let emp = fiw_empirical(&n, &samples).unwrap();
        let stat = fiw_static(&n).unwrap();
        for (e, s) in emp.layers.iter().zip(&stat.layers) {
            prop_assert!(e.max_abs <= s.max_abs, "{} {} > {}", e.layer, e.max_abs, s.max_abs);
        }
        let top = samples
            .iter()
            .flat_map(|x| int_infer(&n, x).unwrap().into_data())
            .map(|v| if v < BigInt::from(0) { -v } else { v })
            .max()
            .unwrap();
        prop_assert_eq!(emp.final_integer_width, bit_length(&top) + 1);
    }

    #[test]
    fn merge_is_order_independent(
        conv in prop::collection::vec(-7i64..=7, 8),
        xs in prop::collection::vec(prop::collection::vec(0i64..=7, 9), 3),
    ) {
        let n = net(conv, vec![1, -2, 3, 1], vec![0, 1]);
        let reports: Vec<_> = xs
            .iter()
            .map(|x| fiw_empirical(&n, &[IntTensor::from_i64(vec![1, 3, 3], x).unwrap()]).unwrap())
            .collect();
        let left = reports[0].clone().merge(&reports[1]).merge(&reports[2]);
        let right = reports[2].clone().merge(&reports[0].clone().merge(&reports[1]));
        prop_assert_eq!(&left.layers, &right.layers);
        prop_assert_eq!(left.final_integer_width, right.final_integer_width);
        let all: Vec<IntTensor> = xs.iter().map(|x| IntTensor::from_i64(vec![1, 3, 3], x).unwrap()).collect();
        prop_assert_eq!(fiw_empirical(&n, &all).unwrap(), left);
    }
}
