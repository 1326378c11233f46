mod common;

use proptest::prelude::*;
use rsi_attrib::model::{accuracy, build_model, shapes3, LayerSelector, ModelConfig};

#[test]
fn toy_cnn_learns_shapes() {
    let model = common::trained(7);
    let train_acc = accuracy(&model, &shapes3(7, 60)).unwrap();
    assert!(train_acc >= 0.9, "train accuracy {train_acc}");
    let held_out = accuracy(&model, &shapes3(1007, 60)).unwrap();
    assert!(held_out >= 0.8, "held-out accuracy {held_out}");
}

#[test]
fn training_is_reproducible() {
    assert!(common::trained(3).same_params(&common::trained(3)));
    assert!(!common::trained(3).same_params(&common::trained(4)));
}

#[test]
fn layer_names_resolve() {
    let m = build_model(ModelConfig::shapes3(0)).unwrap();
    let names: Vec<_> = m.layers().iter().map(|l| l.name.as_str()).collect();
    assert_eq!(
        names,
        ["conv0", "relu1", "maxpool2", "flatten3", "dense4", "softmax5"]
    );
    for (i, n) in names.iter().enumerate() {
        let by_name = m.layer(&n.parse::<LayerSelector>().unwrap()).unwrap().node;
        assert_eq!(m.layer(&LayerSelector::Index(i)).unwrap().node, by_name);
    }
    assert!(m.feature_layer(&"flatten3".parse().unwrap()).is_err());
    assert_eq!(m.last_feature_layer().unwrap().name, "maxpool2");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_are_distributions(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let m = build_model(ModelConfig::shapes3(seed % 16)).unwrap();
        let mut rng = common::rng(seed);
        let x = common::uniform(&mut rng, m.input_shape(), -scale, scale);
        let p = m.predict(&x).unwrap();
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
    }
}
