use csa_dpunet::attention::{
    attention_map, attention_map_elements, correlate, csa_block_forward, full_attention_oracle,
    AttentionConfig, Correlation, Neighborhood, ProjectionWeights,
};
use csa_dpunet::checkpoint;
use csa_dpunet::network::{Network, NetworkConfig};
use csa_dpunet::ops::Mode;
use csa_dpunet::training::synth::{generate_sample, SyntheticSpec};
use csa_dpunet::{Rng, Tensor};
use proptest::prelude::*;

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..12).prop_flat_map(|n| {
        (
            proptest::collection::vec(-5.0f64..5.0, n),
            proptest::collection::vec(-5.0f64..5.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_ignores_shifts_and_is_symmetric((q, k) in vec_pair(), a in -20.0f64..20.0, b in -20.0f64..20.0) {
        let cov = |x: &[f64], y: &[f64]| correlate(x, y, Correlation::Covariance).unwrap();
        let qs: Vec<f64> = q.iter().map(|v| v + a).collect();
        let ks: Vec<f64> = k.iter().map(|v| v + b).collect();
        prop_assert!((cov(&qs, &ks) - cov(&q, &k)).abs() < 1e-9);
        prop_assert_eq!(cov(&q, &k), cov(&k, &q));
    }

    #[test]
    fn attention_rows_are_distributions(h in 1usize..6, w in 1usize..6, dq in 1usize..4, seed in any::<u64>(), full in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let q = Tensor::randn(&[h, w, dq], 2.0, &mut rng);
        let k = Tensor::randn(&[h, w, dq], 2.0, &mut rng);
        let nb = if full { Neighborhood::Full } else { Neighborhood::CrissCross };
        let cfg = AttentionConfig { neighborhood: nb, ..AttentionConfig::default() };
        let map = attention_map(&q, &k, &cfg).unwrap();
        prop_assert_eq!(map.elements() as u64, attention_map_elements(h, w, nb));
        let m = map.sa.dims()[2];
        for row in map.sa.data().chunks(m) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_neighborhood_matches_oracle(h in 1usize..5, w in 1usize..5, d in 1usize..5, seed in any::<u64>(), dot in any::<bool>()) {
        let mode = if dot { Correlation::Dot } else { Correlation::Covariance };
        let cfg = AttentionConfig { mode, neighborhood: Neighborhood::Full, reduction: 2, loops: 1 };
        let mut rng = Rng::new(seed);
        let x = Tensor::randn(&[h, w, d], 1.0, &mut rng);
        let weights = ProjectionWeights::init(d, &cfg, &mut rng);
        let got = csa_block_forward(&x, &weights, &cfg).unwrap();
        let want = full_attention_oracle(&x, &weights, mode).unwrap();
        prop_assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
    }

    #[test]
    fn synthetic_samples_are_addressable(seed in any::<u64>(), index in 0usize..1000) {
        let spec = SyntheticSpec { size: 16, seed, ..SyntheticSpec::default() };
        let s = generate_sample(&spec, index).unwrap();
        prop_assert_eq!(&s, &generate_sample(&spec, index).unwrap());
        prop_assert!(s.mask.sum() > 0.0);
        prop_assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn eval_forward_is_pure_and_checkpoint_faithful() {
    let mut net = Network::build(&NetworkConfig {
        base_channels: 4,
        seed: 8,
        ..NetworkConfig::default()
    })
    .unwrap();
    let mut rng = Rng::new(1);
    let x = Tensor::rand_uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut rng);
    // move the running statistics away from their initial values
    net.forward(&x, Mode::Train).unwrap();
    let a = net.predict(&x).unwrap();
    let b = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.ckpt");
    checkpoint::save(&net, &path).unwrap();
    let restored = checkpoint::load(&path).unwrap();
    assert_eq!(restored.predict(&x).unwrap(), a);
}

#[test]
fn frozen_random_streams() {
    let mut r = Rng::new(42);
    let got: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
    assert_eq!(
        got,
        [
            12578764544318200737,
            17529487244874322312,
            7886285670807131020
        ]
    );
    assert_eq!(Rng::stream(42, 7).next_u64(), 2370525664269707216);

    let s = generate_sample(
        &SyntheticSpec {
            seed: 42,
            ..SyntheticSpec::default()
        },
        3,
    )
    .unwrap();
    assert_eq!((s.ellipses.len(), s.mask.sum()), (1, 47.0));
}
