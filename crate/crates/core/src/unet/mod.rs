//! Micro U-Net encoder/decoder built from interchangeable backbone blocks.

mod blocks;
mod checkpoint;
mod config;
mod model;

pub use blocks::{
    default_registry, BackboneFamily, BackboneRegistry, Block, BnMode, BnObserver, ForwardCtx,
};
pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{BackboneVariant, UNetConfig};
pub use model::{ForwardOutput, GraphForward, Model, Network, Param};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    /// Hand-summed parameter count for depth 1, base 8, 3 input channels,
    /// residual blocks (3x3 convs without bias, BN gamma+beta, 1x1 projection
    /// with bias whenever widths change):
    ///
    /// enc0 3->8:        216 + 16 + 576 + 16 + (24 + 8)        =  856
    /// bottleneck 8->16: 1152 + 32 + 2304 + 32 + (128 + 16)    = 3664
    /// dec0 24->8:       1728 + 16 + 576 + 16 + (192 + 8)      = 2536
    /// head 8->1:        8 + 1                                 =    9
    const RESIDUAL_D1_B8_PARAMS: usize = 856 + 3664 + 2536 + 9;

    #[test]
    fn parameter_count_matches_hand_sum() {
        let m = Model::build(&UNetConfig::micro(BackboneVariant::Residual, 1, 8, 0)).unwrap();
        assert_eq!(m.param_count(), RESIDUAL_D1_B8_PARAMS);
    }

    #[test]
    fn logits_keep_spatial_shape_for_every_variant() {
        for v in BackboneVariant::ALL {
            for depth in [1, 2] {
                let m = Model::build(&UNetConfig::micro(v, depth, 8, 1)).unwrap();
                let out = m
                    .forward(&random_input(&[2, 3, 16, 16], 2), BnMode::Eval)
                    .unwrap();
                assert_eq!(out.logits.shape(), &[2, 1, 16, 16], "{v} depth {depth}");
            }
        }
        let m = Model::build(&UNetConfig::micro(BackboneVariant::Residual, 1, 8, 0)).unwrap();
        let out = m
            .forward(&random_input(&[1, 3, 32, 32], 3), BnMode::Eval)
            .unwrap();
        assert_eq!(out.logits.shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn seeded_build_is_bit_identical() {
        for v in BackboneVariant::ALL {
            let cfg = UNetConfig::micro(v, 2, 8, 42);
            let a = Model::build(&cfg).unwrap();
            let b = Model::build(&cfg).unwrap();
            assert!(a.bit_eq(&b));
            assert_eq!(a.bn_paths(), b.bn_paths());
            let c = Model::build(&UNetConfig { seed: 43, ..cfg }).unwrap();
            assert!(!a.bit_eq(&c));
        }
    }

    #[test]
    fn eval_forward_is_pure_and_train_forward_moves_statistics() {
        let m = Model::build(&UNetConfig::micro(BackboneVariant::SqueezeExcite, 2, 8, 5)).unwrap();
        let x = random_input(&[3, 3, 8, 8], 6);
        let a = m.forward(&x, BnMode::Eval).unwrap();
        let b = m.forward(&x, BnMode::Eval).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
        assert_eq!(&a.bn, m.bn_states());
        let t = m.forward(&x, BnMode::Train).unwrap();
        for (new, old) in t.bn.iter().zip(m.bn_states()) {
            assert_ne!(new.running_mean, old.running_mean);
            assert_ne!(new.running_var, old.running_var);
        }
    }

    #[test]
    fn probabilities_are_sigmoid_of_logits() {
        let mut m = Model::build(&UNetConfig::micro(BackboneVariant::DualPath, 1, 4, 7)).unwrap();
        let x = random_input(&[2, 3, 8, 8], 8);
        let logits = m.forward(&x, BnMode::Eval).unwrap().logits;
        let probs = m.predict_probs(&x).unwrap();
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        let mut idx: Vec<usize> = (0..logits.numel()).collect();
        idx.sort_by(|&a, &b| logits.data()[a].total_cmp(&logits.data()[b]));
        for w in idx.windows(2) {
            assert!(probs.data()[w[0]] <= probs.data()[w[1]]);
        }
        let w = m.param("head.w").unwrap().clone();
        m.set_param("head.w", Tensor::zeros(w.shape())).unwrap();
        let probs = m.predict_probs(&x).unwrap();
        assert!(probs.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let m = Model::build(&UNetConfig::micro(BackboneVariant::Residual, 2, 8, 0)).unwrap();
        assert!(m
            .forward(&Tensor::zeros(&[1, 3, 6, 6]), BnMode::Eval)
            .is_err());
        assert!(m
            .forward(&Tensor::zeros(&[1, 1, 8, 8]), BnMode::Eval)
            .is_err());
        assert!(Model::build(&UNetConfig {
            depth: 0,
            ..UNetConfig::default()
        })
        .is_err());
        assert!(Model::build(&UNetConfig {
            base_channels: 2,
            ..UNetConfig::default()
        })
        .is_err());
        let grouped = UNetConfig {
            variant: BackboneVariant::GroupedSe,
            groups: 3,
            ..UNetConfig::default()
        };
        assert!(Model::build(&grouped).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = Model::build(&UNetConfig::micro(BackboneVariant::GroupedSe, 1, 8, 9)).unwrap();
        let meta = serde_json::json!({"k": 5, "selection_seed": 11});
        let bytes = checkpoint_to_bytes(&m, &meta);
        assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
        let (back, meta_back) = checkpoint_from_bytes(&bytes).unwrap();
        assert!(back.bit_eq(&m));
        assert_eq!(meta_back, meta);

        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        assert!(matches!(
            checkpoint_from_bytes(&bad),
            Err(crate::Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 3]),
            Err(crate::Error::Format { .. })
        ));
    }
}
