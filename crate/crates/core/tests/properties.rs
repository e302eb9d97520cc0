use noiseinv_core::mask::{coverage, decode_mask, downsample_mask, encode_mask, sample_mask, MaskConfig, MaskFamily};
use noiseinv_core::nets::{decode_checkpoint, encode_checkpoint, ModelBundle, ParamSet};
use noiseinv_core::num::{gauss_draw, RngStream, Tensor};
use noiseinv_core::pipelines::reblend;
use proptest::prelude::*;

fn family() -> impl Strategy<Value = MaskFamily> {
    prop::sample::select(MaskFamily::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_masks_respect_coverage_and_pair_up(seed in any::<u64>(), fam in family()) {
        let cfg = MaskConfig::default();
        let pair = sample_mask(16, 1, fam, &cfg, &mut RngStream::new(seed, "mask")).unwrap();
        let c = coverage(&pair.full);
        prop_assert!(c >= cfg.coverage_min && c <= cfg.coverage_max, "{} coverage {c}", fam.name());
        prop_assert!(pair.full.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(&pair.latent, &downsample_mask(&pair.full, 1).unwrap());
        prop_assert_eq!(decode_mask(&encode_mask(&pair.full).unwrap()).unwrap(), pair.full);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(
        bits in prop::collection::vec(any::<u32>(), 1..64),
        step in 0u64..(1 << 48),
        hash in any::<u64>(),
        beta in 1e-6f64..0.5,
    ) {
        let mut set = ParamSet::new();
        set.push("w", Tensor::new(&[bits.len()], bits.iter().map(|&b| f32::from_bits(b)).collect()).unwrap()).unwrap();
        let bundle = ModelBundle { config_hash: hash, schedule_betas: vec![beta, beta * 2.0], step, inverter: Some(set), ..Default::default() };
        let back = decode_checkpoint(&encode_checkpoint(&bundle).unwrap(), Some(hash)).unwrap();
        let got: Vec<u32> = back.inverter.as_ref().unwrap().get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(&back.schedule_betas, &bundle.schedule_betas);
        prop_assert!(decode_checkpoint(&encode_checkpoint(&bundle).unwrap(), Some(hash ^ 1)).is_err());
    }

    #[test]
    fn reblend_selects_per_element(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = RngStream::new(seed, "reblend");
        let z: Tensor<f32> = gauss_draw(&mut rng, &[n, 1, 4, 4]);
        let e: Tensor<f32> = gauss_draw(&mut rng, &[n, 1, 4, 4]);
        let m = Tensor::new(&[n, 1, 4, 4], (0..n * 16).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect()).unwrap();
        let r = reblend(&z, &e, &m).unwrap();
        for i in 0..r.len() {
            let want = if m.data()[i] == 1.0 { e.data()[i] } else { z.data()[i] };
            prop_assert_eq!(r.data()[i].to_bits(), want.to_bits());
        }
    }

    #[test]
    fn streams_are_pure_functions_of_seed_and_label(seed in any::<u64>(), i in 0u64..1000) {
        let a = RngStream::new(seed, "x").derive_index(i);
        let b = RngStream::new(seed, "x").derive_index(i);
        prop_assert_eq!(a.normal_at(3).to_bits(), b.normal_at(3).to_bits());
        prop_assert_ne!(a.u64_at(0), RngStream::new(seed, "y").derive_index(i).u64_at(0));
    }
}
