use proptest::prelude::*;
use ptm_distill::data::ToyConfig;
use ptm_distill::models::{pretrain, ArchitectureSpec, Family, ModelCheckpoint, PretrainSchedule};
use ptm_distill::train::accuracy;
use ptm_distill::Tensor;

#[test]
fn long_snapshot_list_yields_nine_checkpoints_in_order() {
    let data = ToyConfig::blobs(3, 4, 1).generate().unwrap();
    let spec = ArchitectureSpec::preset(Family::Mlp, data.geometry(), 3);
    let epochs = vec![1, 4, 6, 10, 20, 35, 70, 120, 150];
    let mut schedule = PretrainSchedule::with_snapshots(epochs.clone());
    schedule.train.epochs = 150;
    schedule.train.milestones = vec![50, 100];
    let cks = pretrain(&spec, 0, &data, &schedule).unwrap();
    let got: Vec<usize> = cks.iter().map(|c| c.provenance().epoch).collect();
    assert_eq!(got, epochs);
    assert!(cks.iter().all(|c| c.provenance().seed == 0 && c.provenance().source == "blobs-a"));

    assert!(pretrain(&spec, 0, &data, &PretrainSchedule::with_snapshots(vec![0])).is_err());
    let mut short = PretrainSchedule::with_snapshots(vec![5]);
    short.train.epochs = 4;
    assert!(pretrain(&spec, 0, &data, &short).is_err());
}

#[test]
fn default_pretraining_fits_three_class_blobs() {
    let data = ToyConfig::blobs(3, 167, 2).generate().unwrap();
    let spec = ArchitectureSpec::preset(Family::ConvNet, data.geometry(), 3);
    let schedule = PretrainSchedule::default();
    let cks = pretrain(&spec, 1, &data, &schedule).unwrap();
    assert_eq!(cks.len(), 9);
    let accs: Vec<f64> = cks
        .iter()
        .map(|c| accuracy(c, data.images(), data.labels()).unwrap())
        .collect();
    assert!(*accs.last().unwrap() > 0.9, "{accs:?}");
    let monotone = 1 + accs.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(monotone >= 7, "{accs:?}");
}

#[test]
fn every_family_builds_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for fam in Family::ALL {
        let spec = ArchitectureSpec::preset(fam, [1, 16, 16], 4);
        spec.validate().unwrap();
        assert!(spec.param_count() < 200_000);
        let a = ModelCheckpoint::build(&spec, 7).unwrap();
        let b = ModelCheckpoint::build(&spec, 7).unwrap();
        let c = ModelCheckpoint::build(&spec, 8).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
        let path = dir.path().join(format!("{fam}.ckpt"));
        a.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), a.to_bytes());
        assert_eq!(back.spec(), a.spec());
        let out = a.forward(&Tensor::zeros(&[4, 1, 16, 16])).unwrap();
        assert_eq!(out.logits.shape(), &[4, 4]);
        assert_eq!(out.features.shape(), &[4, spec.feature_dim()]);
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let spec = ArchitectureSpec::preset(Family::Mlp, [1, 4, 4], 2);
    let bytes = ModelCheckpoint::build(&spec, 0).unwrap().to_bytes();
    assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xFF;
    assert!(ModelCheckpoint::from_bytes(&bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn features_depend_only_on_spec_and_rows_are_pure(
        fam in prop::sample::select(Family::ALL.to_vec()),
        rows in 1usize..4,
        seed in 0u64..100,
        fill in 0.0f64..1.0,
    ) {
        let spec = ArchitectureSpec::preset(fam, [1, 16, 16], 3);
        let m = ModelCheckpoint::build(&spec, seed).unwrap();
        let mut data: Vec<f64> = (0..256).map(|i| (i as f64 * 0.37 + fill).fract()).collect();
        let single = data.clone();
        for _ in 1..rows {
            data.extend_from_slice(&single);
        }
        let out = m.forward(&Tensor::new(&[rows, 1, 16, 16], data).unwrap()).unwrap();
        prop_assert_eq!(out.features.shape(), &[rows, spec.feature_dim()][..]);
        let phi = spec.feature_dim();
        for r in 1..rows {
            prop_assert_eq!(&out.features.data()[r * phi..(r + 1) * phi], &out.features.data()[..phi]);
        }
    }
}
