use super::*;
use crate::rng::Rng;
use proptest::prelude::*;
use tempfile::tempdir;

#[test]
fn gaussian_id_contract() {
    let ds = gen_gaussian_id(2, 8, 50, 4.0, 0.5, 7).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!(ds.dim(), 8);
    assert_eq!(ds.n_classes(), 2);
    let per_class = ds.labels().iter().filter(|&&l| l == 0).count();
    assert_eq!(per_class, 50);
}

#[test]
fn gaussian_id_is_deterministic() {
    let a = gen_gaussian_id(3, 10, 20, 4.0, 0.5, 7).unwrap();
    let b = gen_gaussian_id(3, 10, 20, 4.0, 0.5, 7).unwrap();
    assert_eq!(a, b);
    let c = gen_gaussian_id(3, 10, 20, 4.0, 0.5, 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn gaussian_id_zero_sigma_collapses_to_means() {
    let ds = gen_gaussian_id(2, 5, 10, 3.0, 0.0, 1).unwrap();
    for class in 0..2 {
        let rows: Vec<&[f64]> = ds
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| ds.features().row(i))
            .collect();
        for r in &rows[1..] {
            assert_eq!(*r, rows[0]);
        }
    }
}

#[test]
fn gaussian_id_rejects_narrow_dims() {
    assert!(matches!(
        gen_gaussian_id(4, 4, 10, 4.0, 0.5, 1),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        gen_gaussian_id(4, 3, 10, 4.0, 0.5, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn gaussian_means_are_separated() {
    let ds = gen_gaussian_id(4, 12, 30, 5.0, 0.0, 3).unwrap();
    // sigma = 0: rows are the means themselves
    let mut means: Vec<&[f64]> = Vec::new();
    for class in 0..4 {
        let i = ds.labels().iter().position(|&l| l == class).unwrap();
        means.push(ds.features().row(i));
    }
    for i in 0..4 {
        for j in (i + 1)..4 {
            let d2: f64 = means[i]
                .iter()
                .zip(means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(d2.sqrt() >= 5.0 - 1e-9);
        }
    }
}

#[test]
fn shell_outliers_clear_id_clusters() {
    let id = gen_gaussian_id(3, 8, 40, 4.0, 0.5, 11).unwrap();
    let mode = OutlierMode::UniformShell {
        r_min: 20.0,
        r_max: 25.0,
    };
    let ood = gen_outliers(8, 200, mode, 12, OutlierRole::Test).unwrap();
    // every outlier is outside every 3-sigma ball around a class mean;
    // with sigma 0.5 and means at radius 4, distance > 4 + 3*0.5 suffices
    for i in 0..ood.len() {
        for j in 0..id.len() {
            let d2: f64 = ood
                .features()
                .row(i)
                .iter()
                .zip(id.features().row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(d2.sqrt() > 1.5);
        }
    }
}

#[test]
fn outliers_single_row_and_determinism() {
    let mode = OutlierMode::ShiftedGaussian {
        offset: 9.0,
        sigma: 1.0,
    };
    let one = gen_outliers(5, 1, mode, 3, OutlierRole::Auxiliary).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one.role(), OutlierRole::Auxiliary);

    let a = gen_outliers(5, 64, mode, 3, OutlierRole::Auxiliary).unwrap();
    let b = gen_outliers(5, 64, mode, 3, OutlierRole::Auxiliary).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_outlier_mode_is_a_config_error() {
    assert!(matches!(
        OutlierMode::parse("banana", 1.0, 1.0, 1.0, 2.0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        OutlierMode::parse("uniform-shell", 0.0, 0.0, 5.0, 2.0),
        Err(Error::Config(_))
    ));
}

#[test]
fn csv_roundtrip_labeled() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("id.csv");
    let ds = gen_gaussian_id(3, 6, 15, 4.0, 0.7, 21).unwrap();
    ds.save_csv(&path).unwrap();
    let loaded = load_csv(&path).unwrap().into_labeled().unwrap();
    assert_eq!(loaded, ds);
}

#[test]
fn csv_roundtrip_outliers() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("ood.csv");
    let mode = OutlierMode::Mixture {
        offset: 8.0,
        sigma: 1.0,
        r_min: 6.0,
        r_max: 9.0,
    };
    let ds = gen_outliers(6, 33, mode, 22, OutlierRole::Test).unwrap();
    ds.save_csv(&path).unwrap();
    let loaded = load_csv(&path)
        .unwrap()
        .into_outliers(OutlierRole::Test)
        .unwrap();
    assert_eq!(loaded, ds);
}

#[test]
fn csv_single_feature_column() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("one.csv");
    let ds = LabeledDataset::new(
        Tensor::matrix(2, 1, vec![0.25, -1.5]).unwrap(),
        vec![0, 1],
        2,
    )
    .unwrap();
    ds.save_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("label,f0\n"));
    let loaded = load_csv(&path).unwrap().into_labeled().unwrap();
    assert_eq!(loaded, ds);
}

#[test]
fn csv_infers_class_count() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("two.csv");
    std::fs::write(&path, "label,f0,f1\n0,1.0,2.0\n1,3.0,4.0\n").unwrap();
    let ds = load_csv(&path).unwrap().into_labeled().unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.dim(), 2);
    assert_eq!(ds.n_classes(), 2);
}

#[test]
fn csv_all_minus_one_is_outliers() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("o.csv");
    std::fs::write(&path, "label,f0\n-1,1.0\n-1,2.0\n").unwrap();
    assert!(matches!(
        load_csv(&path).unwrap(),
        DatasetFile::Outliers(_)
    ));
}

#[test]
fn csv_errors_name_the_line() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bad.csv");

    // inconsistent column count
    std::fs::write(&path, "label,f0,f1\n0,1.0,2.0\n1,3.0,4.0,5.0\n").unwrap();
    let err = load_csv(&path).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");

    // non-integer label
    std::fs::write(&path, "label,f0\n0.5,1.0\n").unwrap();
    let err = load_csv(&path).unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("label"), "{err}");

    // malformed float
    std::fs::write(&path, "label,f0\n0,abc\n").unwrap();
    let err = load_csv(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");

    // mixed labels
    std::fs::write(&path, "label,f0\n0,1.0\n-1,2.0\n").unwrap();
    let err = load_csv(&path).unwrap_err().to_string();
    assert!(err.contains("mixes"), "{err}");
}

#[test]
fn csv_write_to_missing_dir_is_io_error() {
    let ds = gen_gaussian_id(2, 4, 3, 4.0, 0.5, 1).unwrap();
    let err = ds.save_csv(Path::new("/nonexistent-dir-xyz/out.csv"));
    assert!(matches!(err, Err(Error::Io { .. })));
}

#[test]
fn split_per_class_partitions_each_class() {
    let ds = gen_gaussian_id(3, 8, 25, 4.0, 0.5, 30).unwrap();
    let (train, test) = ds.split_per_class(20).unwrap();
    assert_eq!(train.len(), 60);
    assert_eq!(test.len(), 15);
    for c in 0..3 {
        assert_eq!(train.labels().iter().filter(|&&l| l == c).count(), 20);
        assert_eq!(test.labels().iter().filter(|&&l| l == c).count(), 5);
    }
    // no overlap: all 75 rows accounted for exactly once
    assert!(ds.split_per_class(25).is_err());
}

#[test]
fn batch_partition_sizes() {
    let mut rng = Rng::seed_from(1);
    let sizes: Vec<usize> = epoch_batches(10, 4, &mut rng)
        .iter()
        .map(Vec::len)
        .collect();
    assert_eq!(sizes, vec![4, 4, 2]);

    let mut rng = Rng::seed_from(1);
    let sizes: Vec<usize> = epoch_batches(5, 8, &mut rng).iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![5]);
}

#[test]
fn batches_deterministic_given_rng_state() {
    let ds = gen_gaussian_id(2, 5, 20, 4.0, 0.5, 2).unwrap();
    let mut rng_a = Rng::seed_from(9);
    let mut rng_b = Rng::seed_from(9);
    let a = ds.batches(7, &mut rng_a);
    let b = ds.batches(7, &mut rng_b);
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn epoch_batches_cover_dataset_exactly_once(
        n in 1usize..60,
        batch in 1usize..20,
        seed in 0u64..100,
    ) {
        let mut rng = Rng::seed_from(seed);
        let batches = epoch_batches(n, batch, &mut rng);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn csv_roundtrip_is_identity_on_random_floats(
        rows in prop::collection::vec(
            prop::collection::vec(-1e12f64..1e12, 3), 1..8),
        labels_seed in 0u64..50,
    ) {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let mut rng = Rng::seed_from(labels_seed);
        let labels: Vec<usize> = (0..rows.len()).map(|_| rng.index(3)).collect();
        let ds = LabeledDataset::new(
            Tensor::from_rows(&rows).unwrap(), labels, 3).unwrap();
        ds.save_csv(&path).unwrap();
        let loaded = load_csv(&path).unwrap().into_labeled().unwrap();
        prop_assert_eq!(loaded.features().data(), ds.features().data());
        prop_assert_eq!(loaded.labels(), ds.labels());
    }
}
