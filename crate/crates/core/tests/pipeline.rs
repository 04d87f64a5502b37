use layergauge::metrics::{dice, evaluate, ThicknessPairs};
use layergauge::nnet::{train_segmenter, RcnnModel, SegModel, TrainConfig};
use layergauge::pgm::{mask_to_pgm, pgm_to_mask, read_pgm, write_pgm};
use layergauge::synth::{generate_batch, load_dataset, write_dataset, BatchRanges};
use layergauge::{normalize, orthogonal_report, postprocess, three_line_report, Error};

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_batch(6, &BatchRanges::default(), 3).unwrap();
    let manifest = write_dataset(dir.path(), &samples).unwrap();
    assert_eq!(manifest.len(), 6);
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), 6);
    for (s, l) in samples.iter().zip(&loaded) {
        assert_eq!(l.mask, s.truth_mask);
        assert_eq!(l.image, normalize(&s.image.to_gray8()).unwrap());
    }
}

#[test]
fn truth_masks_measure_close_to_the_generator() {
    let ranges = BatchRanges {
        width: 160,
        height: 96,
        ..BatchRanges::default()
    };
    let samples = generate_batch(20, &ranges, 8).unwrap();
    for s in &samples {
        let mask = pgm_to_mask(&mask_to_pgm(&s.truth_mask)).unwrap();
        let orth = orthogonal_report(&mask, 1.0).unwrap();
        assert!(
            (orth.mean - s.true_thickness).abs() <= 0.5,
            "{} vs {}",
            orth.mean,
            s.true_thickness
        );
        let three = three_line_report(&mask, 1.0).unwrap();
        assert!(three.mean >= orth.mean - 1.0);
    }
}

#[test]
fn short_training_run_segments_and_scores() {
    let samples = generate_batch(16, &BatchRanges::default(), 5).unwrap();
    let data: Vec<_> = samples
        .iter()
        .map(|s| (s.image.clone(), s.truth_mask.clone()))
        .collect();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let (model, curve) = train_segmenter(&data, &cfg).unwrap();
    assert_eq!(curve.len(), 3);
    let reloaded = SegModel::load(&model.save()).unwrap();
    assert_eq!(reloaded, model);

    let raw = model.predict_mask(&samples[0].image).unwrap();
    let pred = postprocess(&raw).unwrap_or(raw);
    let d = dice(&pred, &samples[0].truth_mask).unwrap();
    assert!((0.0..=1.0).contains(&d));

    let report = evaluate(
        samples.iter().map(|s| ("x", &s.truth_mask, &s.truth_mask)),
        Some(ThicknessPairs {
            predicted: &[1.0, 2.0, 3.0],
            reference: &[1.0, 2.0, 3.0],
        }),
    )
    .unwrap();
    assert_eq!(report.mean_dice, 1.0);
    assert_eq!(report.mse, Some(0.0));
}

#[test]
fn weight_files_are_not_interchangeable() {
    let rcnn = RcnnModel::new(1).save();
    assert!(matches!(SegModel::load(&rcnn), Err(Error::ArchitectureMismatch { .. })));
    assert!(RcnnModel::load(&rcnn).is_ok());
    assert!(read_pgm(&write_pgm(&layergauge::Gray8::new(2, 1, vec![0, 255]).unwrap())).is_ok());
}
