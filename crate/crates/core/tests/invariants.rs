use std::collections::HashSet;

use proptest::prelude::*;

use mlplatt::calibrators::{
    fit_platt, fit_smoothed_isotonic, CalibrationRecord, Calibrator, ConfCalibPipeline, FittedCalibrator,
    SmoothedIsotonicModel,
};
use mlplatt::datagen::{generate, GeneratorConfig};
use mlplatt::dataio::{dataset_to_string, parse_dataset, split};

fn records(rows: &[(f64, bool, u32)]) -> Vec<CalibrationRecord> {
    rows.iter()
        .enumerate()
        .map(|(i, &(r, click, field))| CalibrationRecord {
            r,
            ctx: vec![],
            field,
            click,
            listing: i as u64 / 4,
        })
        .collect()
}

fn rows() -> impl Strategy<Value = Vec<(f64, bool, u32)>> {
    prop::collection::vec((-4.0..4.0f64, any::<bool>(), 0..3u32), 8..80)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
}

fn small_generator(seed: u64, listings: usize) -> GeneratorConfig {
    GeneratorConfig {
        listings,
        seed,
        ..GeneratorConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_text_round_trips(seed in 0..1000u64, listings in 2..20usize) {
        let data = generate(&small_generator(seed, listings)).unwrap();
        let text = dataset_to_string(&data).unwrap();
        let back = parse_dataset(text.as_bytes()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn generator_is_deterministic(seed in 0..1000u64) {
        let a = generate(&small_generator(seed, 10)).unwrap();
        let b = generate(&small_generator(seed, 10)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn split_partitions_listings(seed in 0..1000u64, listings in 2..40usize, fraction in 0.05..0.95f64) {
        let data = generate(&small_generator(seed, listings)).unwrap();
        let (train, test) = split(&data, fraction, seed).unwrap();
        prop_assert!(!train.listings.is_empty() && !test.listings.is_empty());
        prop_assert_eq!(train.listings.len() + test.listings.len(), listings);
        let ids = |d: &mlplatt::dataio::Dataset| d.listings.iter().map(|l| l.id).collect::<HashSet<_>>();
        prop_assert!(ids(&train).is_disjoint(&ids(&test)));
        let (again, _) = split(&data, fraction, seed).unwrap();
        prop_assert_eq!(again, train);
    }

    #[test]
    fn isotonic_predictions_are_monotone(rows in rows(), bins in 2..12usize) {
        let recs = records(&rows);
        let model = fit_smoothed_isotonic(&recs, bins).unwrap();
        let mut grid: Vec<f64> = (0..=100).map(|k| -5.0 + 0.1 * k as f64).collect();
        grid.extend(recs.iter().map(|r| r.r));
        grid.sort_by(f64::total_cmp);
        let preds: Vec<f64> = grid.iter().map(|&r| model.apply(r)).collect();
        prop_assert!(preds.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(preds.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn platt_and_confcalib_predict_probabilities(rows in rows()) {
        let recs = records(&rows);
        let platt = fit_platt(&recs).unwrap().predict_all(&recs).unwrap();
        prop_assert!(platt.iter().all(|p| *p > 0.0 && *p < 1.0));
        let conf = ConfCalibPipeline::fit(&recs, 0.95).unwrap().predict_all(&recs).unwrap();
        prop_assert!(conf.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn fitted_calibrators_survive_serialisation(rows in rows()) {
        let recs = records(&rows);
        let models = [
            FittedCalibrator::Platt(fit_platt(&recs).unwrap()),
            FittedCalibrator::SmoothedIsotonic(fit_smoothed_isotonic(&recs, 4).unwrap()),
            FittedCalibrator::ConfCalib(ConfCalibPipeline::fit(&recs, 0.9).unwrap()),
        ];
        for m in models {
            let back = FittedCalibrator::from_bytes(&m.to_bytes()).unwrap();
            prop_assert_eq!(back.predict_all(&recs).unwrap(), m.predict_all(&recs).unwrap());
            prop_assert_eq!(back, m);
        }
    }
}

#[test]
fn isotonic_rejects_decreasing_knots() {
    assert!(SmoothedIsotonicModel::from_knots(vec![(0.0, 0.6), (1.0, 0.4)]).is_err());
    assert!(SmoothedIsotonicModel::from_knots(vec![(1.0, 0.4), (0.0, 0.6)]).is_err());
    assert!(SmoothedIsotonicModel::from_knots(vec![(0.0, 0.2), (1.0, 0.4)]).is_ok());
}

#[test]
fn truncated_model_bytes_are_rejected() {
    let recs = records(&[(0.0, true, 0), (1.0, false, 1), (2.0, true, 0), (-1.0, false, 2)]);
    let bytes = FittedCalibrator::Platt(fit_platt(&recs).unwrap()).to_bytes();
    for cut in [0, 1, bytes.len() / 2, bytes.len() - 1] {
        assert!(FittedCalibrator::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
    }
}
