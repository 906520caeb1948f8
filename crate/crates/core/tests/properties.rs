use proptest::prelude::*;

use vnca::grid::{DensityField, Dims, Grid};
use vnca::losses::{bidirectional_style, moment_distance, style_distance, FeatureSet};
use vnca::nca::StepMask;
use vnca::render::{render_gray, CameraPose};
use vnca::vnv;

fn feature_set(min_rows: usize, max_rows: usize, cols: usize) -> impl Strategy<Value = FeatureSet> {
    (min_rows..=max_rows).prop_flat_map(move |rows| {
        prop::collection::vec(-2.0f32..2.0, rows * cols).prop_map(move |v| FeatureSet::from_vec(rows, cols, v).unwrap())
    })
}

fn small_grid(channels: usize) -> impl Strategy<Value = Grid> {
    (1usize..5, 1usize..5, 1usize..5).prop_flat_map(move |(h, w, d)| {
        prop::collection::vec(0.0f32..2.0, h * w * d * channels)
            .prop_map(move |v| Grid::from_vec(Dims::new(h, w, d), channels, v).unwrap())
    })
}

fn reversed(a: &FeatureSet) -> FeatureSet {
    FeatureSet::from_rows(&(0..a.rows()).rev().map(|r| a.row(r).to_vec()).collect::<Vec<_>>()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn style_distance_ignores_row_order(a in feature_set(1, 12, 4), b in feature_set(1, 12, 4)) {
        let d = style_distance(&a, &b).unwrap();
        prop_assert!((d - style_distance(&reversed(&a), &reversed(&b)).unwrap()).abs() < 1e-5);
        prop_assert!((-1e-6..=2.0 + 1e-6).contains(&d));
        prop_assert!(bidirectional_style(&a, &b).unwrap() >= d - 1e-6);
    }

    #[test]
    fn moment_distance_is_symmetric_and_order_free(a in feature_set(2, 10, 3), b in feature_set(2, 10, 3)) {
        let d = moment_distance(&a, &b).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - moment_distance(&b, &a).unwrap()).abs() < 1e-5);
        prop_assert!((d - moment_distance(&reversed(&a), &b).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn vnv_roundtrip(grid in small_grid(3)) {
        let bytes = vnv::encode(&grid);
        let back = vnv::decode(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn denser_absorption_darkens(grid in small_grid(1), g in 0.05f32..1.0) {
        let density = DensityField::new(grid.clone(), 0).unwrap();
        let dd = Grid::zeros(grid.dims(), 1);
        let pose = CameraPose::front();
        let lo = render_gray(&density, &dd, &pose, g).unwrap().pixels;
        let hi = render_gray(&density, &dd, &pose, g * 2.0).unwrap().pixels;
        for (a, b) in lo.data.iter().zip(&hi.data) {
            prop_assert!(*b <= *a + 1e-6);
        }
    }

    #[test]
    fn mask_rate_matches_fire_rate(seed in any::<u64>(), p in 0.1f32..0.9) {
        let mask = StepMask::sample(Dims::cube(16), p, seed);
        prop_assert!((mask.density() - p as f64).abs() < 0.05);
        prop_assert_eq!(mask, StepMask::sample(Dims::cube(16), p, seed));
    }
}
