use ava_core::raster::{GeoTransform, Raster, RasterGrid, DEFAULT_NODATA};
use ava_core::terrain::{par_brute, par_field, release_mask, slope_deg};
use proptest::prelude::*;

const SPACING: f64 = 10.0;

fn dem(w: usize, h: usize, z: Vec<f32>) -> Raster {
    let g = RasterGrid::new(w, h, GeoTransform::north_up(0.0, 0.0, SPACING), DEFAULT_NODATA).unwrap();
    Raster::new(g, 1, z).unwrap()
}

fn dem_strategy() -> impl Strategy<Value = Raster> {
    (3usize..10, 3usize..10)
        .prop_flat_map(|(w, h)| prop::collection::vec(0.0f32..200.0, w * h).prop_map(move |z| dem(w, h, z)))
}

/// Central differences with replicated edges, written out independently.
fn horn_oracle(d: &Raster, r: usize, c: usize) -> f64 {
    let (w, h) = (d.width() as isize, d.height() as isize);
    let z = |dr: isize, dc: isize| {
        let rr = (r as isize + dr).clamp(0, h - 1) as usize;
        let cc = (c as isize + dc).clamp(0, w - 1) as usize;
        d.get(rr, cc) as f64
    };
    let gx = (z(-1, 1) + 2.0 * z(0, 1) + z(1, 1) - z(-1, -1) - 2.0 * z(0, -1) - z(1, -1)) / (8.0 * SPACING);
    let gy = (z(1, -1) + 2.0 * z(1, 0) + z(1, 1) - z(-1, -1) - 2.0 * z(-1, 0) - z(-1, 1)) / (8.0 * SPACING);
    (gx * gx + gy * gy).sqrt().atan().to_degrees()
}

proptest! {
    #[test]
    fn slope_matches_horn_oracle(d in dem_strategy()) {
        let s = slope_deg(&d, SPACING).unwrap();
        for r in 0..d.height() {
            for c in 0..d.width() {
                prop_assert!((s.raster().get(r, c) as f64 - horn_oracle(&d, r, c)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn plane_slope_is_exact(gx in -3.0f64..3.0, gy in -3.0f64..3.0) {
        let z = (0..36).map(|i| (100.0 + gx * SPACING * (i % 6) as f64 + gy * SPACING * (i / 6) as f64) as f32).collect();
        let d = dem(6, 6, z);
        let s = slope_deg(&d, SPACING).unwrap();
        let expected = (gx * gx + gy * gy).sqrt().atan().to_degrees();
        // Interior pixels only: edge replication halves the border gradient.
        for r in 1..5 {
            for c in 1..5 {
                prop_assert!((s.raster().get(r, c) as f64 - expected).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn par_field_matches_brute_force_with_full_radius(d in dem_strategy()) {
        let slope = slope_deg(&d, SPACING).unwrap();
        let release = release_mask(&slope, (10.0, 80.0)).unwrap();
        let radius = SPACING * ((d.width() * d.width() + d.height() * d.height()) as f64).sqrt();
        let par = par_field(&d, &release, radius).unwrap();
        for r in 0..d.height() {
            for c in 0..d.width() {
                let brute = par_brute(&d, &release, (r, c)).unwrap();
                prop_assert_eq!(par.raster.get(r, c), brute as f32, "({}, {})", r, c);
            }
        }
    }

    #[test]
    fn par_is_monotone_in_radius(d in dem_strategy(), r1 in 10.0f64..60.0, extra in 0.0f64..60.0) {
        let slope = slope_deg(&d, SPACING).unwrap();
        let release = release_mask(&slope, (5.0, 85.0)).unwrap();
        let small = par_field(&d, &release, r1).unwrap();
        let large = par_field(&d, &release, r1 + extra).unwrap();
        for (a, b) in small.raster.data().iter().zip(large.raster.data()) {
            prop_assert!(a <= b);
            prop_assert!((0.0..90.0).contains(a));
        }
    }
}
