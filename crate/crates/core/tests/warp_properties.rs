use afcc::scales::{mu_law_center, AudioConfig, InterpolationPoint, WarpFunction};
use proptest::prelude::*;

fn cd() -> AudioConfig {
    AudioConfig::new(44_100.0).unwrap()
}

fn knot() -> impl Strategy<Value = InterpolationPoint> {
    (0.001f64..0.999, 0.001f64..0.999).prop_map(|(x, y)| InterpolationPoint::new(x * 22_050.0, y * 22_050.0))
}

fn all_warps(audio: AudioConfig, p: InterpolationPoint) -> Vec<WarpFunction> {
    vec![
        WarpFunction::linear(audio),
        WarpFunction::mel_htk(audio),
        WarpFunction::mel_slaney(audio),
        WarpFunction::mu_law(8.0, audio).unwrap(),
        WarpFunction::pchp(p, audio).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn endpoints_are_fixed(p in knot()) {
        for w in all_warps(cd(), p) {
            prop_assert!(w.evaluate(0.0).unwrap().abs() < 1e-9);
            prop_assert!((w.evaluate(22_050.0).unwrap() - 22_050.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pchp_is_strictly_increasing(p in knot()) {
        let w = WarpFunction::pchp(p, cd()).unwrap();
        let mut prev = w.evaluate(0.0).unwrap();
        for i in 1..=2_000 {
            let v = w.evaluate(22_050.0 * i as f64 / 2_000.0).unwrap();
            prop_assert!(v > prev, "not increasing at step {i}");
            prev = v;
        }
    }

    #[test]
    fn pchp_interpolates_its_knot(p in knot()) {
        let w = WarpFunction::pchp(p, cd()).unwrap();
        prop_assert!((w.evaluate(p.x).unwrap() - p.y).abs() < 1e-9 * 22_050.0);
    }

    #[test]
    fn normalization_invariance(p in knot(), u in 0.0f64..1.0) {
        let audio = cd();
        for w in all_warps(audio, p) {
            let hz = w.evaluate(u * audio.nyquist_hz()).unwrap() / audio.nyquist_hz();
            prop_assert!((hz - w.evaluate_normalized(u).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_knot_is_identity(t in 0.001f64..0.999, f in 0.0f64..1.0) {
        let p = InterpolationPoint::new(t * 22_050.0, t * 22_050.0);
        let w = WarpFunction::pchp(p, cd()).unwrap();
        let x = f * 22_050.0;
        prop_assert!((w.evaluate(x).unwrap() - x).abs() < 1e-9 * 22_050.0);
    }

    #[test]
    fn mu_law_center_lies_on_curve_and_anti_diagonal(mu in 0.5f64..200.0) {
        let audio = cd();
        let c = mu_law_center(mu, audio).unwrap();
        let w = WarpFunction::mu_law(mu, audio).unwrap();
        prop_assert!((w.evaluate(c.x).unwrap() - c.y).abs() < 1e-9 * 22_050.0);
        prop_assert!((c.x + c.y - 22_050.0).abs() < 1e-9 * 22_050.0);
    }
}

#[test]
fn out_of_square_knots_are_rejected() {
    for (x, y) in [(0.0, 5.0), (22_050.0, 100.0), (-1.0, 10.0), (100.0, 22_051.0)] {
        assert!(WarpFunction::pchp(InterpolationPoint::new(x, y), cd()).is_err(), "({x}, {y})");
    }
}

#[test]
fn mu_law_centers_match_bisection_oracle() {
    // normalized x of the anti-diagonal crossing, from 50-digit bisection
    for (mu, x) in [(1.0, 0.4569995591), (8.0, 0.3719004028), (64.0, 0.2887023660)] {
        let c = mu_law_center(mu, AudioConfig::unit()).unwrap();
        assert!((c.x - x).abs() < 1e-9, "mu = {mu}: {}", c.x);
    }
}
