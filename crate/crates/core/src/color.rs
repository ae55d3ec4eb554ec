//! HSV conversions and circular hue arithmetic.

/// `h` in degrees, `s`/`v` in `[0, 1]`; channels rounded to 8 bits.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// `(hue degrees, saturation, value)`; hue is 0 for achromatic input.
pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

/// Shortest angular distance in degrees, in `[0, 180]`.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0, 0, 255]);
        assert_eq!(rgb_to_hsv([0, 0, 255]).0, 240.0);
        assert_eq!(rgb_to_hsv([90, 90, 90]).1, 0.0);
    }

    proptest! {
        #[test]
        fn hue_round_trip(h in 0.0f64..360.0) {
            let (h2, _, _) = rgb_to_hsv(hsv_to_rgb(h, 0.85, 0.9));
            prop_assert!(hue_distance(h, h2) < 1.0);
        }

        #[test]
        fn distance_symmetric_and_bounded(a in -720.0f64..720.0, b in -720.0f64..720.0) {
            let d = hue_distance(a, b);
            prop_assert!((0.0..=180.0).contains(&d));
            prop_assert!((d - hue_distance(b, a)).abs() < 1e-9);
        }
    }
}
