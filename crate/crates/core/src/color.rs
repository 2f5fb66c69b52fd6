//! Gamma and colour-space conversions.
//!
//! Stored images are assumed to carry a pure power-law gamma of 2.2 (not the
//! piecewise sRGB curve). LAB uses the D65 white of linear sRGB primaries and
//! is rescaled so every channel is O(1): `L / 100`, `a / 128`, `b / 128`.

use crate::error::{Error, Result};
use crate::maps::{Encoding, ImageRgb, GAMMA};

/// Raises every channel to the power `GAMMA`.
pub fn linearize(img: &ImageRgb) -> Result<ImageRgb> {
    if img.encoding() == Encoding::Linear {
        return Err(Error::AlreadyLinear);
    }
    let px = img.pixels().map(|p| p.map(linearize_value));
    ImageRgb::new(px, Encoding::Linear)
}

/// Inverse of [`linearize`]; negative inputs map to zero.
pub fn encode_gamma(img: &ImageRgb) -> Result<ImageRgb> {
    if img.encoding() != Encoding::Linear {
        return Err(Error::WrongEncoding { expected: "linear" });
    }
    let px = img.pixels().map(|p| p.map(encode_value));
    ImageRgb::new(px, Encoding::SrgbGamma)
}

#[inline]
pub fn linearize_value(v: f64) -> f64 {
    v.max(0.0).powf(GAMMA)
}

#[inline]
pub fn encode_value(v: f64) -> f64 {
    v.max(0.0).powf(1.0 / GAMMA)
}

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

// Reference white taken as the image of linear (1, 1, 1), so white is
// exactly achromatic.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const DELTA: f64 = 6.0 / 29.0;

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

#[inline]
fn lab_f_prime(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        1.0 / (3.0 * t.cbrt().powi(2))
    } else {
        1.0 / (3.0 * DELTA * DELTA)
    }
}

fn normalized_xyz(rgb: &[f64; 3]) -> [f64; 3] {
    let mut t = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        t[i] = (row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2]) / WHITE[i];
    }
    t
}

/// Scaled LAB of one linear RGB pixel. Defined (and C¹) for any real input.
#[inline]
pub fn lab_pixel(rgb: &[f64; 3]) -> [f64; 3] {
    let t = normalized_xyz(rgb);
    let (fx, fy, fz) = (lab_f(t[0]), lab_f(t[1]), lab_f(t[2]));
    [
        (116.0 * fy - 16.0) / 100.0,
        500.0 * (fx - fy) / 128.0,
        200.0 * (fy - fz) / 128.0,
    ]
}

/// Jacobian `d lab / d rgb` of [`lab_pixel`], row-major.
pub fn lab_pixel_jacobian(rgb: &[f64; 3]) -> [[f64; 3]; 3] {
    let t = normalized_xyz(rgb);
    // d f(t_i) / d rgb_k
    let mut df = [[0.0; 3]; 3];
    for i in 0..3 {
        let d = lab_f_prime(t[i]) / WHITE[i];
        for k in 0..3 {
            df[i][k] = d * RGB_TO_XYZ[i][k];
        }
    }
    let mut j = [[0.0; 3]; 3];
    for k in 0..3 {
        j[0][k] = 1.16 * df[1][k];
        j[1][k] = 500.0 / 128.0 * (df[0][k] - df[1][k]);
        j[2][k] = 200.0 / 128.0 * (df[1][k] - df[2][k]);
    }
    j
}

/// Scaled LAB of a linear image, returned as a 3-channel float image.
pub fn to_lab(img: &ImageRgb) -> Result<ImageRgb> {
    if img.encoding() != Encoding::Linear {
        return Err(Error::WrongEncoding { expected: "linear" });
    }
    ImageRgb::new(img.pixels().map(lab_pixel), Encoding::Linear)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Grid;
    use proptest::prelude::*;

    fn single(v: [f64; 3], enc: Encoding) -> ImageRgb {
        ImageRgb::new(Grid::filled(1, 1, v), enc).unwrap()
    }

    #[test]
    fn linearize_examples() {
        let img = ImageRgb::new(
            Grid::new(3, 1, vec![[1.0; 3], [0.0; 3], [0.5; 3]]).unwrap(),
            Encoding::SrgbGamma,
        )
        .unwrap();
        let lin = linearize(&img).unwrap();
        let d = lin.pixels().data();
        assert_eq!(d[0], [1.0; 3]);
        assert_eq!(d[1], [0.0; 3]);
        assert!((d[2][0] - 0.217_637).abs() < 1e-6);
        assert!(matches!(linearize(&lin), Err(Error::AlreadyLinear)));
    }

    #[test]
    fn encode_inverts_linearize_example() {
        let img = single([0.217_637_640_824_031; 3], Encoding::Linear);
        let enc = encode_gamma(&img).unwrap();
        assert!((enc.pixels().data()[0][1] - 0.5).abs() < 1e-6);
        assert_eq!(encode_value(1.0), 1.0);
    }

    proptest! {
        #[test]
        fn gamma_round_trip(x in 0.0f64..=1.0) {
            prop_assert!((encode_value(linearize_value(x)) - x).abs() < 1e-6);
            prop_assert!((linearize_value(encode_value(x)) - x).abs() < 1e-6);
        }

        #[test]
        fn achromatic_pixels_have_no_chroma(g in 0.0f64..=1.0) {
            let lab = lab_pixel(&[g, g, g]);
            prop_assert!(lab[1].abs() < 0.01 && lab[2].abs() < 0.01);
        }
    }

    #[test]
    fn lab_white_black_grey() {
        let w = lab_pixel(&[1.0; 3]);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!(w[1].abs() < 0.01 && w[2].abs() < 0.01);
        let b = lab_pixel(&[0.0; 3]);
        assert!(b.iter().all(|v| v.abs() < 1e-12));
        // CIE L* for relative luminance Y = 0.2: 116 * 0.2^(1/3) - 16.
        let reference_l = (116.0 * 0.2f64.powf(1.0 / 3.0) - 16.0) / 100.0;
        let g = lab_pixel(&[0.2; 3]);
        assert!((g[0] - reference_l).abs() < 1e-9);
        assert!((g[0] - 0.518_372).abs() < 1e-5);
        assert!(g[1].abs() < 0.01 && g[2].abs() < 0.01);
    }

    #[test]
    fn lab_jacobian_matches_finite_differences() {
        let pts = [[0.3, 0.5, 0.1], [0.001, 0.002, 0.0005], [-0.05, 0.2, 0.9]];
        let h = 1e-7;
        for p in pts {
            let j = lab_pixel_jacobian(&p);
            for k in 0..3 {
                let mut a = p;
                let mut b = p;
                a[k] += h;
                b[k] -= h;
                let (la, lb) = (lab_pixel(&a), lab_pixel(&b));
                for i in 0..3 {
                    let fd = (la[i] - lb[i]) / (2.0 * h);
                    assert!((fd - j[i][k]).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} {}", j[i][k]);
                }
            }
        }
    }
}
