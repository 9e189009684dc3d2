//! sRGB ↔ CIELAB conversion, normalized Lab coordinates, and the image raster
//! shared by every other module.
//!
//! Conversions run in `f64`; images store `f32`. The white point is D65 (2°
//! observer), taken as the row sums of the sRGB→XYZ matrix so that every
//! neutral sRGB triple lands exactly on the Lab `a = b = 0` axis.

use std::path::Path;
use std::sync::LazyLock;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ColorError {
    #[error("unsupported conversion from {from:?} to {to:?}")]
    UnsupportedConversion { from: ColorSpace, to: ColorSpace },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("image i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("png codec: {0}")]
    Codec(#[from] image::ImageError),
}

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

static XYZ_TO_SRGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&SRGB_TO_XYZ));

static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| {
    let m = &SRGB_TO_XYZ;
    [
        m[0][0] + m[0][1] + m[0][2],
        m[1][0] + m[1][1] + m[1][2],
        m[2][0] + m[2][1] + m[2][2],
    ]
});

const DELTA: f64 = 6.0 / 29.0;

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv = 1.0 / det;
    [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv,
        ],
    ]
}

fn mul3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn clamp_finite(v: f64, lo: f64, hi: f64) -> f64 {
    if v.is_nan() {
        lo
    } else {
        v.clamp(lo, hi)
    }
}

/// sRGB electro-optical transfer function (encoded → linear).
pub fn srgb_decode(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Inverse of [`srgb_decode`].
pub fn srgb_encode(l: f64) -> f64 {
    if l <= 0.003_130_8 {
        l * 12.92
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

fn srgb_encode_deriv(l: f64) -> f64 {
    if l <= 0.003_130_8 {
        12.92
    } else {
        1.055 / 2.4 * l.powf(1.0 / 2.4 - 1.0)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(u: f64) -> f64 {
    if u > DELTA {
        u * u * u
    } else {
        3.0 * DELTA * DELTA * (u - 4.0 / 29.0)
    }
}

fn lab_f_inv_deriv(u: f64) -> f64 {
    if u > DELTA {
        3.0 * u * u
    } else {
        3.0 * DELTA * DELTA
    }
}

/// Nonlinear sRGB pixel, channels in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RgbPixel {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl RgbPixel {
    /// Clamps each channel into `[0, 1]`; NaN becomes 0.
    pub fn new(r: f64, g: f64, b: f64) -> Self {
        Self {
            r: clamp_finite(r, 0.0, 1.0),
            g: clamp_finite(g, 0.0, 1.0),
            b: clamp_finite(b, 0.0, 1.0),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// CIELAB pixel. `l` in `[0, 100]`, `a` and `b` in `[-128, 128]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabPixel {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

pub const LAB_AB_LIMIT: f64 = 128.0;

impl LabPixel {
    pub fn new(l: f64, a: f64, b: f64) -> Self {
        Self {
            l: clamp_finite(l, 0.0, 100.0),
            a: clamp_finite(a, -LAB_AB_LIMIT, LAB_AB_LIMIT),
            b: clamp_finite(b, -LAB_AB_LIMIT, LAB_AB_LIMIT),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.l, self.a, self.b]
    }

    pub fn distance(&self, other: &LabPixel) -> f64 {
        let dl = self.l - other.l;
        let da = self.a - other.a;
        let db = self.b - other.b;
        (dl * dl + da * da + db * db).sqrt()
    }
}

pub fn srgb_to_lab(p: RgbPixel) -> LabPixel {
    let lin = [srgb_decode(p.r), srgb_decode(p.g), srgb_decode(p.b)];
    let xyz = mul3(&SRGB_TO_XYZ, lin);
    let w = *WHITE;
    let fx = lab_f(xyz[0] / w[0]);
    let fy = lab_f(xyz[1] / w[1]);
    let fz = lab_f(xyz[2] / w[2]);
    LabPixel::new(116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}

/// Lab → sRGB. Out-of-gamut colors are clamped in linear RGB before encoding.
pub fn lab_to_srgb(p: LabPixel) -> RgbPixel {
    lab_to_srgb_with_jacobian(p).0
}

/// Lab → sRGB plus the 3×3 Jacobian `∂(r,g,b)/∂(l,a,b)`.
///
/// Rows of channels clamped in linear RGB are zero.
pub fn lab_to_srgb_with_jacobian(p: LabPixel) -> (RgbPixel, [[f64; 3]; 3]) {
    let w = *WHITE;
    let fy = (p.l + 16.0) / 116.0;
    let fx = fy + p.a / 500.0;
    let fz = fy - p.b / 200.0;
    let xyz = [w[0] * lab_f_inv(fx), w[1] * lab_f_inv(fy), w[2] * lab_f_inv(fz)];

    // d(xyz)/d(lab): X depends on (l, a), Y on l, Z on (l, b).
    let dx = w[0] * lab_f_inv_deriv(fx);
    let dy = w[1] * lab_f_inv_deriv(fy);
    let dz = w[2] * lab_f_inv_deriv(fz);
    let dxyz = [
        [dx / 116.0, dx / 500.0, 0.0],
        [dy / 116.0, 0.0, 0.0],
        [dz / 116.0, 0.0, -dz / 200.0],
    ];

    let m = &*XYZ_TO_SRGB;
    let lin = mul3(m, xyz);
    let mut out = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    for c in 0..3 {
        let l = lin[c];
        if l <= 0.0 || l >= 1.0 {
            out[c] = srgb_encode(l.clamp(0.0, 1.0));
            continue;
        }
        out[c] = srgb_encode(l);
        let de = srgb_encode_deriv(l);
        for k in 0..3 {
            let dlin = m[c][0] * dxyz[0][k] + m[c][1] * dxyz[1][k] + m[c][2] * dxyz[2][k];
            jac[c][k] = de * dlin;
        }
    }
    (RgbPixel::from_array(out), jac)
}

/// Maps Lab onto the unit cube: `L/100`, `(a+128)/256`, `(b+128)/256`.
pub fn lab_normalize(p: LabPixel) -> [f64; 3] {
    [
        p.l / 100.0,
        (p.a + LAB_AB_LIMIT) / (2.0 * LAB_AB_LIMIT),
        (p.b + LAB_AB_LIMIT) / (2.0 * LAB_AB_LIMIT),
    ]
}

pub fn lab_denormalize(u: [f64; 3]) -> LabPixel {
    LabPixel::new(
        u[0] * 100.0,
        u[1] * (2.0 * LAB_AB_LIMIT) - LAB_AB_LIMIT,
        u[2] * (2.0 * LAB_AB_LIMIT) - LAB_AB_LIMIT,
    )
}

/// Per-axis scale of [`lab_denormalize`], used when back-propagating through it.
pub const LAB_DENORM_SCALE: [f64; 3] = [100.0, 2.0 * LAB_AB_LIMIT, 2.0 * LAB_AB_LIMIT];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ColorSpace {
    Srgb,
    LabNormalized,
}

/// Row-major `H×W×3` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    space: ColorSpace,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, space: ColorSpace, data: Vec<f32>) -> Result<Self, ColorError> {
        if width == 0 || height == 0 {
            return Err(ColorError::InvalidImage(format!("empty dimensions {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(ColorError::InvalidImage(format!(
                "expected {} values for {width}x{height}, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ColorError::InvalidImage("non-finite sample".into()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ColorError::InvalidImage("sample outside [0, 1]".into()));
        }
        Ok(Self { width, height, space, data })
    }

    /// Builds an image from values that may not yet be range-valid. Values are
    /// clamped into `[0, 1]` and NaN becomes 0; dimensions are still checked.
    pub fn from_clamped(width: usize, height: usize, space: ColorSpace, mut data: Vec<f32>) -> Result<Self, ColorError> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(width, height, space, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self, ColorError> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, ColorSpace::Srgb, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn map_pixels(&self, space: ColorSpace, f: impl Fn([f64; 3]) -> [f64; 3]) -> ImageBuffer {
        let data = self
            .data
            .chunks_exact(3)
            .flat_map(|c| {
                let o = f([c[0] as f64, c[1] as f64, c[2] as f64]);
                o.map(|v| v as f32)
            })
            .collect();
        ImageBuffer::from_clamped(self.width, self.height, space, data).expect("dimensions preserved")
    }

    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> Option<f64> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Some(sum / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &ImageBuffer) -> Option<f64> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (*a as f64 - *b as f64).abs())
                .fold(0.0, f64::max),
        )
    }
}

pub fn convert_image(img: &ImageBuffer, target: ColorSpace) -> Result<ImageBuffer, ColorError> {
    match (img.space, target) {
        (ColorSpace::Srgb, ColorSpace::LabNormalized) => Ok(img.map_pixels(target, |p| {
            lab_normalize(srgb_to_lab(RgbPixel::from_array(p)))
        })),
        (ColorSpace::LabNormalized, ColorSpace::Srgb) => Ok(img.map_pixels(target, |p| {
            lab_to_srgb(lab_denormalize(p)).to_array()
        })),
        (from, to) => Err(ColorError::UnsupportedConversion { from, to }),
    }
}

/// Mean Lab value over an sRGB image.
pub fn mean_lab(img: &ImageBuffer) -> LabPixel {
    let mut acc = [0.0f64; 3];
    for p in img.pixels() {
        let lab = srgb_to_lab(RgbPixel::new(p[0] as f64, p[1] as f64, p[2] as f64));
        acc[0] += lab.l;
        acc[1] += lab.a;
        acc[2] += lab.b;
    }
    let n = img.pixel_count() as f64;
    LabPixel::new(acc[0] / n, acc[1] / n, acc[2] / n)
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer, ColorError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    from_rgb8(&img)
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageBuffer, ColorError> {
    let bytes = std::fs::read(path)?;
    decode_png(&bytes)
}

fn from_rgb8(img: &image::RgbImage) -> Result<ImageBuffer, ColorError> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    ImageBuffer::new(w as usize, h as usize, ColorSpace::Srgb, data)
}

pub fn to_rgb8(img: &ImageBuffer) -> Result<image::RgbImage, ColorError> {
    if img.space != ColorSpace::Srgb {
        return Err(ColorError::UnsupportedConversion { from: img.space, to: ColorSpace::Srgb });
    }
    let raw: Vec<u8> = img.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    Ok(image::RgbImage::from_raw(img.width as u32, img.height as u32, raw).expect("buffer size matches"))
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>, ColorError> {
    let rgb = to_rgb8(img)?;
    let mut out = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), ColorError> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_and_black_points() {
        let w = srgb_to_lab(RgbPixel::new(1.0, 1.0, 1.0));
        assert!((w.l - 100.0).abs() < 1e-9);
        assert!(w.a.abs() < 1e-3 && w.b.abs() < 1e-3);
        let k = srgb_to_lab(RgbPixel::new(0.0, 0.0, 0.0));
        assert_eq!(k.to_array(), [0.0, 0.0, 0.0]);

        let back = lab_to_srgb(LabPixel::new(100.0, 0.0, 0.0));
        for c in back.to_array() {
            assert!((c - 1.0).abs() < 1e-4);
        }
        assert_eq!(lab_to_srgb(LabPixel::new(0.0, 0.0, 0.0)).to_array(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn mid_gray_matches_reference() {
        // Reference value from the textbook formulas evaluated with 50-digit
        // arithmetic (mpmath): decode(0.5) = 0.2140411404822324, L* = 116·Y^(1/3) − 16.
        let g = srgb_to_lab(RgbPixel::new(0.5, 0.5, 0.5));
        assert!((g.l - 53.388_964_741_114_306).abs() < 1e-9, "{}", g.l);
        assert!(g.a.abs() < 1e-9 && g.b.abs() < 1e-9);
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(lab_normalize(LabPixel::new(100.0, 0.0, 0.0)), [1.0, 0.5, 0.5]);
        assert_eq!(lab_normalize(LabPixel::new(0.0, -128.0, -128.0)), [0.0, 0.0, 0.0]);
        for i in 0..=20 {
            for j in 0..=16 {
                let p = LabPixel::new(i as f64 * 5.0, j as f64 * 16.0 - 128.0, 128.0 - j as f64 * 16.0);
                assert!(lab_denormalize(lab_normalize(p)).distance(&p) < 1e-12);
            }
        }
    }

    #[test]
    fn gray_lightness_is_strictly_increasing() {
        let mut prev = -1.0;
        for i in 0..=255 {
            let v = i as f64 / 255.0;
            let lab = srgb_to_lab(RgbPixel::new(v, v, v));
            assert!(lab.l > prev);
            prev = lab.l;
        }
    }

    #[test]
    fn convert_image_white_and_errors() {
        let img = ImageBuffer::filled(2, 2, [1.0, 1.0, 1.0]).unwrap();
        let lab = convert_image(&img, ColorSpace::LabNormalized).unwrap();
        assert_eq!(lab.space(), ColorSpace::LabNormalized);
        for p in lab.pixels() {
            assert!((p[0] - 1.0).abs() < 1e-4 && (p[1] - 0.5).abs() < 1e-4 && (p[2] - 0.5).abs() < 1e-4);
        }
        assert!(matches!(
            convert_image(&img, ColorSpace::Srgb),
            Err(ColorError::UnsupportedConversion { .. })
        ));
        assert!(matches!(
            ImageBuffer::new(0, 3, ColorSpace::Srgb, vec![]),
            Err(ColorError::InvalidImage(_))
        ));
    }

    #[test]
    fn random_image_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..8 * 8 * 3).map(|_| rng.random::<f32>()).collect();
        let img = ImageBuffer::new(8, 8, ColorSpace::Srgb, data).unwrap();
        let back = convert_image(&convert_image(&img, ColorSpace::LabNormalized).unwrap(), ColorSpace::Srgb).unwrap();
        assert!(img.max_abs_diff(&back).unwrap() < 1e-4);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cases = [[50.0, 10.0, -20.0], [70.0, -30.0, 40.0], [30.0, 5.0, 5.0]];
        for c in cases {
            let (_, jac) = lab_to_srgb_with_jacobian(LabPixel::new(c[0], c[1], c[2]));
            for k in 0..3 {
                let h = 1e-5;
                let mut p = c;
                let mut m = c;
                p[k] += h;
                m[k] -= h;
                let fp = lab_to_srgb(LabPixel::new(p[0], p[1], p[2])).to_array();
                let fm = lab_to_srgb(LabPixel::new(m[0], m[1], m[2])).to_array();
                for ch in 0..3 {
                    let fd = (fp[ch] - fm[ch]) / (2.0 * h);
                    assert!((fd - jac[ch][k]).abs() < 1e-6 * (1.0 + fd.abs()), "{c:?} {k} {ch}");
                }
            }
        }
    }

    #[test]
    fn png_round_trip_is_lossless_on_8bit_values() {
        let data: Vec<f32> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as f32 / 255.0).collect();
        let img = ImageBuffer::new(4, 3, ColorSpace::Srgb, data).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(img, back);
    }

    proptest! {
        #[test]
        fn round_trip_in_gamut(r in 0.0f64..=1.0, g in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let x = RgbPixel::new(r, g, b);
            let y = lab_to_srgb(srgb_to_lab(x));
            prop_assert!((x.r - y.r).abs() < 1e-4);
            prop_assert!((x.g - y.g).abs() < 1e-4);
            prop_assert!((x.b - y.b).abs() < 1e-4);
        }

        #[test]
        fn neutral_axis(v in 0.0f64..=1.0) {
            let lab = srgb_to_lab(RgbPixel::new(v, v, v));
            prop_assert!(lab.a.abs() < 1e-3 && lab.b.abs() < 1e-3);
        }

        #[test]
        fn conversions_are_total(l in -1e6f64..1e6, a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let rgb = lab_to_srgb(LabPixel::new(l, a, b));
            for c in rgb.to_array() {
                prop_assert!(c.is_finite() && (0.0..=1.0).contains(&c));
            }
            let lab = srgb_to_lab(RgbPixel::new(l, a, b));
            prop_assert!((0.0..=100.0).contains(&lab.l));
            prop_assert!(lab.a.abs() <= 128.0 && lab.b.abs() <= 128.0);
        }
    }
}
