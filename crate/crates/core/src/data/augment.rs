//! Random geometric, photometric and elastic augmentation of integer images.
//!
//! All resampling is bilinear with reflect padding at the borders.

use image::{ImageBuffer, Pixel};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticConfig {
    /// Displacement magnitude in pixels on a 128-pixel grid.
    pub alpha: f32,
    /// Smoothing of the displacement field in pixels on a 128-pixel grid.
    pub sigma: f32,
    pub enabled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Translation range as a fraction of the image size, per axis.
    pub shift_frac: (f32, f32),
    pub rotate_deg: (f32, f32),
    /// Zoom factor is drawn from `1 + U(0, scale_max_frac)`.
    pub scale_max_frac: f32,
    /// Multiplicative brightness change range.
    pub brightness_frac: (f32, f32),
    pub elastic: ElasticConfig,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift_frac: (-0.05, 0.05),
            rotate_deg: (-15.0, 15.0),
            scale_max_frac: 0.20,
            brightness_frac: (-0.10, 0.10),
            elastic: ElasticConfig {
                alpha: 34.0,
                sigma: 4.0,
                enabled: true,
            },
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration that leaves every image untouched.
    pub fn identity() -> Self {
        Self {
            shift_frac: (0.0, 0.0),
            rotate_deg: (0.0, 0.0),
            scale_max_frac: 0.0,
            brightness_frac: (0.0, 0.0),
            elastic: ElasticConfig {
                enabled: false,
                ..Self::default().elastic
            },
            seed: 0,
        }
    }
}

/// The parameters drawn for one augmented image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub shift_x_frac: f32,
    pub shift_y_frac: f32,
    pub rotation_deg: f32,
    pub scale: f32,
    pub brightness: f32,
    /// Seed of the displacement field, when elastic deformation ran.
    pub elastic_seed: Option<u64>,
}

fn draw(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> Result<f32> {
    if lo == hi {
        return Ok(lo);
    }
    if !(lo < hi) {
        return Err(Error::Config(format!("invalid augmentation range ({lo}, {hi})")));
    }
    Ok(Uniform::new_inclusive(lo, hi)
        .expect("validated range")
        .sample(rng))
}

/// Draws one parameter set from `cfg`.
pub fn sample_params(cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<AugmentParams> {
    Ok(AugmentParams {
        shift_x_frac: draw(rng, cfg.shift_frac)?,
        shift_y_frac: draw(rng, cfg.shift_frac)?,
        rotation_deg: draw(rng, cfg.rotate_deg)?,
        scale: 1.0 + draw(rng, (0.0, cfg.scale_max_frac))?,
        brightness: draw(rng, cfg.brightness_frac)?,
        elastic_seed: cfg.elastic.enabled.then(|| rng.random()),
    })
}

/// Applies a freshly sampled augmentation to `image`, returning the result
/// (same size) and the parameters used.
pub fn augment<P>(
    image: &ImageBuffer<P, Vec<u8>>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(ImageBuffer<P, Vec<u8>>, AugmentParams)>
where
    P: Pixel<Subpixel = u8>,
{
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Data("cannot augment an image with zero area".into()));
    }
    let params = sample_params(cfg, rng)?;
    Ok((apply(image, cfg, &params), params))
}

/// Applies a known parameter set. Identity parameters reproduce the input
/// exactly.
pub fn apply<P>(
    image: &ImageBuffer<P, Vec<u8>>,
    cfg: &AugmentConfig,
    params: &AugmentParams,
) -> ImageBuffer<P, Vec<u8>>
where
    P: Pixel<Subpixel = u8>,
{
    let (w, h) = (image.width() as usize, image.height() as usize);
    let channels = P::CHANNEL_COUNT as usize;
    let src = image.as_raw();

    let displacement = params.elastic_seed.map(|seed| {
        let grid = w.max(h) as f32 / 128.0;
        elastic_field(w, h, cfg.elastic.alpha * grid, cfg.elastic.sigma * grid, seed)
    });

    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let (tx, ty) = (params.shift_x_frac * w as f32, params.shift_y_frac * h as f32);
    let theta = params.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let inv_scale = 1.0 / params.scale;
    let gain = 1.0 + params.brightness;

    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            // Output pixel -> source position: undo translation, then
            // rotation and zoom about the centre.
            let dx = x as f32 - cx - tx;
            let dy = y as f32 - cy - ty;
            let mut sx = (cos * dx + sin * dy) * inv_scale + cx;
            let mut sy = (-sin * dx + cos * dy) * inv_scale + cy;
            if let Some((fx, fy)) = &displacement {
                sx += fx[y * w + x];
                sy += fy[y * w + x];
            }
            for c in 0..channels {
                let v = bilinear(src, w, h, channels, c, sx, sy) * gain;
                out[(y * w + x) * channels + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageBuffer::from_raw(w as u32, h as u32, out).expect("buffer sized from input")
}

/// Reflects an index into `0..n` (`-1 -> 1`, `n -> n-2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn bilinear(src: &[u8], w: usize, h: usize, channels: usize, c: usize, x: f32, y: f32) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |xx: isize, yy: isize| -> f32 {
        src[(reflect(yy, h) * w + reflect(xx, w)) * channels + c] as f32
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Smoothed random displacement field `(dx, dy)` in pixels.
fn elastic_field(w: usize, h: usize, alpha: f32, sigma: f32, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = crate::rng::child_rng(seed, &[]);
    let unit = Uniform::new_inclusive(-1.0f32, 1.0).expect("valid range");
    let field = |rng: &mut rand_chacha::ChaCha8Rng| {
        let raw: Vec<f32> = (0..w * h).map(|_| unit.sample(rng)).collect();
        let mut smooth = gaussian_blur(&raw, w, h, sigma);
        // Normalize so alpha is the peak displacement regardless of sigma.
        let peak = smooth.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-12);
        smooth.iter_mut().for_each(|v| *v *= alpha / peak);
        smooth
    };
    let fx = field(&mut rng);
    let fy = field(&mut rng);
    (fx, fy)
}

fn gaussian_blur(src: &[f32], w: usize, h: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[y * w + reflect(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::child_rng;
    use image::{GrayImage, Luma, RgbImage};

    fn gradient_image(w: u32, h: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| Luma([((x * 7 + y * 3) % 256) as u8]))
    }

    #[test]
    fn identity_config_is_exact() {
        let img = gradient_image(37, 23);
        let (out, p) = augment(&img, &AugmentConfig::identity(), &mut child_rng(1, &[])).unwrap();
        assert_eq!(out, img);
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.elastic_seed, None);
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = child_rng(5, &[]);
        for _ in 0..10_000 {
            let p = sample_params(&cfg, &mut rng).unwrap();
            assert!((-0.05..=0.05).contains(&p.shift_x_frac));
            assert!((-0.05..=0.05).contains(&p.shift_y_frac));
            assert!((-15.0..=15.0).contains(&p.rotation_deg));
            assert!((1.0..=1.2).contains(&p.scale));
            assert!((-0.10..=0.10).contains(&p.brightness));
        }
    }

    #[test]
    fn same_seed_same_pixels_and_size_preserved() {
        let img = RgbImage::from_fn(40, 30, |x, y| image::Rgb([x as u8 * 5, y as u8 * 7, 90]));
        let cfg = AugmentConfig::default();
        let (a, pa) = augment(&img, &cfg, &mut child_rng(9, &[1])).unwrap();
        let (b, pb) = augment(&img, &cfg, &mut child_rng(9, &[1])).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.dimensions(), img.dimensions());
        let (c, _) = augment(&img, &cfg, &mut child_rng(9, &[2])).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pure_shift_moves_content() {
        let img = GrayImage::from_fn(20, 20, |x, _| Luma([if x == 10 { 255 } else { 0 }]));
        let params = AugmentParams {
            shift_x_frac: 0.1,
            shift_y_frac: 0.0,
            rotation_deg: 0.0,
            scale: 1.0,
            brightness: 0.0,
            elastic_seed: None,
        };
        let out = apply(&img, &AugmentConfig::identity(), &params);
        assert_eq!(out.get_pixel(12, 5)[0], 255);
        assert_eq!(out.get_pixel(10, 5)[0], 0);
    }

    #[test]
    fn zero_area_is_rejected() {
        let img = GrayImage::new(0, 4);
        assert!(augment(&img, &AugmentConfig::default(), &mut child_rng(0, &[])).is_err());
    }

    #[test]
    fn reflect_padding_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }
}
