//! Deterministic image processing: grayscale conversion, Scharr gradient
//! magnitude, and the log-compressed min-max normalized structural target
//! used as the self-supervised regression label.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("zero-sized image"));
        }
        if data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "rgb data length {} != 3*{}*{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        RgbImage::new(h, w, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("dimensions validated at construction");
        buf.save(path)?;
        Ok(())
    }
}

/// Single-channel float map with values expected in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "map data length {} != {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(GrayMap {
            height,
            width,
            data,
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Export as 8-bit grayscale PNG (`value * 255`, rounded).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("length checked at construction");
        buf.save(path)?;
        Ok(())
    }
}

/// Nonnegative Scharr gradient magnitude, same size as the input.
pub type GradientMap = GrayMap;

/// Structural pseudo-target in `[0, 1]`: min 0 and max 1 on any non-constant
/// input, all zeros when the source gradient vanishes everywhere.
pub type StructTarget = GrayMap;

/// ITU-R BT.601 luma, scaled to `[0, 1]`.
pub fn to_grayscale(img: &RgbImage) -> GrayMap {
    let data = (0..img.height * img.width)
        .map(|i| {
            let r = img.data()[3 * i] as f64;
            let g = img.data()[3 * i + 1] as f64;
            let b = img.data()[3 * i + 2] as f64;
            (0.299 * r + 0.587 * g + 0.114 * b) / 255.0
        })
        .collect();
    GrayMap::new(img.height, img.width, data).expect("same pixel count")
}

/// Gradient magnitude `sqrt((g * Kx)^2 + (g * Ky)^2)` under replicate
/// padding, with `Kx = [[-3,0,3],[-10,0,10],[-3,0,3]]` and `Ky` its
/// transpose.
pub fn scharr_magnitude(g: &GrayMap) -> Result<GradientMap> {
    let (h, w) = (g.height, g.width);
    if h < 3 || w < 3 {
        return Err(Error::invalid(format!(
            "scharr_magnitude requires at least 3x3, got {h}x{w}"
        )));
    }
    let clamp_at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        g.data[yy * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            let p = |dy: isize, dx: isize| clamp_at(yi + dy, xi + dx);
            // symmetric taps grouped as differences so constant regions
            // cancel exactly instead of leaving rounding dust
            let gx = 3.0 * (p(-1, 1) - p(-1, -1))
                + 10.0 * (p(0, 1) - p(0, -1))
                + 3.0 * (p(1, 1) - p(1, -1));
            let gy = 3.0 * (p(1, -1) - p(-1, -1))
                + 10.0 * (p(1, 0) - p(-1, 0))
                + 3.0 * (p(1, 1) - p(-1, 1));
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    GradientMap::new(h, w, out)
}

/// `Norm(log(1 + G))` with per-image min-max normalization to `[0, 1]`;
/// a constant (zero-gradient) input maps to all zeros.
pub fn make_struct_target(grad: &GradientMap) -> StructTarget {
    let logged: Vec<f64> = grad.data.iter().map(|&v| (1.0 + v).ln()).collect();
    let lo = logged.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logged.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data = if hi > lo {
        logged.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; logged.len()]
    };
    StructTarget::new(grad.height, grad.width, data).expect("same pixel count")
}

/// Grayscale image straight to structural target.
pub fn struct_target_of_image(img: &RgbImage) -> Result<StructTarget> {
    Ok(make_struct_target(&scharr_magnitude(&to_grayscale(img))?))
}

/// Non-overlapping mean pooling by an integer factor.
pub fn downsample_avg(m: &GrayMap, factor: usize) -> Result<GrayMap> {
    if factor == 0 {
        return Err(Error::invalid("downsample factor must be >= 1"));
    }
    if m.height % factor != 0 || m.width % factor != 0 {
        return Err(Error::invalid(format!(
            "dimensions {}x{} not divisible by factor {}",
            m.height, m.width, factor
        )));
    }
    if factor == 1 {
        return Ok(m.clone());
    }
    let (ho, wo) = (m.height / factor, m.width / factor);
    let mut out = vec![0.0; ho * wo];
    let norm = 1.0 / (factor * factor) as f64;
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += m.data[(y * factor + dy) * m.width + x * factor + dx];
                }
            }
            out[y * wo + x] = acc * norm;
        }
    }
    GrayMap::new(ho, wo, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(h: usize, w: usize, rgb: [u8; 3]) -> RgbImage {
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..h * w {
            data.extend_from_slice(&rgb);
        }
        RgbImage::new(h, w, data).unwrap()
    }

    #[test]
    fn grayscale_luma_values() {
        let white = to_grayscale(&solid(2, 2, [255, 255, 255]));
        assert!((white.at(0, 0) - 1.0).abs() < 1e-12);
        let black = to_grayscale(&solid(2, 2, [0, 0, 0]));
        assert_eq!(black.at(1, 1), 0.0);
        let red = to_grayscale(&solid(2, 2, [255, 0, 0]));
        assert!((red.at(0, 0) - 0.299).abs() < 1e-12);
    }

    #[test]
    fn zero_sized_image_rejected() {
        assert!(RgbImage::new(0, 4, vec![]).is_err());
    }

    #[test]
    fn scharr_constant_image_is_zero() {
        let g = GrayMap::new(5, 5, vec![0.42; 25]).unwrap();
        let m = scharr_magnitude(&g).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scharr_vertical_step_edge_magnitude() {
        // step 0 -> 1 between columns 3 and 4; Kx sums to 16 on either side
        let (h, w) = (6, 8);
        let data: Vec<f64> = (0..h * w)
            .map(|i| if i % w >= 4 { 1.0 } else { 0.0 })
            .collect();
        let g = GrayMap::new(h, w, data).unwrap();
        let m = scharr_magnitude(&g).unwrap();
        for y in 1..h - 1 {
            assert!((m.at(y, 3) - 16.0).abs() < 1e-12, "col 3: {}", m.at(y, 3));
            assert!((m.at(y, 4) - 16.0).abs() < 1e-12, "col 4: {}", m.at(y, 4));
            assert_eq!(m.at(y, 1), 0.0);
        }
    }

    #[test]
    fn scharr_transpose_consistency() {
        // Kx/Ky symmetry: transposing the input transposes the output
        let mut data = vec![0.0; 49];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 977) as f64 / 977.0;
        }
        let g = GrayMap::new(7, 7, data.clone()).unwrap();
        let m = scharr_magnitude(&g).unwrap();
        let mut tdata = vec![0.0; 49];
        for y in 0..7 {
            for x in 0..7 {
                tdata[x * 7 + y] = data[y * 7 + x];
            }
        }
        let t = GrayMap::new(7, 7, tdata).unwrap();
        let mt = scharr_magnitude(&t).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                assert!((m.at(y, x) - mt.at(x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn struct_target_bounds_and_degenerate_case() {
        let flat = GradientMap::new(3, 3, vec![7.0; 9]).unwrap();
        let t = make_struct_target(&flat);
        assert!(t.data().iter().all(|&v| v == 0.0));

        let ramp = GradientMap::new(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let t = make_struct_target(&ramp);
        let lo = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
        // monotone: rank order preserved
        for i in 1..6 {
            assert!(t.data()[i] > t.data()[i - 1]);
        }
    }

    #[test]
    fn downsample_mean_and_conservation() {
        let m = GrayMap::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let d = downsample_avg(&m, 2).unwrap();
        assert_eq!(d.data(), &[0.5]);

        let m = GrayMap::new(4, 4, (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
        let d1 = downsample_avg(&m, 1).unwrap();
        assert_eq!(d1.data(), m.data());
        let d2 = downsample_avg(&m, 2).unwrap();
        let mean_in: f64 = m.data().iter().sum::<f64>() / 16.0;
        let mean_out: f64 = d2.data().iter().sum::<f64>() / 4.0;
        assert!((mean_in - mean_out).abs() < 1e-12);

        assert!(downsample_avg(&m, 3).is_err());
    }
}
