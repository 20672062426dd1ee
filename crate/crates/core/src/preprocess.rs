//! Fundus preprocessing: contrast enhancement, circular region-of-interest
//! extraction, and aspect-preserving pad-and-resize.
//!
//! Enhancement computes `I = alpha*I_raw + beta*(G(theta) * I_raw) + gamma`
//! per channel, clamped to [0, 255]. The Gaussian blur is mask-normalized:
//! weights falling outside the ROI are renormalized over the covered part, so
//! a constant region stays constant right up to the rim instead of bleeding
//! into the black surround.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameters of the enhancement step.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Gaussian scale in pixels.
    pub theta: f64,
    /// Truncation radius of the kernel; 0 selects `ceil(3*theta)`.
    pub kernel_radius: usize,
    /// Brightness threshold for ROI extraction, on the 0-255 scale.
    pub roi_threshold: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            alpha: 4.0,
            beta: -4.0,
            gamma: 128.0,
            theta: 10.0,
            kernel_radius: 0,
            roi_threshold: 15.0,
        }
    }
}

impl PreprocessParams {
    pub fn effective_radius(&self) -> usize {
        if self.kernel_radius > 0 {
            self.kernel_radius
        } else {
            (3.0 * self.theta).ceil() as usize
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta <= 0.0 {
            return Err(Error::InvalidArgument("theta must be positive".into()));
        }
        if self.effective_radius() < 1 {
            return Err(Error::InvalidArgument("kernel radius must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageMeta {
    pub source_id: String,
    pub original_h: usize,
    pub original_w: usize,
}

/// A color fundus image with its region-of-interest mask.
#[derive(Debug, Clone)]
pub struct FundusImage<T> {
    /// Channel-major pixels, values in [0, 255].
    pub pixels: Tensor<T>,
    /// Row-major H*W mask of the fundus disk.
    pub roi_mask: Vec<bool>,
    pub meta: ImageMeta,
}

impl<T: Scalar> FundusImage<T> {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }

    /// Builds an image with the mask derived by [`extract_roi`].
    pub fn with_auto_roi(pixels: Tensor<T>, params: &PreprocessParams, meta: ImageMeta) -> Result<Self> {
        let roi_mask = extract_roi(&pixels, params.roi_threshold)?;
        Ok(FundusImage { pixels, roi_mask, meta })
    }

    pub fn roi_area(&self) -> usize {
        self.roi_mask.iter().filter(|&&m| m).count()
    }
}

/// Normalized 2-d Gaussian kernel of side `2*radius + 1`.
pub fn gaussian_kernel<T: Scalar>(theta: f64, radius: usize) -> Result<Tensor<T>> {
    if theta <= 0.0 {
        return Err(Error::InvalidArgument("theta must be positive".into()));
    }
    let side = 2 * radius + 1;
    let mut data = vec![0.0f64; side * side];
    let mut sum = 0.0;
    for y in 0..side {
        for x in 0..side {
            let dy = y as f64 - radius as f64;
            let dx = x as f64 - radius as f64;
            let v = (-(dx * dx + dy * dy) / (2.0 * theta * theta)).exp();
            data[y * side + x] = v;
            sum += v;
        }
    }
    let t = Tensor::new(vec![side, side], data.iter().map(|&v| T::of(v / sum)).collect())?;
    Ok(t)
}

/// Normalized 1-d Gaussian, the separable factor of [`gaussian_kernel`].
fn gaussian_kernel_1d(theta: f64, radius: usize) -> Vec<f64> {
    let side = 2 * radius + 1;
    let mut k = vec![0.0f64; side];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - radius as f64;
        *v = (-(d * d) / (2.0 * theta * theta)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable blur of `plane * mask` and of `mask`, with replicate-edge
/// handling at image borders. Returns the mask-normalized blur.
fn masked_gaussian_blur(
    plane: &[f64],
    mask: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    radius: usize,
) -> Vec<f64> {
    let blur_1d_rows = |src: &[f64], dst: &mut [f64]| {
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let xi = x as isize + t as isize - radius as isize;
                    let xi = xi.clamp(0, w as isize - 1) as usize;
                    acc += kv * row[xi];
                }
                dst[y * w + x] = acc;
            }
        }
    };
    let blur_1d_cols = |src: &[f64], dst: &mut [f64]| {
        for x in 0..w {
            for y in 0..h {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let yi = y as isize + t as isize - radius as isize;
                    let yi = yi.clamp(0, h as isize - 1) as usize;
                    acc += kv * src[yi * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    };

    let masked: Vec<f64> = plane.iter().zip(mask).map(|(p, m)| p * m).collect();
    let mut tmp = vec![0.0; h * w];
    let mut num = vec![0.0; h * w];
    blur_1d_rows(&masked, &mut tmp);
    blur_1d_cols(&tmp, &mut num);
    let mut den = vec![0.0; h * w];
    blur_1d_rows(mask, &mut tmp);
    blur_1d_cols(&tmp, &mut den);

    num.iter()
        .zip(&den)
        .map(|(n, d)| if *d > 1e-12 { n / d } else { 0.0 })
        .collect()
}

/// Contrast enhancement. Pixels outside the ROI are set to 0; inside, the
/// result is clamped to [0, 255].
pub fn enhance<T: Scalar>(raw: &FundusImage<T>, params: &PreprocessParams) -> Result<FundusImage<T>> {
    params.validate()?;
    let (c, h, w) = raw.dims();
    if raw.roi_mask.len() != h * w {
        return Err(Error::shape("enhance", format!("mask len {} vs {}x{}", raw.roi_mask.len(), h, w)));
    }
    if raw.roi_mask.iter().all(|&m| !m) {
        return Err(Error::InvalidImage("empty ROI: input does not contain a fundus disk".into()));
    }
    let radius = params.effective_radius();
    let kernel = gaussian_kernel_1d(params.theta, radius);
    let mask_f: Vec<f64> = raw.roi_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();

    let mut out = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        let plane: Vec<f64> =
            raw.pixels.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let blur = masked_gaussian_blur(&plane, &mask_f, h, w, &kernel, radius);
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for i in 0..h * w {
            if raw.roi_mask[i] {
                let v = params.alpha * plane[i] + params.beta * blur[i] + params.gamma;
                dst[i] = T::of(v.clamp(0.0, 255.0));
            }
        }
    }
    Ok(FundusImage { pixels: out, roi_mask: raw.roi_mask.clone(), meta: raw.meta.clone() })
}

/// Brightness-threshold ROI: the largest 4-connected component of pixels
/// whose channel mean exceeds `threshold`. Errors if the component covers
/// less than 1% of the image.
pub fn extract_roi<T: Scalar>(pixels: &Tensor<T>, threshold: f64) -> Result<Vec<bool>> {
    let shape = pixels.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut bright = vec![false; h * w];
    for i in 0..h * w {
        let mut sum = 0.0;
        for ch in 0..c {
            sum += pixels.data()[ch * h * w + i].as_f64();
        }
        bright[i] = sum / c as f64 > threshold;
    }

    // largest 4-connected component by BFS
    let mut visited = vec![false; h * w];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..h * w {
        if !bright[start] || visited[start] {
            continue;
        }
        let mut component = Vec::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            component.push(i);
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if bright[j] && !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        if component.len() > best.len() {
            best = component;
        }
    }

    if best.len() * 100 < h * w {
        return Err(Error::InvalidImage(format!(
            "ROI covers {} of {} pixels (< 1%), not a fundus image",
            best.len(),
            h * w
        )));
    }
    let mut mask = vec![false; h * w];
    for i in best {
        mask[i] = true;
    }
    Ok(mask)
}

/// Bounding box of the mask, returned as `(y0, x0, height, width)`.
pub fn mask_bounding_box(mask: &[bool], h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                any = true;
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    any.then(|| (y0, x0, y1 - y0 + 1, x1 - x0 + 1))
}

/// Crops the image to the ROI bounding box (content only; padding back to a
/// square happens in [`pad_and_resize`]).
pub fn crop_to_roi<T: Scalar>(image: &FundusImage<T>) -> Result<FundusImage<T>> {
    let (c, h, w) = image.dims();
    let (y0, x0, bh, bw) = mask_bounding_box(&image.roi_mask, h, w)
        .ok_or_else(|| Error::InvalidImage("empty ROI".into()))?;
    let mut pixels = Tensor::zeros(vec![c, bh, bw]);
    let mut mask = vec![false; bh * bw];
    for ch in 0..c {
        for y in 0..bh {
            for x in 0..bw {
                pixels.data_mut()[(ch * bh + y) * bw + x] =
                    image.pixels.data()[(ch * h + y + y0) * w + x + x0];
            }
        }
    }
    for y in 0..bh {
        for x in 0..bw {
            mask[y * bw + x] = image.roi_mask[(y + y0) * w + x + x0];
        }
    }
    Ok(FundusImage { pixels, roi_mask: mask, meta: image.meta.clone() })
}

fn bilinear_resize_plane(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let mut dst = vec![0.0; th * tw];
    let sy_scale = h as f64 / th as f64;
    let sx_scale = w as f64 / tw as f64;
    for oy in 0..th {
        let sy = ((oy as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..tw {
            let sx = ((ox as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let v = src[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                + src[y0 * w + x1] * (1.0 - fy) * fx
                + src[y1 * w + x0] * fy * (1.0 - fx)
                + src[y1 * w + x1] * fy * fx;
            dst[oy * tw + ox] = v;
        }
    }
    dst
}

/// Pads the shorter side with zeros to a centered square, then resizes
/// bilinearly to `target x target`. Content aspect ratio is preserved.
pub fn pad_and_resize<T: Scalar>(image: &FundusImage<T>, target: usize) -> Result<FundusImage<T>> {
    if target < 16 {
        return Err(Error::InvalidArgument(format!("target {target} too small (min 16)")));
    }
    let (c, h, w) = image.dims();
    let side = h.max(w);
    let oy = (side - h) / 2;
    let ox = (side - w) / 2;

    // identity short-circuit keeps "already square at target" exact
    if h == w && h == target {
        return Ok(image.clone());
    }

    let mut out = Tensor::zeros(vec![c, target, target]);
    for ch in 0..c {
        let mut padded = vec![0.0f64; side * side];
        for y in 0..h {
            for x in 0..w {
                padded[(y + oy) * side + x + ox] = image.pixels.data()[(ch * h + y) * w + x].as_f64();
            }
        }
        let resized = bilinear_resize_plane(&padded, side, side, target, target);
        let dst = &mut out.data_mut()[ch * target * target..(ch + 1) * target * target];
        for (d, v) in dst.iter_mut().zip(&resized) {
            *d = T::of(*v);
        }
    }

    let mut padded_mask = vec![0.0f64; side * side];
    for y in 0..h {
        for x in 0..w {
            if image.roi_mask[y * w + x] {
                padded_mask[(y + oy) * side + x + ox] = 1.0;
            }
        }
    }
    let resized_mask = bilinear_resize_plane(&padded_mask, side, side, target, target);
    let roi_mask = resized_mask.iter().map(|&v| v >= 0.5).collect();

    Ok(FundusImage { pixels: out, roi_mask, meta: image.meta.clone() })
}

/// Full preparation for the pipeline: ROI extraction, crop to the ROI
/// bounding box, pad-and-resize to the working size, then Eq-style
/// enhancement at that size.
pub fn prepare<T: Scalar>(
    pixels: Tensor<T>,
    params: &PreprocessParams,
    working_size: usize,
    meta: ImageMeta,
) -> Result<FundusImage<T>> {
    let raw = FundusImage::with_auto_roi(pixels, params, meta)?;
    let cropped = crop_to_roi(&raw)?;
    let resized = pad_and_resize(&cropped, working_size)?;
    enhance(&resized, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_image(side: usize, radius: f64, value: f64) -> Tensor<f64> {
        let c = (side as f64 - 1.0) / 2.0;
        Tensor::from_fn(vec![3, side, side], |i| {
            let p = i % (side * side);
            let (y, x) = ((p / side) as f64, (p % side) as f64);
            let r2 = (y - c) * (y - c) + (x - c) * (x - c);
            if r2 <= radius * radius {
                value
            } else {
                0.0
            }
        })
    }

    #[test]
    fn kernel_sums_to_one_and_is_symmetric() {
        for &(theta, radius) in &[(1.0, 3usize), (10.0, 30), (2.5, 7)] {
            let k: Tensor<f64> = gaussian_kernel(theta, radius).unwrap();
            let sum: f64 = k.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "theta {theta} sum {sum}");
            let side = 2 * radius + 1;
            for y in 0..side {
                for x in 0..side {
                    let v = k.data()[y * side + x];
                    assert_eq!(v, k.data()[(side - 1 - y) * side + x]);
                    assert_eq!(v, k.data()[y * side + (side - 1 - x)]);
                    assert_eq!(v, k.data()[x * side + y]);
                }
            }
        }
    }

    #[test]
    fn kernel_center_matches_direct_sum() {
        let (theta, radius) = (10.0, 30usize);
        let k: Tensor<f64> = gaussian_kernel(theta, radius).unwrap();
        let mut z = 0.0;
        for y in -(radius as i64)..=radius as i64 {
            for x in -(radius as i64)..=radius as i64 {
                z += (-((x * x + y * y) as f64) / (2.0 * theta * theta)).exp();
            }
        }
        let side = 2 * radius + 1;
        let center = k.data()[radius * side + radius];
        assert!((center - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn constant_roi_maps_to_gamma() {
        // alpha*c + beta*(blur of constant == c) + gamma = 128 for alpha=-beta
        let params = PreprocessParams { theta: 3.0, ..Default::default() };
        let pixels = disk_image(64, 24.0, 150.0);
        let img = FundusImage::with_auto_roi(pixels, &params, ImageMeta::default()).unwrap();
        let out = enhance(&img, &params).unwrap();
        for i in 0..64 * 64 {
            if out.roi_mask[i] {
                for ch in 0..3 {
                    let v = out.pixels.data()[ch * 64 * 64 + i];
                    assert!((v - 128.0).abs() <= 1.0, "pixel {i} channel {ch}: {v}");
                }
            }
        }
    }

    #[test]
    fn identity_parameters_pass_through_roi() {
        let params = PreprocessParams {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            theta: 2.0,
            ..Default::default()
        };
        let pixels = disk_image(48, 18.0, 90.0);
        let img = FundusImage::with_auto_roi(pixels.clone(), &params, ImageMeta::default()).unwrap();
        let out = enhance(&img, &params).unwrap();
        for i in 0..48 * 48 {
            for ch in 0..3 {
                let idx = ch * 48 * 48 + i;
                if img.roi_mask[i] {
                    assert_eq!(out.pixels.data()[idx], pixels.data()[idx]);
                } else {
                    assert_eq!(out.pixels.data()[idx], 0.0);
                }
            }
        }
    }

    #[test]
    fn impulse_response_matches_direct_convolution() {
        // bright impulse inside a mid-gray ROI; compare the blur term at the
        // center against a direct double-sum with the same ROI normalization
        let side = 41;
        let params = PreprocessParams { theta: 2.0, ..Default::default() };
        let radius = params.effective_radius();
        let mut pixels = disk_image(side, 19.0, 40.0);
        let center = side / 2;
        for ch in 0..3 {
            pixels.data_mut()[(ch * side + center) * side + center] = 240.0;
        }
        let img = FundusImage::with_auto_roi(pixels.clone(), &params, ImageMeta::default()).unwrap();
        let out = enhance(&img, &params).unwrap();

        let k2: Tensor<f64> = gaussian_kernel(params.theta, radius).unwrap();
        let kside = 2 * radius + 1;
        let mut num = 0.0;
        let mut den = 0.0;
        for ky in 0..kside {
            for kx in 0..kside {
                let y = center as isize + ky as isize - radius as isize;
                let x = center as isize + kx as isize - radius as isize;
                if y < 0 || y >= side as isize || x < 0 || x >= side as isize {
                    continue;
                }
                let i = y as usize * side + x as usize;
                if img.roi_mask[i] {
                    num += k2.data()[ky * kside + kx] * pixels.data()[i];
                    den += k2.data()[ky * kside + kx];
                }
            }
        }
        let expected = (params.alpha * 240.0 + params.beta * (num / den) + params.gamma)
            .clamp(0.0, 255.0);
        let got = out.pixels.data()[center * side + center];
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn all_black_image_has_no_roi() {
        let pixels = Tensor::<f64>::zeros(vec![3, 32, 32]);
        assert!(extract_roi(&pixels, 15.0).is_err());
    }

    #[test]
    fn full_brightness_covers_everything() {
        let pixels = Tensor::<f64>::full(vec![3, 16, 16], 255.0);
        let mask = extract_roi(&pixels, 15.0).unwrap();
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn disk_area_close_to_analytic() {
        let r = 30.0;
        let pixels = disk_image(100, r, 200.0);
        let mask = extract_roi(&pixels, 15.0).unwrap();
        let area = mask.iter().filter(|&&m| m).count() as f64;
        let expected = std::f64::consts::PI * r * r;
        assert!((area - expected).abs() / expected < 0.05, "area {area} vs {expected}");
    }

    #[test]
    fn square_at_target_is_identity() {
        let pixels = disk_image(64, 20.0, 120.0);
        let img = FundusImage::with_auto_roi(pixels.clone(), &PreprocessParams::default(), ImageMeta::default()).unwrap();
        let out = pad_and_resize(&img, 64).unwrap();
        assert_eq!(out.pixels.data(), pixels.data());
    }

    #[test]
    fn rectangular_input_gets_centered_zero_bands() {
        // 8x16 content in a 16x16 square: rows 0..4 and 12..16 are zero bands
        let pixels = Tensor::<f64>::full(vec![1, 8, 16], 100.0);
        let img = FundusImage { pixels, roi_mask: vec![true; 128], meta: ImageMeta::default() };
        let out = pad_and_resize(&img, 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let v = out.pixels.data()[y * 16 + x];
                if (4..12).contains(&y) {
                    assert_eq!(v, 100.0, "y {y} x {x}");
                } else {
                    assert_eq!(v, 0.0, "y {y} x {x}");
                }
            }
        }
    }

    #[test]
    fn downscale_of_constant_is_constant() {
        let pixels = Tensor::<f64>::full(vec![2, 60, 60], 73.0);
        let img = FundusImage { pixels, roi_mask: vec![true; 3600], meta: ImageMeta::default() };
        let out = pad_and_resize(&img, 30).unwrap();
        for &v in out.pixels.data() {
            assert!((v - 73.0).abs() < 1e-9);
        }
    }

    #[test]
    fn enhance_is_shift_equivariant_in_the_interior() {
        // compare enhanced values at interior points of a texture, before and
        // after shifting the texture by (3, 5); margins exceed kernel radius
        let side = 48;
        let params = PreprocessParams { theta: 1.5, kernel_radius: 5, ..Default::default() };
        let tex = |y: usize, x: usize| 60.0 + 40.0 * (((y * 13 + x * 7) % 11) as f64) / 11.0;
        let make = |dy: usize, dx: usize| {
            let pixels = Tensor::<f64>::from_fn(vec![1, side, side], |i| {
                let (y, x) = (i / side, i % side);
                tex(y + dy, x + dx)
            });
            let img = FundusImage { pixels, roi_mask: vec![true; side * side], meta: ImageMeta::default() };
            enhance(&img, &params).unwrap()
        };
        let a = make(0, 0);
        let b = make(3, 5);
        let margin = 10;
        for y in margin..side - margin {
            for x in margin..side - margin {
                let va = a.pixels.data()[(y + 3) * side + (x + 5)];
                let vb = b.pixels.data()[y * side + x];
                assert!((va - vb).abs() < 1e-9, "({y},{x}): {va} vs {vb}");
            }
        }
    }

    #[test]
    fn resize_preserves_disk_circularity() {
        let pixels = disk_image(90, 40.0, 180.0);
        let img = FundusImage::with_auto_roi(pixels, &PreprocessParams::default(), ImageMeta::default()).unwrap();
        let out = pad_and_resize(&img, 45).unwrap();
        let (bh, bw) = {
            let (_, _, h, w) = mask_bounding_box(&out.roi_mask, 45, 45).unwrap();
            (h as f64, w as f64)
        };
        let ratio = bh.max(bw) / bh.min(bw);
        assert!(ratio < 1.01, "axis ratio {ratio}");
    }

    #[test]
    fn output_stays_in_display_range() {
        let params = PreprocessParams::default();
        let pixels = disk_image(64, 26.0, 250.0);
        let img = FundusImage::with_auto_roi(pixels, &params, ImageMeta::default()).unwrap();
        let out = enhance(&img, &params).unwrap();
        assert!(out.pixels.all_finite());
        for &v in out.pixels.data() {
            assert!((0.0..=255.0).contains(&v));
        }
    }
}
