//! Label map, probability map, their fusion, and the pixel-level weighting
//! matrix that turns a preprocessed image into a weighted lesion map.

use crate::error::{Error, Result};
use crate::nn::network::{Feat, Network};
use crate::tensor::{Scalar, Tensor};
use crate::tiling::{GridGeometry, PatchSet};

/// The per-patch maps and the expanded weighting matrix of one image.
///
/// `fused = (labels + 1) * probabilities` elementwise, so entries lie in
/// (0, 4]; the weighting matrix averages the fused values of every window
/// covering a pixel and therefore stays in (0, 4] too.
#[derive(Debug, Clone)]
pub struct LesionMaps<T> {
    /// Per-patch argmax class, row-major `s x s`, values 0..=3.
    pub labels: Vec<u8>,
    /// Per-patch max softmax probability, `s x s`.
    pub probabilities: Tensor<T>,
    /// `(L + 1) .* P`, `s x s`.
    pub fused: Tensor<T>,
    /// Pixel weighting matrix, `d x d`.
    pub weighting: Tensor<T>,
    pub geometry: GridGeometry,
}

/// An image multiplied by its weighting matrix. Values are real and
/// deliberately unclamped; only display renderings rescale.
#[derive(Debug, Clone)]
pub struct WeightedImage<T> {
    pub pixels: Tensor<T>,
    pub source_id: String,
}

/// Runs every patch through the local network in infer mode and collects the
/// argmax class and its probability. Ties break toward the lower class index.
pub fn predict_maps<T: Scalar>(
    network: &Network<T>,
    patch_set: &PatchSet<T>,
    batch_size: usize,
) -> Result<(Vec<u8>, Tensor<T>)> {
    let classes = match network.output_feat() {
        Feat::Flat { f } => f,
        other => {
            return Err(Error::shape(
                "predict_maps",
                format!("local network must end in a flat softmax, got {:?}", other),
            ))
        }
    };
    if classes != 4 {
        return Err(Error::shape(
            "predict_maps",
            format!("local network must output 4 classes, got {classes}"),
        ));
    }
    let s = patch_set.geometry.s;
    if patch_set.patches.len() != s * s {
        return Err(Error::shape(
            "predict_maps",
            format!("patch count {} does not match geometry {}x{}", patch_set.patches.len(), s, s),
        ));
    }
    let batch_size = batch_size.max(1);
    let mut labels = vec![0u8; s * s];
    let mut probs = Tensor::zeros(vec![s, s]);
    let mut cursor = 0usize;
    while cursor < patch_set.patches.len() {
        let end = (cursor + batch_size).min(patch_set.patches.len());
        let batch = stack_patches(&patch_set.patches[cursor..end])?;
        let out = network.forward_infer(&batch)?;
        for (row, i) in out.data().chunks(classes).zip(cursor..end) {
            let (mut best, mut best_p) = (0usize, row[0]);
            for (k, &p) in row.iter().enumerate().skip(1) {
                if p > best_p {
                    best = k;
                    best_p = p;
                }
            }
            labels[i] = best as u8;
            probs.data_mut()[i] = best_p;
        }
        cursor = end;
    }
    Ok((labels, probs))
}

/// Stacks equally-shaped `C x h x h` patches into one `N x C x h x h` batch.
pub fn stack_patches<T: Scalar>(patches: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = patches
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack an empty patch list".into()))?;
    let mut shape = vec![patches.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * patches.len());
    for p in patches {
        if p.shape() != first.shape() {
            return Err(Error::shape(
                "stack_patches",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

/// `fused[r,c] = (labels[r,c] + 1) * probs[r,c]`.
pub fn fuse<T: Scalar>(labels: &[u8], probs: &Tensor<T>) -> Result<Tensor<T>> {
    if labels.len() != probs.len() {
        return Err(Error::shape(
            "fuse",
            format!("{} labels vs {} probabilities", labels.len(), probs.len()),
        ));
    }
    let mut fused = probs.clone();
    for (f, &l) in fused.data_mut().iter_mut().zip(labels) {
        *f = T::of(l as f64 + 1.0) * *f;
    }
    Ok(fused)
}

/// Broadcasts each fused entry over its `h x h` window footprint and averages
/// where windows overlap (any number of covering windows, corners included).
pub fn expand_and_tile<T: Scalar>(fused: &Tensor<T>, geometry: &GridGeometry) -> Result<Tensor<T>> {
    let (rows, cols) = fused.dims2("expand_and_tile")?;
    if rows != geometry.s || cols != geometry.s {
        return Err(Error::shape(
            "expand_and_tile",
            format!("fused map is {}x{}, geometry expects {0}x{0}", rows, geometry.s),
        ));
    }
    let d = geometry.d;
    let h = geometry.h;
    let mut sum = vec![T::zero(); d * d];
    let mut count = vec![0u32; d * d];
    for (r, &py) in geometry.positions.iter().enumerate() {
        for (c, &px) in geometry.positions.iter().enumerate() {
            let v = fused.data()[r * cols + c];
            for y in py..py + h {
                let row = y * d;
                for x in px..px + h {
                    sum[row + x] += v;
                    count[row + x] += 1;
                }
            }
        }
    }
    let mut weighting = Tensor::zeros(vec![d, d]);
    for (i, w) in weighting.data_mut().iter_mut().enumerate() {
        debug_assert!(count[i] > 0, "tiling guarantees full coverage");
        *w = sum[i] / T::of(count[i] as f64);
    }
    Ok(weighting)
}

/// Per-channel elementwise product of the image with the weighting matrix.
/// Rejects non-positive weights: fused values are strictly positive by
/// construction, so a zero or negative entry means a corrupted matrix.
pub fn apply_weight<T: Scalar>(
    image: &Tensor<T>,
    weighting: &Tensor<T>,
    source_id: impl Into<String>,
) -> Result<WeightedImage<T>> {
    let (c, ih, iw) = match image.shape() {
        &[c, h, w] => (c, h, w),
        other => return Err(Error::shape("apply_weight", format!("expected CxHxW image, got {:?}", other))),
    };
    let (wh, ww) = weighting.dims2("apply_weight")?;
    if wh != ih || ww != iw {
        return Err(Error::shape(
            "apply_weight",
            format!("image {}x{} vs weighting {}x{}", ih, iw, wh, ww),
        ));
    }
    if let Some(bad) = weighting.data().iter().find(|v| **v <= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "weighting matrix must be strictly positive, found {bad}"
        )));
    }
    let mut pixels = image.clone();
    for ch in 0..c {
        let plane = &mut pixels.data_mut()[ch * ih * iw..(ch + 1) * ih * iw];
        for (p, w) in plane.iter_mut().zip(weighting.data()) {
            *p *= *w;
        }
    }
    Ok(WeightedImage { pixels, source_id: source_id.into() })
}

/// Full map construction for one image: predict, fuse, expand.
pub fn build_maps<T: Scalar>(
    network: &Network<T>,
    patch_set: &PatchSet<T>,
    batch_size: usize,
) -> Result<LesionMaps<T>> {
    let (labels, probabilities) = predict_maps(network, patch_set, batch_size)?;
    let fused = fuse(&labels, &probabilities)?;
    let weighting = expand_and_tile(&fused, &patch_set.geometry)?;
    Ok(LesionMaps { labels, probabilities, fused, weighting, geometry: patch_set.geometry.clone() })
}
