//! Overlapped-grid division of a square image into patches.
//!
//! Regular window positions step by `h - ov`; a final window clamped to
//! `d - h` is appended whenever the regular stepping stops short, so every
//! pixel is covered and the window count `s` is the realized count.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Layout of the overlapped grid along each axis of a `d x d` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridGeometry {
    /// Image side in pixels.
    pub d: usize,
    /// Patch side in pixels.
    pub h: usize,
    /// Overlap between adjacent regular windows, in pixels.
    pub ov: usize,
    /// Sorted top-left offsets of the windows along one axis.
    pub positions: Vec<usize>,
    /// Realized per-axis window count (`positions.len()`).
    pub s: usize,
}

impl GridGeometry {
    pub fn stride(&self) -> usize {
        self.h - self.ov
    }

    pub fn patch_count(&self) -> usize {
        self.s * self.s
    }
}

/// Computes window positions for image side `d`, patch side `h`, overlap `ov`.
pub fn grid_positions(d: usize, h: usize, ov: usize) -> Result<GridGeometry> {
    if h == 0 || h > d {
        return Err(Error::InvalidArgument(format!("need 0 < h <= d, got h={h}, d={d}")));
    }
    if ov >= h {
        return Err(Error::InvalidArgument(format!(
            "overlap must be smaller than the patch side, got ov={ov}, h={h}"
        )));
    }
    let stride = h - ov;
    let mut positions: Vec<usize> = Vec::new();
    let last = d - h;
    let mut pos = 0;
    loop {
        positions.push(pos);
        if pos + stride > last {
            break;
        }
        pos += stride;
    }
    if *positions.last().unwrap() != last {
        positions.push(last);
    }
    let s = positions.len();
    Ok(GridGeometry { d, h, ov, positions, s })
}

/// Exact crops of the image at every window position, row-major over
/// `(row, col)` window indices.
#[derive(Debug, Clone)]
pub struct PatchSet<T> {
    pub patches: Vec<Tensor<T>>,
    pub geometry: GridGeometry,
    pub index: Vec<(usize, usize)>,
}

pub fn extract_patches<T: Scalar>(image: &Tensor<T>, geometry: &GridGeometry) -> Result<PatchSet<T>> {
    let shape = image.shape();
    let (c, ih, iw) = match shape {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::shape("extract_patches", format!("expected CxHxW, got {:?}", other)))
        }
    };
    if ih != geometry.d || iw != geometry.d {
        return Err(Error::shape(
            "extract_patches",
            format!("image is {}x{}, geometry expects {}x{}", ih, iw, geometry.d, geometry.d),
        ));
    }
    let h = geometry.h;
    let mut patches = Vec::with_capacity(geometry.patch_count());
    let mut index = Vec::with_capacity(geometry.patch_count());
    for (r, &py) in geometry.positions.iter().enumerate() {
        for (cidx, &px) in geometry.positions.iter().enumerate() {
            let mut patch = Tensor::zeros(vec![c, h, h]);
            for ch in 0..c {
                for y in 0..h {
                    let src = &image.data()[(ch * ih + py + y) * iw + px..(ch * ih + py + y) * iw + px + h];
                    patch.data_mut()[(ch * h + y) * h..(ch * h + y) * h + h].copy_from_slice(src);
                }
            }
            patches.push(patch);
            index.push((r, cidx));
        }
    }
    Ok(PatchSet { patches, geometry: geometry.clone(), index })
}
