//! Small image utilities over `H x W x C` tensors: bilinear sampling with
//! border replication, resizing, crop-and-resize windows and integer shifts.

use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Result, Tensor};

/// Bilinear sample at continuous `(row, col)` (pixel centers at integers),
/// replicating the border. Writes `C` values into `out`.
pub fn sample_bilinear(img: &Tensor, row: f32, col: f32, out: &mut [f32]) {
    let s = img.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let r = row.clamp(0.0, (h - 1) as f32);
    let q = col.clamp(0.0, (w - 1) as f32);
    let (r0, fr) = crate::numerics::cell_along(r, h);
    let (q0, fq) = crate::numerics::cell_along(q, w);
    let r1 = (r0 + 1).min(h - 1);
    let q1 = (q0 + 1).min(w - 1);
    let d = img.data();
    let wts = crate::numerics::bilinear4(fr, fq);
    let sites = [(r0, q0), (r0, q1), (r1, q0), (r1, q1)];
    out[..c].fill(0.0);
    for (&(y, x), &wt) in sites.iter().zip(&wts) {
        if wt == 0.0 {
            continue;
        }
        let base = (y * w + x) * c;
        for k in 0..c {
            out[k] += wt * d[base + k];
        }
    }
}

/// Axis-aligned window of a frame mapped onto a fixed-size patch.
///
/// The window is centered at `(center_row, center_col)` with extent
/// `side_h x side_w` frame pixels, resampled to `out_h x out_w`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub center_row: f32,
    pub center_col: f32,
    pub side_h: f32,
    pub side_w: f32,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// Frame coordinate of patch pixel center `(u, v)`.
    pub fn to_frame(&self, u: f32, v: f32) -> (f32, f32) {
        let sy = self.side_h / self.out_h as f32;
        let sx = self.side_w / self.out_w as f32;
        (
            self.center_row - self.side_h / 2.0 + (u + 0.5) * sy,
            self.center_col - self.side_w / 2.0 + (v + 0.5) * sx,
        )
    }

    /// Patch coordinate of frame point `(row, col)`.
    pub fn to_patch(&self, row: f32, col: f32) -> (f32, f32) {
        let sy = self.side_h / self.out_h as f32;
        let sx = self.side_w / self.out_w as f32;
        (
            (row - self.center_row + self.side_h / 2.0) / sy - 0.5,
            (col - self.center_col + self.side_w / 2.0) / sx - 0.5,
        )
    }

    /// Frame pixels per patch pixel, vertically and horizontally.
    pub fn scale(&self) -> (f32, f32) {
        (self.side_h / self.out_h as f32, self.side_w / self.out_w as f32)
    }
}

/// Crops `win` out of `img` with bilinear resampling and border replication.
pub fn crop(img: &Tensor, win: &Window) -> Result<Tensor> {
    let (_, _, c) = img.dims3()?;
    if win.out_h == 0 || win.out_w == 0 || !(win.side_h > 0.0 && win.side_w > 0.0) {
        return Err(shape_err!("degenerate crop window {:?}", win));
    }
    let mut data = Vec::with_capacity(win.out_h * win.out_w * c);
    let mut px = [0.0f32; 16];
    for u in 0..win.out_h {
        for v in 0..win.out_w {
            let (r, q) = win.to_frame(u as f32, v as f32);
            sample_bilinear(img, r, q, &mut px[..c]);
            data.extend_from_slice(&px[..c]);
        }
    }
    Tensor::new([win.out_h, win.out_w, c], data)
}

/// Bilinear resize with half-pixel alignment (the `cv::resize` convention).
pub fn resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, _) = img.dims3()?;
    let win = Window {
        center_row: (h as f32 - 1.0) / 2.0,
        center_col: (w as f32 - 1.0) / 2.0,
        side_h: h as f32,
        side_w: w as f32,
        out_h,
        out_w,
    };
    crop(img, &win)
}

/// Integer translation by `(dr, dc)` with border replication:
/// `out[r, c] = img[r - dr, c - dc]`.
pub fn translate(img: &Tensor, dr: i32, dc: i32) -> Result<Tensor> {
    let (h, w, c) = img.dims3()?;
    let d = img.data();
    let mut out = Vec::with_capacity(d.len());
    for r in 0..h as i32 {
        let sr = (r - dr).clamp(0, h as i32 - 1) as usize;
        for q in 0..w as i32 {
            let sq = (q - dc).clamp(0, w as i32 - 1) as usize;
            out.extend_from_slice(&d[(sr * w + sq) * c..(sr * w + sq + 1) * c]);
        }
    }
    Tensor::new([h, w, c], out)
}

/// Crops an integer-aligned `hh x ww` block at top-left `(r0, c0)`; the block
/// must lie inside the image.
pub fn sub_image(img: &Tensor, r0: usize, c0: usize, hh: usize, ww: usize) -> Result<Tensor> {
    let (h, w, c) = img.dims3()?;
    if r0 + hh > h || c0 + ww > w {
        return Err(shape_err!("block {}x{} at ({}, {}) exceeds {}x{}", hh, ww, r0, c0, h, w));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(hh * ww * c);
    for r in r0..r0 + hh {
        out.extend_from_slice(&d[(r * w + c0) * c..(r * w + c0 + ww) * c]);
    }
    Tensor::new([hh, ww, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        let data = (0..h * w * 3).map(|i| ((i / 3) as f32) / (h * w) as f32).collect();
        Tensor::new([h, w, 3], data).unwrap()
    }

    #[test]
    fn full_window_is_identity() {
        let img = ramp(8, 6);
        let win = Window { center_row: 3.5, center_col: 2.5, side_h: 8.0, side_w: 6.0, out_h: 8, out_w: 6 };
        assert_eq!(crop(&img, &win).unwrap(), img);
    }

    #[test]
    fn window_mapping_round_trips() {
        let win = Window { center_row: 20.3, center_col: 11.0, side_h: 33.0, side_w: 40.0, out_h: 48, out_w: 48 };
        let (r, c) = win.to_frame(7.25, 30.5);
        let (u, v) = win.to_patch(r, c);
        assert!((u - 7.25).abs() < 1e-4 && (v - 30.5).abs() < 1e-4);
        let (cu, cv) = win.to_patch(20.3, 11.0);
        assert!((cu - 23.5).abs() < 1e-4 && (cv - 23.5).abs() < 1e-4);
    }

    #[test]
    fn translate_shifts_and_replicates() {
        let img = ramp(4, 4);
        let t = translate(&img, 1, 0).unwrap();
        assert_eq!(&t.data()[0..3], &img.data()[0..3]);
        assert_eq!(&t.data()[12..15], &img.data()[0..3]);
        assert_eq!(translate(&img, 0, 0).unwrap(), img);
    }

    #[test]
    fn resize_preserves_constant() {
        let img = Tensor::full([10, 7, 3], 0.25);
        let r = resize(&img, 4, 9).unwrap();
        assert_eq!(r.shape(), &[4, 9, 3]);
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }
}
