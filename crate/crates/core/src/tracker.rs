//! A small Siamese correlation tracker: a two-layer convolutional backbone
//! shared by template and search branches, per-pixel normalized features,
//! and a channel-summed cross-correlation response. Translation only.
//!
//! Boxes use continuous pixel coordinates with pixel centers at integers;
//! `cx` is the column, `cy` the row.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{domain_err, shape_err};
use crate::image::{crop, Window};
use crate::nets::{ConvStack, ConvStackVars, Params};
use crate::numerics::{Graph, Tensor, Var};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn center_distance(&self, other: &BBox) -> f32 {
        libm::hypotf(self.cx - other.cx, self.cy - other.cy)
    }

    /// Intersection over union, treating the box as the continuous extent
    /// `[cx - w/2, cx + w/2] x [cy - h/2, cy + h/2]`.
    pub fn iou(&self, other: &BBox) -> f32 {
        let ix = (self.cx + self.w / 2.0).min(other.cx + other.w / 2.0)
            - (self.cx - self.w / 2.0).max(other.cx - other.w / 2.0);
        let iy = (self.cy + self.h / 2.0).min(other.cy + other.h / 2.0)
            - (self.cy - self.h / 2.0).max(other.cy - other.h / 2.0);
        let inter = ix.max(0.0) * iy.max(0.0);
        let union = self.w * self.h + other.w * other.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn check_in(&self, h: usize, w: usize) -> Result<()> {
        let inside = self.w > 0.0
            && self.h > 0.0
            && (-0.5..=w as f32 - 0.5).contains(&self.cx)
            && (-0.5..=h as f32 - 0.5).contains(&self.cy);
        if !inside {
            return Err(domain_err!("box {:?} outside {}x{} frame", self, h, w));
        }
        Ok(())
    }
}

/// Sizes and the response temperature of the tracker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerSpec {
    pub features: usize,
    pub template: usize,
    pub search: usize,
    pub context: f32,
    /// Multiplier turning correlation scores in `[-1, 1]` into logits.
    pub kappa: f32,
}

impl Default for TrackerSpec {
    fn default() -> Self {
        Self { features: 16, template: 16, search: 48, context: 2.0, kappa: 20.0 }
    }
}

impl TrackerSpec {
    /// Side of the square response map.
    pub fn response_side(&self) -> usize {
        self.search - self.template + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerParams {
    pub spec: TrackerSpec,
    pub backbone: ConvStack,
}

impl TrackerParams {
    pub fn init(spec: TrackerSpec, seed: u64) -> Result<Self> {
        if spec.template == 0 || spec.template > spec.search || !(spec.context > 0.0) {
            return Err(crate::Error::Config(alloc::format!("bad tracker spec {:?}", spec)));
        }
        Ok(Self { spec, backbone: ConvStack::init(&[3, spec.features, spec.features], seed)? })
    }

    /// Normalized features `[H, W, F]` of a patch.
    pub fn features(&self, patch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.backbone.bind(&mut g, false);
        let x = g.constant(patch.clone());
        let f = features_graph(&mut g, &vars, x)?;
        Ok(g.value(f).clone())
    }

    /// Search window around `prev`'s center with side `context * max(w, h)`.
    pub fn search_window(&self, prev: &BBox) -> Window {
        let side = self.spec.context * prev.w.max(prev.h);
        Window {
            center_row: prev.cy,
            center_col: prev.cx,
            side_h: side,
            side_w: side,
            out_h: self.spec.search,
            out_w: self.spec.search,
        }
    }
}

impl Params for TrackerParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.backbone.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.backbone.tensors_mut()
    }
}

const NORM_EPS: f32 = 1e-4;

/// Backbone followed by per-pixel normalization.
pub fn features_graph(g: &mut Graph, vars: &ConvStackVars, x: Var) -> Result<Var> {
    let f = vars.forward(g, x)?;
    g.pixel_normalize(f, NORM_EPS)
}

/// Correlation scores of the template over every valid search offset.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub side: usize,
    pub scores: Vec<f32>,
}

impl ResponseMap {
    /// Flat index of the highest score; the first occurrence wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Tracker state of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub template: Tensor,
    pub template_features: Tensor,
    pub bbox: BBox,
    pub frame: usize,
}

/// Crops the template from the first frame and embeds it. The template is
/// the central `template x template` part of the search patch around `gt`.
pub fn init_track(params: &TrackerParams, frame: &Tensor, gt: BBox) -> Result<TrackState> {
    let (h, w, _) = frame.dims3()?;
    gt.check_in(h, w)?;
    let win = params.search_window(&gt);
    let (sy, sx) = win.scale();
    let t = params.spec.template as f32;
    let tw = Window { side_h: t * sy, side_w: t * sx, out_h: params.spec.template, out_w: params.spec.template, ..win };
    let template = crop(frame, &tw)?;
    let template_features = params.features(&template)?;
    Ok(TrackState { template, template_features, bbox: gt, frame: 0 })
}

/// Search patch around `prev` and the window that maps it back to the frame.
pub fn crop_search_region(params: &TrackerParams, frame: &Tensor, prev: &BBox) -> Result<(Tensor, Window)> {
    let win = params.search_window(prev);
    Ok((crop(frame, &win)?, win))
}

/// Response of the stored template over a search patch.
pub fn response(params: &TrackerParams, state: &TrackState, patch: &Tensor) -> Result<ResponseMap> {
    let mut g = Graph::new();
    let vars = params.backbone.bind(&mut g, false);
    let x = g.constant(patch.clone());
    let r = response_graph(&mut g, &vars, x, &state.template_features)?;
    let v = g.value(r);
    Ok(ResponseMap { side: v.shape()[0], scores: v.data().to_vec() })
}

/// Correlation node `[R, R]` of template features against search features.
pub fn response_graph(g: &mut Graph, vars: &ConvStackVars, patch: Var, template_features: &Tensor) -> Result<Var> {
    let s = features_graph(g, vars, patch)?;
    let t = g.constant(template_features.clone());
    g.correlate(s, t)
}

/// Patch position `(row, col)` of the template center when the response
/// peaks at flat index `idx`.
pub fn response_to_patch(spec: &TrackerSpec, idx: usize) -> (f32, f32) {
    let side = spec.response_side();
    let half = (spec.template as f32 - 1.0) / 2.0;
    ((idx / side) as f32 + half, (idx % side) as f32 + half)
}

/// Response index whose template center is nearest patch position
/// `(row, col)`, clamped into the map.
pub fn patch_to_response(spec: &TrackerSpec, row: f32, col: f32) -> usize {
    let side = spec.response_side();
    let half = (spec.template as f32 - 1.0) / 2.0;
    let r = libm::roundf(row - half).clamp(0.0, (side - 1) as f32) as usize;
    let c = libm::roundf(col - half).clamp(0.0, (side - 1) as f32) as usize;
    r * side + c
}

/// Locates the target in a search patch cropped with `win`.
pub fn locate(
    params: &TrackerParams,
    state: &TrackState,
    patch: &Tensor,
    win: &Window,
) -> Result<(BBox, ResponseMap)> {
    let resp = response(params, state, patch)?;
    let (u, v) = response_to_patch(&params.spec, resp.argmax());
    let (row, col) = win.to_frame(u, v);
    Ok((BBox { cx: col, cy: row, ..state.bbox }, resp))
}

/// One tracking step on a full frame; updates the state.
pub fn track_step(params: &TrackerParams, state: &mut TrackState, frame: &Tensor) -> Result<(BBox, ResponseMap)> {
    let (patch, win) = crop_search_region(params, frame, &state.bbox)?;
    let (b, resp) = locate(params, state, &patch, &win)?;
    let (h, w, _) = frame.dims3()?;
    let b = BBox { cx: b.cx.clamp(0.0, (w - 1) as f32), cy: b.cy.clamp(0.0, (h - 1) as f32), ..b };
    state.bbox = b;
    state.frame += 1;
    Ok((b, resp))
}

/// Softmax cross-entropy of `kappa * response` against flat index `target`.
pub fn tracker_loss(g: &mut Graph, response: Var, kappa: f32, target: usize) -> Result<Var> {
    let side = g.value(response).dims2()?;
    if target >= side.0 * side.1 {
        return Err(shape_err!("target {} outside {}x{} response", target, side.0, side.1));
    }
    let logits = g.scale(response, kappa)?;
    g.softmax_xent(logits, target)
}

/// Loss and its gradient with respect to the search patch pixels.
pub fn loss_and_input_grad(
    params: &TrackerParams,
    template_features: &Tensor,
    patch: &Tensor,
    target: usize,
) -> Result<(f32, Tensor)> {
    let mut g = Graph::new();
    let vars = params.backbone.bind(&mut g, false);
    let x = g.leaf(patch.clone(), true);
    let r = response_graph(&mut g, &vars, x, template_features)?;
    let loss = tracker_loss(&mut g, r, params.spec.kappa, target)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item()?, grads.get_or_zeros(x, patch.shape())))
}

/// Uniform response loss, `ln(#positions)`, useful as a reference level.
pub fn uniform_loss(side: usize) -> f32 {
    libm::logf((side * side) as f32)
}

/// Fills a patch by placing `template` at `(r0, c0)` over a flat color.
pub fn paste(background: [f32; 3], side: usize, template: &Tensor, r0: usize, c0: usize) -> Result<Tensor> {
    let (th, tw, _) = template.dims3()?;
    if r0 + th > side || c0 + tw > side {
        return Err(shape_err!("template does not fit at ({}, {})", r0, c0));
    }
    let mut data = vec![0.0; side * side * 3];
    for px in data.chunks_exact_mut(3) {
        px.copy_from_slice(&background);
    }
    for r in 0..th {
        for c in 0..tw {
            let src = (r * tw + c) * 3;
            let dst = ((r0 + r) * side + c0 + c) * 3;
            data[dst..dst + 3].copy_from_slice(&template.data()[src..src + 3]);
        }
    }
    Tensor::new([side, side, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};

    fn noise(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::new([h, w, 3], (0..h * w * 3).map(|_| uniform(&mut rng, 0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(10.0, 10.0, 4.0, 4.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20.0, 10.0, 4.0, 4.0)), 0.0);
        // half overlap along x: inter 8, union 24
        assert!((a.iou(&BBox::new(12.0, 10.0, 4.0, 4.0)) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn response_geometry() {
        let spec = TrackerSpec::default();
        assert_eq!(spec.response_side(), 33);
        let center = patch_to_response(&spec, 23.5, 23.5);
        assert_eq!(center, 16 * 33 + 16);
        assert_eq!(response_to_patch(&spec, center), (23.5, 23.5));
    }

    #[test]
    fn finds_exact_copy_on_flat_background() {
        let params = TrackerParams::init(TrackerSpec::default(), 3).unwrap();
        let tpl = noise(16, 16, 1);
        let state = TrackState {
            template_features: params.features(&tpl).unwrap(),
            template: tpl.clone(),
            bbox: BBox::new(0.0, 0.0, 16.0, 16.0),
            frame: 0,
        };
        for (r0, c0) in [(5, 20), (16, 16), (30, 2)] {
            let patch = paste([0.4, 0.5, 0.6], 48, &tpl, r0, c0).unwrap();
            let resp = response(&params, &state, &patch).unwrap();
            assert_eq!(resp.side, 33);
            assert_eq!(resp.argmax(), r0 * 33 + c0);
        }
    }

    #[test]
    fn static_video_static_box() {
        let params = TrackerParams::init(TrackerSpec::default(), 5).unwrap();
        let frame = noise(64, 64, 2);
        let gt = BBox::new(30.0, 33.0, 20.0, 22.0);
        let mut st = init_track(&params, &frame, gt).unwrap();
        assert_eq!(st.template.shape(), &[16, 16, 3]);
        assert_eq!(st, init_track(&params, &frame, gt).unwrap());
        for _ in 0..3 {
            let (b, _) = track_step(&params, &mut st, &frame).unwrap();
            assert!(b.center_distance(&gt) < 1.5, "{:?}", b);
        }
        assert!(init_track(&params, &frame, BBox::new(70.0, 3.0, 5.0, 5.0)).is_err());
    }

    #[test]
    fn uniform_response_loss() {
        let mut g = Graph::new();
        let r = g.constant(Tensor::zeros([33, 33]));
        let l = tracker_loss(&mut g, r, 20.0, 7).unwrap();
        assert!((g.value(l).item().unwrap() - uniform_loss(33)).abs() < 1e-5);
    }

    #[test]
    fn identity_crop() {
        let params = TrackerParams::init(TrackerSpec { context: 1.0, ..Default::default() }, 0).unwrap();
        let frame = noise(48, 48, 4);
        let (patch, win) = crop_search_region(&params, &frame, &BBox::new(23.5, 23.5, 48.0, 48.0)).unwrap();
        assert!(patch.max_abs_diff(&frame).unwrap() < 1e-6);
        let (r, c) = win.to_patch(23.5, 23.5);
        assert!((r - 23.5).abs() < 1e-5 && (c - 23.5).abs() < 1e-5);
    }
}
