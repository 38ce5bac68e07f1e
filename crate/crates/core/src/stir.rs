//! Spatial-temporal implicit representation.
//!
//! A [`SequenceBuffer`] of `N + 1` frames is encoded once into a
//! [`FeatureVolume`]. Colors at continuous `(x, y, τ)` are then answered in two
//! stages: a spatial MLP fed the cross-frame feature of each of the `K × K`
//! neighbor sites plus the signed offset to that site, blended with area
//! weights, produces one color per frame; a temporal MLP maps each frame's
//! color plus the signed time offset to the final color, blended with
//! triangle weights. The joint path evaluates one MLP per spatio-temporal
//! neighbor instead and exists for complexity comparison.
//!
//! Every MLP predicts a correction to the color it refines: the spatial one
//! to the site's input pixel, the temporal one to the frame's color. A model
//! whose final layers are zero renders the trilinear interpolation of the
//! input frames.
//!
//! Coordinates: `x` indexes rows in `[0, H-1]`, `y` columns in `[0, W-1]`,
//! `τ` absolute frame time in `[t-N, t]`. Batched entry points take `τ`
//! relative to the oldest buffered frame.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{domain_err, shape_err};
use crate::nets::{Dense, Encoder, EncoderSpec, EncoderVars, Mlp, MlpSpec, MlpVars, Params};
use crate::numerics::{bilinear4, cell_along, frame_pair, Graph, Tensor, Var};
use crate::rng::derive;
use crate::{Error, Result};

/// Longest supported history.
pub const MAX_HISTORY: usize = 8;

/// The `N + 1` most recent frames, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBuffer {
    frames: Vec<Tensor>,
    t: usize,
}

impl SequenceBuffer {
    /// `t` is the absolute index of the newest (last) frame.
    pub fn new(frames: Vec<Tensor>, t: usize) -> Result<Self> {
        if frames.is_empty() || frames.len() > MAX_HISTORY + 1 {
            return Err(shape_err!("sequence needs 1..={} frames, got {}", MAX_HISTORY + 1, frames.len()));
        }
        if t + 1 < frames.len() {
            return Err(domain_err!("newest index {} too small for {} frames", t, frames.len()));
        }
        let (h, w, c) = frames[0].dims3()?;
        if c != 3 || h == 0 || w == 0 {
            return Err(shape_err!("frames must be [H, W, 3], got {:?}", frames[0].shape()));
        }
        for f in &frames {
            if f.shape() != frames[0].shape() {
                return Err(shape_err!("frame shapes differ: {:?} vs {:?}", f.shape(), frames[0].shape()));
            }
            if f.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(domain_err!("frame values must lie in [0, 1]"));
            }
        }
        Ok(Self { frames, t })
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn newest(&self) -> &Tensor {
        &self.frames[self.frames.len() - 1]
    }

    /// History length `N`.
    pub fn history(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[0]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[1]
    }
}

/// A continuous query point; `tau` is absolute frame time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuousCoord {
    pub x: f32,
    pub y: f32,
    pub tau: f32,
}

impl ContinuousCoord {
    pub fn new(x: f32, y: f32, tau: f32) -> Self {
        Self { x, y, tau }
    }
}

/// Per-frame encoder features, packed so that the row of site `(x, y)` is the
/// concatenation of that site's feature in every frame, oldest first, with the
/// input pixels packed the same way.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    packed: Tensor,
    pixels: Tensor,
    h: usize,
    w: usize,
    c: usize,
    frames: usize,
    t: usize,
}

impl FeatureVolume {
    /// Packs per-frame `[H, W, C]` feature maps and their `[H, W, 3]` input
    /// frames.
    pub fn from_slices(slices: &[Tensor], frames: &[Tensor], t: usize) -> Result<Self> {
        if slices.is_empty() || slices.len() != frames.len() {
            return Err(shape_err!("{} feature slices for {} frames", slices.len(), frames.len()));
        }
        let (h, w, c) = slices[0].dims3()?;
        if slices.iter().any(|s| s.shape() != slices[0].shape()) {
            return Err(shape_err!("feature slices differ in shape"));
        }
        if frames.iter().any(|f| f.shape() != [h, w, 3]) {
            return Err(shape_err!("frames must be {}x{}x3", h, w));
        }
        Ok(Self { packed: pack(slices, h * w, c), pixels: pack(frames, h * w, 3), h, w, c, frames: slices.len(), t })
    }

    /// `[H*W, F*C]`.
    pub fn packed(&self) -> &Tensor {
        &self.packed
    }

    /// Input pixels, `[H*W, F*3]`.
    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Input colors of one grid site in every frame, length `F*3`.
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let d = self.frames * 3;
        let s = x * self.w + y;
        &self.pixels.data()[s * d..(s + 1) * d]
    }

    /// Cross-frame feature of one grid site, length `F*C`.
    pub fn site(&self, x: usize, y: usize) -> &[f32] {
        let d = self.frames * self.c;
        let s = x * self.w + y;
        &self.packed.data()[s * d..(s + 1) * d]
    }

    /// Feature map `[H, W, C]` of frame `k` (0 = oldest).
    pub fn slice(&self, k: usize) -> Result<Tensor> {
        if k >= self.frames {
            return Err(domain_err!("frame {} outside volume of {}", k, self.frames));
        }
        let (c, d) = (self.c, self.frames * self.c);
        let mut out = Vec::with_capacity(self.h * self.w * c);
        for row in self.packed.data().chunks_exact(d) {
            out.extend_from_slice(&row[k * c..(k + 1) * c]);
        }
        Ok(Tensor::from_parts(vec![self.h, self.w, c], out))
    }

    /// Relative temporal coordinate of absolute time `tau`.
    pub fn relative_tau(&self, tau: f32) -> f32 {
        tau - (self.t + 1 - self.frames) as f32
    }

    fn check(&self, p: ContinuousCoord) -> Result<f32> {
        let (hx, wy) = ((self.h - 1) as f32, (self.w - 1) as f32);
        if !(0.0..=hx).contains(&p.x) || !(0.0..=wy).contains(&p.y) {
            return Err(domain_err!("({}, {}) outside [0, {}] x [0, {}]", p.x, p.y, hx, wy));
        }
        let r = self.relative_tau(p.tau);
        if !(0.0..=(self.frames - 1) as f32).contains(&r) {
            return Err(domain_err!(
                "tau {} outside [{}, {}]",
                p.tau,
                self.t + 1 - self.frames,
                self.t
            ));
        }
        Ok(r)
    }
}

fn pack(slices: &[Tensor], sites: usize, c: usize) -> Tensor {
    let f = slices.len();
    let mut data = vec![0.0; sites * f * c];
    for (k, s) in slices.iter().enumerate() {
        for (site, src) in s.data().chunks_exact(c).enumerate() {
            data[site * f * c + k * c..site * f * c + (k + 1) * c].copy_from_slice(src);
        }
    }
    Tensor::from_parts(vec![sites, f * c], data)
}

/// Sizes of a STIR model. `frames` is `N + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StirSpec {
    pub frames: usize,
    pub encoder: EncoderSpec,
    pub hidden: usize,
    pub layers: usize,
}

impl StirSpec {
    pub fn new(frames: usize) -> Self {
        Self { frames, encoder: EncoderSpec::default(), hidden: 64, layers: MlpSpec::DEFAULT_LAYERS }
    }

    pub fn spatial_mlp(&self) -> MlpSpec {
        let c = self.encoder.channels;
        MlpSpec { input: self.frames * c + 2, hidden: self.hidden, output: 3 * self.frames, layers: self.layers }
    }

    pub fn temporal_mlp(&self) -> MlpSpec {
        MlpSpec { input: 4, hidden: self.hidden, output: 3, layers: self.layers }
    }

    pub fn joint_mlp(&self) -> MlpSpec {
        MlpSpec { input: self.encoder.channels + 3, hidden: self.hidden, output: 3, layers: self.layers }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StirParams {
    pub encoder: Encoder,
    pub spatial: Mlp,
    pub temporal: Mlp,
    pub joint: Mlp,
}

impl StirParams {
    /// Training initialization: the last layer of every MLP starts at zero,
    /// so the untrained model renders the trilinear interpolation of its
    /// input frames.
    pub fn init(spec: StirSpec, seed: u64) -> Result<Self> {
        let mut p = Self::random(spec, seed)?;
        for mlp in [&mut p.spatial, &mut p.temporal, &mut p.joint] {
            let last = mlp.layers.len() - 1;
            let (i, o) = (mlp.layers[last].input(), mlp.layers[last].output());
            mlp.layers[last] = Dense::zeros(i, o);
        }
        Ok(p)
    }

    /// He initialization of every layer.
    pub fn random(spec: StirSpec, seed: u64) -> Result<Self> {
        if spec.frames == 0 || spec.frames > MAX_HISTORY + 1 {
            return Err(Error::Config(alloc::format!("frame count {} outside 1..={}", spec.frames, MAX_HISTORY + 1)));
        }
        Self::new(
            Encoder::init(spec.encoder, derive(seed, 0)),
            Mlp::init(spec.spatial_mlp(), derive(seed, 1))?,
            Mlp::init(spec.temporal_mlp(), derive(seed, 2))?,
            Mlp::init(spec.joint_mlp(), derive(seed, 3))?,
        )
    }

    /// Assembles parts, checking that their dimensions agree.
    pub fn new(encoder: Encoder, spatial: Mlp, temporal: Mlp, joint: Mlp) -> Result<Self> {
        let c = encoder.channels();
        let s = spatial.spec();
        if s.input < c + 2 || (s.input - 2) % c != 0 {
            return Err(shape_err!("spatial MLP input {} does not fit C = {}", s.input, c));
        }
        let frames = (s.input - 2) / c;
        if s.output != 3 * frames {
            return Err(shape_err!("spatial MLP output {} != 3 * {}", s.output, frames));
        }
        if temporal.input_dim() != 4 || temporal.output_dim() != 3 {
            return Err(shape_err!("temporal MLP must map 4 -> 3"));
        }
        if joint.input_dim() != c + 3 || joint.output_dim() != 3 {
            return Err(shape_err!("joint MLP must map {} -> 3", c + 3));
        }
        Ok(Self { encoder, spatial, temporal, joint })
    }

    pub fn spec(&self) -> StirSpec {
        let s = self.spatial.spec();
        StirSpec {
            frames: (s.input - 2) / self.encoder.channels(),
            encoder: self.encoder.spec(),
            hidden: s.hidden,
            layers: s.layers,
        }
    }

    pub fn frames(&self) -> usize {
        self.spec().frames
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> StirVars {
        StirVars {
            encoder: self.encoder.bind(g, trainable),
            spatial: self.spatial.bind(g, trainable),
            temporal: self.temporal.bind(g, trainable),
        }
    }
}

/// Tensor order: encoder, spatial, temporal, joint.
impl Params for StirParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.tensors();
        v.extend(self.spatial.tensors());
        v.extend(self.temporal.tensors());
        v.extend(self.joint.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.spatial.tensors_mut());
        v.extend(self.temporal.tensors_mut());
        v.extend(self.joint.tensors_mut());
        v
    }
}

/// Packed features `[H*W, F*C]` and pixels `[H*W, F*3]` in a graph.
#[derive(Clone, Copy, Debug)]
pub struct VolumeVars {
    pub features: Var,
    pub pixels: Var,
}

impl VolumeVars {
    pub fn constant(g: &mut Graph, vol: &FeatureVolume) -> Self {
        Self { features: g.constant(vol.packed.clone()), pixels: g.constant(vol.pixels.clone()) }
    }
}

/// The trainable part of [`StirParams`] bound into a graph. The joint MLP is
/// not trained.
#[derive(Clone, Debug)]
pub struct StirVars {
    pub encoder: EncoderVars,
    pub spatial: MlpVars,
    pub temporal: MlpVars,
}

impl StirVars {
    /// Encoder, spatial, temporal; the first entries of `StirParams::tensors`.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.spatial.vars());
        v.extend(self.temporal.vars());
        v
    }

    /// Encodes `[H, W, 3]` frame nodes into packed features and pixels.
    pub fn encode(&self, g: &mut Graph, frames: &[Var]) -> Result<VolumeVars> {
        let mut parts = Vec::with_capacity(frames.len());
        let mut pix = Vec::with_capacity(frames.len());
        for &f in frames {
            let (h, w, _) = g.value(f).dims3()?;
            let z = self.encoder.forward(g, f)?;
            let c = g.value(z).shape()[2];
            parts.push(g.reshape(z, &[h * w, c])?);
            pix.push(g.reshape(f, &[h * w, 3])?);
        }
        Ok(VolumeVars { features: g.concat(&parts)?, pixels: g.concat(&pix)? })
    }

    /// Colors `[P, 3]` at `coords: [P, 2]` (row, col) and relative `tau: [P, 1]`.
    pub fn render(&self, g: &mut Graph, vol: VolumeVars, coords: Var, tau: Var, h: usize, w: usize) -> Result<Var> {
        let frames = self.frames(g)?;
        let colors = self.spatial_colors(g, vol, coords, h, w)?;
        let slots = g.temporal_slots(colors, tau, false)?;
        let per_frame = self.temporal_colors(g, slots)?;
        let wt = g.temporal_weights(tau, frames, false)?;
        g.weighted_sum(per_frame, wt)
    }

    /// Per-frame colors `[P, 3F]`: at each of the four sites, the site's
    /// input colors plus the spatial MLP's correction, blended by area.
    pub fn spatial_colors(&self, g: &mut Graph, vol: VolumeVars, coords: Var, h: usize, w: usize) -> Result<Var> {
        let z = g.gather_2x2(vol.features, coords, h, w)?;
        let rgb = g.gather_2x2(vol.pixels, coords, h, w)?;
        let d = g.cell_offsets(coords, h, w)?;
        let input = g.concat(&[z, d])?;
        let delta = self.spatial.forward(g, input)?;
        let per_site = g.add(rgb, delta)?;
        let ws = g.area_weights(coords, h, w)?;
        g.weighted_sum(per_site, ws)
    }

    /// Temporal stage on slots `[Q, 4]` of `(color, τ - f)`: the color plus
    /// the temporal MLP's correction.
    pub fn temporal_colors(&self, g: &mut Graph, slots: Var) -> Result<Var> {
        let delta = self.temporal.forward(g, slots)?;
        let color = g.slice_cols(slots, 0, 3)?;
        g.add(color, delta)
    }

    fn frames(&self, g: &Graph) -> Result<usize> {
        let out = g.value(self.spatial.layers[self.spatial.layers.len() - 1].weight).shape()[1];
        Ok(out / 3)
    }
}

/// Runs the encoder once per buffered frame.
pub fn encode_sequence(params: &StirParams, seq: &SequenceBuffer) -> Result<FeatureVolume> {
    let slices = seq.frames().iter().map(|f| params.encoder.forward(f)).collect::<Result<Vec<_>>>()?;
    FeatureVolume::from_slices(&slices, seq.frames(), seq.t())
}

/// Spatial neighbor sites and their local-ensemble weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialNeighbors {
    pub sites: Vec<(usize, usize)>,
    pub weights: Vec<f32>,
}

/// Frames with nonzero temporal weight (or all frames in dense mode).
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalNeighbors {
    pub frames: Vec<usize>,
    pub weights: Vec<f32>,
}

/// Whether the temporal stage evaluates every frame or only those with
/// nonzero weight. Both give the same color.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TemporalMode {
    #[default]
    Sparse,
    Dense,
}

fn axis_sites(v: f32, n: usize, k: usize) -> Vec<(usize, f32, f32)> {
    // (site, signed offset v - site, tent weight)
    let (lo, f) = cell_along(v, n);
    let half = (k / 2) as i64;
    let mut out = Vec::with_capacity(k);
    let mut total = 0.0;
    for j in (1 - half)..=half {
        let site = (lo as i64 + j).clamp(0, n as i64 - 1) as usize;
        let wgt = (half as f32 - (f - j as f32).abs()).max(0.0);
        total += wgt;
        out.push((site, v - site as f32, wgt));
    }
    for e in &mut out {
        e.2 /= total;
    }
    out
}

fn check_k(k: usize) -> Result<()> {
    if k < 2 || k % 2 != 0 {
        return Err(Error::Config(alloc::format!("neighborhood size K must be even and >= 2, got {}", k)));
    }
    Ok(())
}

/// Local-ensemble weights of the `K × K` sites around `(x, y)` on an `h × w`
/// grid. For `K = 2` the weight of a site is the area of the rectangle
/// between the point and the diagonally opposite site; larger even `K` use
/// separable tent weights of radius `K / 2`, normalized.
pub fn spatial_weights(x: f32, y: f32, h: usize, w: usize, k: usize) -> Result<SpatialNeighbors> {
    check_k(k)?;
    let (hx, wy) = (h.saturating_sub(1) as f32, w.saturating_sub(1) as f32);
    if !(0.0..=hx).contains(&x) || !(0.0..=wy).contains(&y) {
        return Err(domain_err!("({}, {}) outside [0, {}] x [0, {}]", x, y, hx, wy));
    }
    if k == 2 {
        let (x0, fx) = cell_along(x, h);
        let (y0, fy) = cell_along(y, w);
        let (x1, y1) = ((x0 + 1).min(h - 1), (y0 + 1).min(w - 1));
        return Ok(SpatialNeighbors {
            sites: vec![(x0, y0), (x0, y1), (x1, y0), (x1, y1)],
            weights: bilinear4(fx, fy).to_vec(),
        });
    }
    let (ax, ay) = (axis_sites(x, h, k), axis_sites(y, w, k));
    let mut n = SpatialNeighbors { sites: Vec::with_capacity(k * k), weights: Vec::with_capacity(k * k) };
    for &(sx, _, wx) in &ax {
        for &(sy, _, wy) in &ay {
            n.sites.push((sx, sy));
            n.weights.push(wx * wy);
        }
    }
    Ok(n)
}

/// Triangle weights `max(0, 1 - |τ - f|)` over the frames of a buffer whose
/// relative time runs over `[0, frames - 1]`.
pub fn temporal_weights(tau_rel: f32, frames: usize, mode: TemporalMode) -> Result<TemporalNeighbors> {
    if frames == 0 {
        return Err(shape_err!("no frames"));
    }
    if !(0.0..=(frames - 1) as f32).contains(&tau_rel) {
        return Err(domain_err!("relative tau {} outside [0, {}]", tau_rel, frames - 1));
    }
    match mode {
        TemporalMode::Dense => Ok(TemporalNeighbors {
            frames: (0..frames).collect(),
            weights: (0..frames).map(|f| (1.0 - (tau_rel - f as f32).abs()).max(0.0)).collect(),
        }),
        TemporalMode::Sparse => {
            let (f0, ft) = frame_pair(tau_rel, frames);
            let mut n = TemporalNeighbors { frames: Vec::new(), weights: Vec::new() };
            for (f, wgt) in [(f0, 1.0 - ft), (f0 + 1, ft)] {
                if wgt > 0.0 && f < frames {
                    n.frames.push(f);
                    n.weights.push(wgt);
                }
            }
            Ok(n)
        }
    }
}

/// MLP evaluation counts of the instrumented scalar paths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounter {
    pub spatial: usize,
    pub temporal: usize,
    pub joint: usize,
}

impl EvalCounter {
    pub fn total(&self) -> usize {
        self.spatial + self.temporal + self.joint
    }
}

/// Per-frame colors at `(x, y)`, `3 * F` values, from the `K × K` sites.
pub fn spatial_stage(
    x: f32,
    y: f32,
    vol: &FeatureVolume,
    params: &StirParams,
    k: usize,
    counter: &mut EvalCounter,
) -> Result<Vec<f32>> {
    let nb = spatial_weights(x, y, vol.h, vol.w, k)?;
    let d = vol.frames * vol.c;
    let mut input = vec![0.0; d + 2];
    let mut out = vec![0.0; 3 * vol.frames];
    for (&(sx, sy), &wgt) in nb.sites.iter().zip(&nb.weights) {
        input[..d].copy_from_slice(vol.site(sx, sy));
        input[d] = x - sx as f32;
        input[d + 1] = y - sy as f32;
        let c = params.spatial.forward_vec(&input)?;
        counter.spatial += 1;
        for ((o, v), p) in out.iter_mut().zip(&c).zip(vol.pixel(sx, sy)) {
            *o += wgt * (p + v);
        }
    }
    Ok(out)
}

/// Final color from per-frame colors at relative time `tau_rel`.
pub fn temporal_stage(
    tau_rel: f32,
    colors: &[f32],
    params: &StirParams,
    mode: TemporalMode,
    counter: &mut EvalCounter,
) -> Result<[f32; 3]> {
    if colors.len() % 3 != 0 || colors.is_empty() {
        return Err(shape_err!("per-frame colors must be 3 * F values, got {}", colors.len()));
    }
    let nb = temporal_weights(tau_rel, colors.len() / 3, mode)?;
    let mut out = [0.0f32; 3];
    for (&f, &wgt) in nb.frames.iter().zip(&nb.weights) {
        let input = [colors[3 * f], colors[3 * f + 1], colors[3 * f + 2], tau_rel - f as f32];
        let c = params.temporal.forward_vec(&input)?;
        counter.temporal += 1;
        for ((o, v), p) in out.iter_mut().zip(&c).zip(&input[..3]) {
            *o += wgt * (p + v);
        }
    }
    Ok(out)
}

/// Decomposed query with `K = 2` and sparse temporal evaluation.
pub fn stir_eval(p: ContinuousCoord, vol: &FeatureVolume, params: &StirParams) -> Result<[f32; 3]> {
    stir_eval_counted(p, vol, params, 2, TemporalMode::Sparse, &mut EvalCounter::default())
}

pub fn stir_eval_counted(
    p: ContinuousCoord,
    vol: &FeatureVolume,
    params: &StirParams,
    k: usize,
    mode: TemporalMode,
    counter: &mut EvalCounter,
) -> Result<[f32; 3]> {
    check_volume(vol, params)?;
    let r = vol.check(p)?;
    let colors = spatial_stage(p.x, p.y, vol, params, k, counter)?;
    temporal_stage(r, &colors, params, mode, counter)
}

/// Joint query: one MLP evaluation per (site, frame) pair, each fed that
/// site's single-frame feature and the signed `(dx, dy, dτ)`, blended by the
/// product of spatial and temporal weights (the complementary volume ratio).
pub fn stir_eval_joint(
    p: ContinuousCoord,
    vol: &FeatureVolume,
    params: &StirParams,
    k: usize,
    counter: &mut EvalCounter,
) -> Result<[f32; 3]> {
    check_volume(vol, params)?;
    let r = vol.check(p)?;
    let sp = spatial_weights(p.x, p.y, vol.h, vol.w, k)?;
    let tp = temporal_weights(r, vol.frames, TemporalMode::Dense)?;
    let c = vol.c;
    let mut input = vec![0.0; c + 3];
    let mut out = [0.0f32; 3];
    let mut total = 0.0;
    for (&f, &wt) in tp.frames.iter().zip(&tp.weights) {
        for (&(sx, sy), &ws) in sp.sites.iter().zip(&sp.weights) {
            input[..c].copy_from_slice(&vol.site(sx, sy)[f * c..(f + 1) * c]);
            input[c] = p.x - sx as f32;
            input[c + 1] = p.y - sy as f32;
            input[c + 2] = r - f as f32;
            let v = params.joint.forward_vec(&input)?;
            counter.joint += 1;
            let wgt = ws * wt;
            total += wgt;
            let px = &vol.pixel(sx, sy)[3 * f..3 * f + 3];
            for ((o, x), p) in out.iter_mut().zip(&v).zip(px) {
                *o += wgt * (p + x);
            }
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

/// Joint spatio-temporal weights of a query: `(site, frame, weight)` for all
/// `F * K²` neighbors, normalized.
pub fn joint_weights(p: ContinuousCoord, vol: &FeatureVolume, k: usize) -> Result<Vec<((usize, usize), usize, f32)>> {
    let r = vol.check(p)?;
    let sp = spatial_weights(p.x, p.y, vol.h, vol.w, k)?;
    let tp = temporal_weights(r, vol.frames, TemporalMode::Dense)?;
    let mut out = Vec::with_capacity(sp.sites.len() * vol.frames);
    for (&f, &wt) in tp.frames.iter().zip(&tp.weights) {
        for (&s, &ws) in sp.sites.iter().zip(&sp.weights) {
            out.push((s, f, ws * wt));
        }
    }
    let total: f32 = out.iter().map(|e| e.2).sum();
    out.iter_mut().for_each(|e| e.2 /= total);
    Ok(out)
}

fn check_volume(vol: &FeatureVolume, params: &StirParams) -> Result<()> {
    let spec = params.spec();
    if vol.c != spec.encoder.channels || vol.frames != spec.frames {
        return Err(shape_err!(
            "volume has {} frames x {} channels, model expects {} x {}",
            vol.frames,
            vol.c,
            spec.frames,
            spec.encoder.channels
        ));
    }
    Ok(())
}

/// Batched decomposed rendering at `coords: [P, 3]` rows `(x, y, τ_rel)`,
/// `K = 2`. Coordinates must be in the domain. Output `[P, 3]`, unclamped.
pub fn render_points(vol: &FeatureVolume, params: &StirParams, coords: &Tensor, mode: TemporalMode) -> Result<Tensor> {
    check_volume(vol, params)?;
    let (p, three) = coords.dims2()?;
    if three != 3 {
        return Err(shape_err!("coords must be [P, 3], got {:?}", coords.shape()));
    }
    let (xy, tau) = split_coords(coords);
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let v = VolumeVars::constant(&mut g, vol);
    let xy = g.constant(xy);
    let tau = g.constant(tau);
    if mode == TemporalMode::Sparse {
        let out = vars.render(&mut g, v, xy, tau, vol.h, vol.w)?;
        return Ok(g.value(out).clone());
    }
    let colors = vars.spatial_colors(&mut g, v, xy, vol.h, vol.w)?;
    let slots = g.temporal_slots(colors, tau, true)?;
    let per_frame = vars.temporal_colors(&mut g, slots)?;
    let wt = g.temporal_weights(tau, vol.frames, true)?;
    let out = g.weighted_sum(per_frame, wt)?;
    debug_assert_eq!(g.value(out).shape(), &[p, 3]);
    Ok(g.value(out).clone())
}

/// Batched joint rendering, `K = 2`, for complexity timing.
pub fn render_points_joint(vol: &FeatureVolume, params: &StirParams, coords: &Tensor) -> Result<Tensor> {
    check_volume(vol, params)?;
    let (p, three) = coords.dims2()?;
    if three != 3 {
        return Err(shape_err!("coords must be [P, 3], got {:?}", coords.shape()));
    }
    let (f, c) = (vol.frames, vol.c);
    let rows = p * f * 4;
    let mut input = Vec::with_capacity(rows * (c + 3));
    let mut rgb = Vec::with_capacity(rows * 3);
    let mut weights = Vec::with_capacity(rows);
    for q in coords.data().chunks_exact(3) {
        let pt = ContinuousCoord { x: q[0], y: q[1], tau: q[2] + (vol.t + 1 - f) as f32 };
        for ((sx, sy), fr, wgt) in joint_weights(pt, vol, 2)? {
            input.extend_from_slice(&vol.site(sx, sy)[fr * c..(fr + 1) * c]);
            input.extend_from_slice(&[q[0] - sx as f32, q[1] - sy as f32, q[2] - fr as f32]);
            rgb.extend_from_slice(&vol.pixel(sx, sy)[3 * fr..3 * fr + 3]);
            weights.push(wgt);
        }
    }
    let mut g = Graph::new();
    let vars = params.joint.bind(&mut g, false);
    let x = g.constant(Tensor::from_parts(vec![rows, c + 3], input));
    let delta = vars.forward(&mut g, x)?;
    let base = g.constant(Tensor::from_parts(vec![rows, 3], rgb));
    let y = g.add(base, delta)?;
    let w = g.constant(Tensor::from_parts(vec![p, f * 4], weights));
    let out = g.weighted_sum(y, w)?;
    Ok(g.value(out).clone())
}

fn split_coords(coords: &Tensor) -> (Tensor, Tensor) {
    let d = coords.data();
    let xy = d.chunks_exact(3).flat_map(|q| [q[0], q[1]]).collect::<Vec<_>>();
    let tau = d.chunks_exact(3).map(|q| q[2]).collect::<Vec<_>>();
    let p = tau.len();
    (Tensor::from_parts(vec![p, 2], xy), Tensor::from_parts(vec![p, 1], tau))
}

/// Query coordinates `[H*W, 3]` of every pixel at time `t`, optionally
/// displaced by `offsets: [H, W, 3]` (dx, dy, dτ) and clamped to the domain.
pub fn grid_coords(vol: &FeatureVolume, offsets: Option<&Tensor>) -> Result<Tensor> {
    let (h, w, f) = (vol.h, vol.w, vol.frames);
    if let Some(o) = offsets {
        if o.shape() != [h, w, 3] {
            return Err(shape_err!("offsets {:?} do not match {}x{}x3", o.shape(), h, w));
        }
    }
    let t_rel = (f - 1) as f32;
    let mut out = Vec::with_capacity(h * w * 3);
    for x in 0..h {
        for y in 0..w {
            let d = offsets.map_or([0.0; 3], |o| {
                let s = &o.data()[(x * w + y) * 3..(x * w + y) * 3 + 3];
                [s[0], s[1], s[2]]
            });
            out.push((x as f32 + d[0]).clamp(0.0, (h - 1) as f32));
            out.push((y as f32 + d[1]).clamp(0.0, (w - 1) as f32));
            out.push((t_rel + d[2]).clamp(0.0, t_rel));
        }
    }
    Ok(Tensor::from_parts(vec![h * w, 3], out))
}

/// Renders the newest frame at every pixel (plus optional offsets), clamped
/// to `[0, 1]`. `[H, W, 3]`.
pub fn reconstruct_frame(vol: &FeatureVolume, params: &StirParams, offsets: Option<&Tensor>) -> Result<Tensor> {
    let coords = grid_coords(vol, offsets)?;
    let rgb = render_points(vol, params, &coords, TemporalMode::Sparse)?;
    Ok(rgb.clamp01().reshape([vol.h, vol.w, 3])?)
}

/// Per-pixel scalar-loop version of [`reconstruct_frame`].
pub fn reconstruct_frame_loop(vol: &FeatureVolume, params: &StirParams, offsets: Option<&Tensor>) -> Result<Tensor> {
    let coords = grid_coords(vol, offsets)?;
    let base = (vol.t + 1 - vol.frames) as f32;
    let mut out = Vec::with_capacity(coords.len());
    for q in coords.data().chunks_exact(3) {
        let c = stir_eval(ContinuousCoord::new(q[0], q[1], q[2] + base), vol, params)?;
        out.extend(c.iter().map(|v| v.clamp(0.0, 1.0)));
    }
    Tensor::new([vol.h, vol.w, 3], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};

    fn small_spec(frames: usize) -> StirSpec {
        StirSpec { frames, encoder: EncoderSpec { channels: 4, blocks: 1 }, hidden: 16, layers: 5 }
    }

    fn random_seq(frames: usize, h: usize, w: usize, seed: u64) -> SequenceBuffer {
        let mut rng = seeded(seed);
        let fs = (0..frames)
            .map(|_| Tensor::new([h, w, 3], (0..h * w * 3).map(|_| uniform(&mut rng, 0.0, 1.0)).collect()).unwrap())
            .collect();
        SequenceBuffer::new(fs, 10).unwrap()
    }

    #[test]
    fn weight_examples() {
        let c = spatial_weights(2.5, 3.5, 8, 8, 2).unwrap();
        assert!(c.weights.iter().all(|&w| w == 0.25));
        let g = spatial_weights(3.0, 5.0, 8, 8, 2).unwrap();
        let hot: Vec<_> = g.sites.iter().zip(&g.weights).filter(|e| *e.1 > 0.0).collect();
        assert_eq!(hot, vec![(&(3, 5), &1.0)]);
        let q = spatial_weights(0.25, 0.25, 8, 8, 2).unwrap();
        assert_eq!(q.weights, vec![0.5625, 0.1875, 0.1875, 0.0625]);
        // last grid row: the point sits on the upper site of the last cell
        let e = spatial_weights(7.0, 0.0, 8, 8, 2).unwrap();
        assert_eq!(e.sites[2], (7, 0));
        assert_eq!(e.weights[2], 1.0);
    }

    #[test]
    fn temporal_examples() {
        let one = temporal_weights(2.0, 5, TemporalMode::Sparse).unwrap();
        assert_eq!((one.frames, one.weights), (vec![2], vec![1.0]));
        let mid = temporal_weights(3.5, 5, TemporalMode::Sparse).unwrap();
        assert_eq!((mid.frames, mid.weights), (vec![3, 4], vec![0.5, 0.5]));
        let q = temporal_weights(3.75, 5, TemporalMode::Dense).unwrap();
        assert_eq!(q.weights, vec![0.0, 0.0, 0.0, 0.25, 0.75]);
        assert!(temporal_weights(4.5, 5, TemporalMode::Sparse).is_err());
    }

    #[test]
    fn larger_k_weights_normalize() {
        for k in [4, 6] {
            let n = spatial_weights(3.3, 1.7, 10, 10, k).unwrap();
            assert_eq!(n.sites.len(), k * k);
            let s: f32 = n.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(spatial_weights(1.0, 1.0, 4, 4, 3).is_err());
    }

    #[test]
    fn encode_single_and_duplicate_frames() {
        let params = StirParams::random(small_spec(1), 4).unwrap();
        let seq = random_seq(1, 6, 5, 1);
        let vol = encode_sequence(&params, &seq).unwrap();
        assert_eq!((vol.frames(), vol.height(), vol.width()), (1, 6, 5));

        let params = StirParams::random(small_spec(2), 4).unwrap();
        let f = seq.frames()[0].clone();
        let vol = encode_sequence(&params, &SequenceBuffer::new(vec![f.clone(), f], 3).unwrap()).unwrap();
        assert_eq!(vol.slice(0).unwrap(), vol.slice(1).unwrap());
        let again = encode_sequence(&params, &SequenceBuffer::new(vec![seq.frames()[0].clone(); 2], 3).unwrap());
        assert_eq!(vol, again.unwrap());
    }

    #[test]
    fn eval_counts() {
        let params = StirParams::random(small_spec(3), 1).unwrap();
        let vol = encode_sequence(&params, &random_seq(3, 6, 6, 2)).unwrap();
        let p = ContinuousCoord::new(2.3, 1.1, 9.4);
        let mut c = EvalCounter::default();
        stir_eval_counted(p, &vol, &params, 2, TemporalMode::Sparse, &mut c).unwrap();
        assert_eq!((c.spatial, c.temporal), (4, 2));
        let mut c = EvalCounter::default();
        stir_eval_counted(p, &vol, &params, 2, TemporalMode::Dense, &mut c).unwrap();
        assert_eq!(c.total(), 4 + 3);
        let mut c = EvalCounter::default();
        stir_eval_joint(p, &vol, &params, 2, &mut c).unwrap();
        assert_eq!(c.joint, 12);
    }

    #[test]
    fn sparse_and_dense_agree() {
        let params = StirParams::random(small_spec(3), 8).unwrap();
        let vol = encode_sequence(&params, &random_seq(3, 6, 6, 3)).unwrap();
        for p in [ContinuousCoord::new(1.2, 4.9, 8.0), ContinuousCoord::new(0.0, 5.0, 9.7)] {
            let mut c = EvalCounter::default();
            let a = stir_eval_counted(p, &vol, &params, 2, TemporalMode::Sparse, &mut c).unwrap();
            let b = stir_eval_counted(p, &vol, &params, 2, TemporalMode::Dense, &mut c).unwrap();
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn out_of_domain_rejected() {
        let params = StirParams::random(small_spec(2), 1).unwrap();
        let vol = encode_sequence(&params, &random_seq(2, 5, 5, 2)).unwrap();
        for p in [(4.5, 1.0, 10.0), (1.0, -0.1, 10.0), (1.0, 1.0, 10.5), (1.0, 1.0, 8.9)] {
            let r = stir_eval(ContinuousCoord::new(p.0, p.1, p.2), &vol, &params);
            assert!(matches!(r, Err(Error::Domain(_))), "{:?}", p);
        }
    }

    #[test]
    fn batched_matches_loop() {
        let params = StirParams::random(small_spec(3), 5).unwrap();
        let vol = encode_sequence(&params, &random_seq(3, 7, 6, 4)).unwrap();
        let mut rng = seeded(9);
        let mut pts = Vec::new();
        for _ in 0..50 {
            pts.extend_from_slice(&[uniform(&mut rng, 0.0, 6.0), uniform(&mut rng, 0.0, 5.0), uniform(&mut rng, 0.0, 2.0)]);
        }
        let coords = Tensor::new([50, 3], pts).unwrap();
        let sparse = render_points(&vol, &params, &coords, TemporalMode::Sparse).unwrap();
        let dense = render_points(&vol, &params, &coords, TemporalMode::Dense).unwrap();
        let joint = render_points_joint(&vol, &params, &coords).unwrap();
        for (i, q) in coords.data().chunks_exact(3).enumerate() {
            let p = ContinuousCoord::new(q[0], q[1], q[2] + 8.0);
            let a = stir_eval(p, &vol, &params).unwrap();
            let j = stir_eval_joint(p, &vol, &params, 2, &mut EvalCounter::default()).unwrap();
            for k in 0..3 {
                assert!((a[k] - sparse.data()[3 * i + k]).abs() < 1e-5, "{} {:?} {:?}", i, a, &sparse.data()[3 * i..3 * i + 3]);
                assert!((a[k] - dense.data()[3 * i + k]).abs() < 1e-5);
                assert!((j[k] - joint.data()[3 * i + k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn reconstruct_matches_loop_and_shape() {
        let params = StirParams::random(small_spec(2), 6).unwrap();
        let vol = encode_sequence(&params, &random_seq(2, 8, 8, 5)).unwrap();
        let a = reconstruct_frame(&vol, &params, None).unwrap();
        let b = reconstruct_frame_loop(&vol, &params, None).unwrap();
        assert_eq!(a.shape(), &[8, 8, 3]);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
        assert_eq!(a, reconstruct_frame(&vol, &params, None).unwrap());
    }
}
