//! Offset prediction from pixel features and a text embedding, and the
//! resampling render that queries the implicit representation at the
//! displaced coordinates.

use alloc::vec::Vec;

use crate::error::shape_err;
use crate::guidance::{select_text_embedding, EmbeddingBank, TemplateEmbedder, TemplateEmbedding, TextEmbedding};
use crate::nets::{Conv, ConvStack, ConvStackVars, Params};
use crate::numerics::{Graph, Tensor, Var};
use crate::stir::{encode_sequence, grid_coords, reconstruct_frame, FeatureVolume, SequenceBuffer, StirParams, StirVars, VolumeVars};
use crate::{Error, Result};

/// Sizes and offset bounds of the offset predictor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LResampleSpec {
    /// Encoder channels `C`.
    pub features: usize,
    /// Text embedding dimension `M`; zero for the text-free variant.
    pub text_dim: usize,
    pub hidden: usize,
    pub s_xy: f32,
    pub s_tau: f32,
}

impl LResampleSpec {
    pub fn new(features: usize, text_dim: usize) -> Self {
        Self { features, text_dim, hidden: 32, s_xy: 1.0, s_tau: 1.0 }
    }

    pub fn uses_text(&self) -> bool {
        self.text_dim > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LResampleParams {
    pub spec: LResampleSpec,
    pub stack: ConvStack,
}

impl LResampleParams {
    /// Three 3x3 convolutions; the last starts at zero so the initial offsets
    /// are zero and resampling starts as the plain grid render.
    pub fn init(spec: LResampleSpec, seed: u64) -> Result<Self> {
        if !(spec.s_xy >= 0.0 && spec.s_tau >= 0.0) || spec.features == 0 || spec.hidden == 0 {
            return Err(Error::Config(alloc::format!("bad offset predictor spec {:?}", spec)));
        }
        let mut stack = ConvStack::init(&[spec.features + spec.text_dim, spec.hidden, spec.hidden, 3], seed)?;
        stack.layers[2] = Conv::zeros(spec.hidden, 3);
        Ok(Self { spec, stack })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ConvStackVars {
        self.stack.bind(g, trainable)
    }
}

impl Params for LResampleParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.stack.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.stack.tensors_mut()
    }
}

fn text_vector<'a>(spec: &LResampleSpec, ztxt: Option<&'a [f32]>) -> Result<Option<&'a [f32]>> {
    match (spec.uses_text(), ztxt) {
        (false, _) => Ok(None),
        (true, Some(z)) if z.len() == spec.text_dim => Ok(Some(z)),
        (true, Some(z)) => Err(shape_err!("text embedding dim {} != {}", z.len(), spec.text_dim)),
        (true, None) => Err(Error::Config("this offset predictor needs a text embedding".into())),
    }
}

/// Offsets node `[H*W, 3]` from features `feat: [H*W, C]` of an `h x w`
/// frame. `ztxt` is broadcast to every pixel when the predictor uses text.
pub fn offsets_graph(
    g: &mut Graph,
    params: &LResampleParams,
    vars: &ConvStackVars,
    feat: Var,
    h: usize,
    w: usize,
    ztxt: Option<&[f32]>,
) -> Result<Var> {
    let spec = &params.spec;
    let (p, c) = g.value(feat).dims2()?;
    if p != h * w || c != spec.features {
        return Err(shape_err!("features {:?} do not match {}x{}x{}", (p, c), h, w, spec.features));
    }
    let input = match text_vector(spec, ztxt)? {
        Some(z) => {
            let mut data = Vec::with_capacity(p * z.len());
            for _ in 0..p {
                data.extend_from_slice(z);
            }
            let zt = g.constant(Tensor::new([p, z.len()], data)?);
            g.concat(&[feat, zt])?
        }
        None => feat,
    };
    let x = g.reshape(input, &[h, w, spec.features + spec.text_dim])?;
    let raw = vars.forward(g, x)?;
    let raw = g.reshape(raw, &[p, 3])?;
    let t = g.tanh(raw)?;
    let mut scale = Vec::with_capacity(p * 3);
    for _ in 0..p {
        scale.extend_from_slice(&[spec.s_xy, spec.s_xy, spec.s_tau]);
    }
    let s = g.constant(Tensor::new([p, 3], scale)?);
    g.mul(t, s)
}

/// Per-pixel `(dx, dy, dτ)` offsets `[H, W, 3]` from frame-`t` features
/// `[H, W, C]`.
pub fn predict_offsets(features: &Tensor, ztxt: Option<&TextEmbedding>, params: &LResampleParams) -> Result<Tensor> {
    let (h, w, c) = features.dims3()?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let f = g.constant(features.clone().reshape([h * w, c])?);
    let o = offsets_graph(&mut g, params, &vars, f, h, w, ztxt.map(|z| z.vector.as_slice()))?;
    Ok(g.value(o).clone().reshape([h, w, 3])?)
}

/// Colors `[H*W, 3]` at the grid displaced by `offsets: [H*W, 3]`, clamped to
/// the domain.
#[allow(clippy::too_many_arguments)]
pub fn resample_graph(
    g: &mut Graph,
    stir: &StirVars,
    vol: VolumeVars,
    offsets: Var,
    h: usize,
    w: usize,
    frames: usize,
) -> Result<Var> {
    let mut grid = Vec::with_capacity(h * w * 3);
    for x in 0..h {
        for y in 0..w {
            grid.extend_from_slice(&[x as f32, y as f32, (frames - 1) as f32]);
        }
    }
    let grid = g.constant(Tensor::new([h * w, 3], grid)?);
    let q = g.add(grid, offsets)?;
    let hi = [(h - 1) as f32, (w - 1) as f32, (frames - 1) as f32];
    let q = g.clamp(q, &[0.0, 0.0, 0.0], &hi)?;
    let xy = g.slice_cols(q, 0, 2)?;
    let tau = g.slice_cols(q, 2, 3)?;
    stir.render(g, vol, xy, tau, h, w)
}

/// Renders the newest frame at the grid displaced by `offsets: [H, W, 3]`;
/// output clamped to `[0, 1]`.
pub fn resample_frame(vol: &FeatureVolume, offsets: &Tensor, stir: &StirParams) -> Result<Tensor> {
    reconstruct_frame(vol, stir, Some(offsets))
}

/// Scalar-loop version of [`resample_frame`].
pub fn resample_frame_loop(vol: &FeatureVolume, offsets: &Tensor, stir: &StirParams) -> Result<Tensor> {
    crate::stir::reconstruct_frame_loop(vol, stir, Some(offsets))
}

/// How the defense obtains the template's embedding.
pub enum TemplateInput<'a> {
    Embedding(&'a TemplateEmbedding),
    Patch(&'a Tensor, &'a dyn TemplateEmbedder),
}

/// Picks `z_txt` for a template.
pub fn select_for_template<'b>(template: &TemplateInput, bank: &'b EmbeddingBank) -> Result<&'b TextEmbedding> {
    let owned;
    let tpl = match template {
        TemplateInput::Embedding(e) => *e,
        TemplateInput::Patch(p, embedder) => {
            owned = embedder.embed(p)?;
            &owned
        }
    };
    Ok(select_text_embedding(tpl, bank)?.0)
}

/// Purifies the newest frame of an encoded sequence.
pub fn lrr_defend_volume(
    vol: &FeatureVolume,
    ztxt: Option<&TextEmbedding>,
    stir: &StirParams,
    lres: &LResampleParams,
) -> Result<Tensor> {
    let feat = vol.slice(vol.frames() - 1)?;
    let offsets = predict_offsets(&feat, ztxt, lres)?;
    resample_frame(vol, &offsets, stir)
}

/// Full defense: embed the template, select the text embedding, encode the
/// sequence, predict offsets and resample the newest frame.
pub fn lrr_defend(
    seq: &SequenceBuffer,
    template: &TemplateInput,
    bank: &EmbeddingBank,
    stir: &StirParams,
    lres: &LResampleParams,
) -> Result<Tensor> {
    let ztxt = if lres.spec.uses_text() { Some(select_for_template(template, bank)?) } else { None };
    let vol = encode_sequence(stir, seq)?;
    lrr_defend_volume(&vol, ztxt, stir, lres)
}

/// Grid coordinates shifted by offsets, as used by [`resample_frame`].
pub fn resampled_coords(vol: &FeatureVolume, offsets: &Tensor) -> Result<Tensor> {
    grid_coords(vol, Some(offsets))
}

/// Bound check helper: the largest `|dx|, |dy|, |dτ|` in an offset field.
pub fn max_offsets(offsets: &Tensor) -> [f32; 3] {
    let mut m = [0.0f32; 3];
    for px in offsets.data().chunks_exact(3) {
        for k in 0..3 {
            m[k] = m[k].max(px[k].abs());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::EncoderSpec;
    use crate::rng::{seeded, uniform};
    use crate::stir::StirSpec;

    fn setup(frames: usize, h: usize, w: usize) -> (StirParams, FeatureVolume) {
        let spec = StirSpec { frames, encoder: EncoderSpec { channels: 4, blocks: 1 }, hidden: 16, layers: 5 };
        let stir = StirParams::random(spec, 2).unwrap();
        let mut rng = seeded(3);
        let fs = (0..frames)
            .map(|_| Tensor::new([h, w, 3], (0..h * w * 3).map(|_| uniform(&mut rng, 0.0, 1.0)).collect()).unwrap())
            .collect();
        let vol = encode_sequence(&stir, &SequenceBuffer::new(fs, 7).unwrap()).unwrap();
        (stir, vol)
    }

    fn random_lres(spec: LResampleSpec, seed: u64) -> LResampleParams {
        let mut p = LResampleParams::init(spec, seed).unwrap();
        p.stack = ConvStack::init(&[spec.features + spec.text_dim, spec.hidden, spec.hidden, 3], seed).unwrap();
        p
    }

    fn z(m: usize) -> TextEmbedding {
        TextEmbedding { label: "x".into(), vector: (0..m).map(|i| (i as f32 * 0.3).cos()).collect() }
    }

    #[test]
    fn zero_final_layer_gives_zero_offsets() {
        let (_, vol) = setup(2, 6, 6);
        let p = LResampleParams::init(LResampleSpec::new(4, 5), 1).unwrap();
        let o = predict_offsets(&vol.slice(1).unwrap(), Some(&z(5)), &p).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn offsets_bounded() {
        let (_, vol) = setup(2, 6, 6);
        for seed in 0..20 {
            let spec = LResampleSpec { s_xy: 0.7, s_tau: 0.4, ..LResampleSpec::new(4, 3) };
            let mut p = random_lres(spec, seed);
            for l in &mut p.stack.layers {
                l.weight = l.weight.map(|v| v * 30.0);
            }
            let m = max_offsets(&predict_offsets(&vol.slice(1).unwrap(), Some(&z(3)), &p).unwrap());
            assert!(m[0] <= 0.7 && m[1] <= 0.7 && m[2] <= 0.4);
        }
    }

    #[test]
    fn constant_input_constant_interior_offsets() {
        let feat = Tensor::full([9, 9, 4], 0.3);
        let p = random_lres(LResampleSpec::new(4, 2), 4);
        let o = predict_offsets(&feat, Some(&z(2)), &p).unwrap();
        let at = |r: usize, c: usize| o.data()[(r * 9 + c) * 3];
        // three 3x3 layers: pixels at least 3 from the border see no padding
        for r in 3..6 {
            for c in 3..6 {
                assert!((at(r, c) - at(4, 4)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_offsets_equal_grid_render() {
        let (stir, vol) = setup(3, 7, 5);
        let zero = Tensor::zeros([7, 5, 3]);
        assert_eq!(resample_frame(&vol, &zero, &stir).unwrap(), reconstruct_frame(&vol, &stir, None).unwrap());
    }

    #[test]
    fn resample_matches_loop_and_stays_in_range() {
        let (stir, vol) = setup(3, 8, 8);
        let mut rng = seeded(5);
        let offs = Tensor::new([8, 8, 3], (0..192).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()).unwrap();
        let a = resample_frame(&vol, &offs, &stir).unwrap();
        let b = resample_frame_loop(&vol, &offs, &stir).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn text_free_variant_has_no_text_channels() {
        let p = LResampleParams::init(LResampleSpec::new(4, 0), 1).unwrap();
        assert_eq!(p.stack.input(), 4);
        let (_, vol) = setup(2, 6, 6);
        assert!(predict_offsets(&vol.slice(1).unwrap(), None, &p).is_ok());
        let q = LResampleParams::init(LResampleSpec::new(4, 3), 1).unwrap();
        assert!(predict_offsets(&vol.slice(1).unwrap(), None, &q).is_err());
    }
}
