//! Gradient attacks on the tracker's search patch: single-step FGSM,
//! iterative PGD, and an incremental targeted attack that carries its
//! perturbation from frame to frame.

use alloc::string::String;

use crate::numerics::Tensor;
use crate::rng::{seeded, uniform};
use crate::tracker::{loss_and_input_grad, patch_to_response, TrackerParams};
use crate::{Error, Result};

/// Per-frame iteration rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// `steps` iterations on every frame.
    Fixed,
    /// `long` iterations on frames divisible by `every`, `short` otherwise.
    Periodic { every: usize, long: usize, short: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackBudget {
    pub eps: f32,
    pub steps: usize,
    pub step_size: f32,
    pub schedule: Schedule,
}

impl AttackBudget {
    /// Ten signed-gradient steps of `eps / 4` inside an `L∞` ball of 10/255.
    pub fn pgd_default() -> Self {
        let eps = 10.0 / 255.0;
        Self { eps, steps: 10, step_size: eps / 4.0, schedule: Schedule::Fixed }
    }

    /// `L∞` ball of 0.3; 10 iterations every 30th frame, 2 otherwise.
    pub fn spark_default() -> Self {
        Self { eps: 0.3, steps: 10, step_size: 0.03, schedule: Schedule::Periodic { every: 30, long: 10, short: 2 } }
    }

    pub fn fgsm(eps: f32) -> Self {
        Self { eps, steps: 1, step_size: eps, schedule: Schedule::Fixed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eps) || !(self.step_size >= 0.0) {
            return Err(Error::Config(alloc::format!("bad attack budget {:?}", self)));
        }
        Ok(())
    }

    /// Iterations spent on frame `frame_idx`.
    pub fn iterations(&self, frame_idx: usize) -> usize {
        match self.schedule {
            Schedule::Fixed => self.steps,
            Schedule::Periodic { every, long, short } => {
                if every > 0 && frame_idx % every == 0 {
                    long
                } else {
                    short
                }
            }
        }
    }
}

/// What the attacker differentiates: the tracker, its template, and the
/// response index of the true target position in the patch.
pub struct AttackContext<'a> {
    pub tracker: &'a TrackerParams,
    pub template_features: &'a Tensor,
    /// Ground-truth target center in patch coordinates `(row, col)`.
    pub target: (f32, f32),
}

impl AttackContext<'_> {
    fn index(&self, pos: (f32, f32)) -> usize {
        patch_to_response(&self.tracker.spec, pos.0, pos.1)
    }

    fn grad(&self, x: &Tensor, pos: (f32, f32)) -> Result<Tensor> {
        Ok(loss_and_input_grad(self.tracker, self.template_features, x, self.index(pos))?.1)
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clips each component of `delta` into `[-eps, eps]`.
pub fn project_linf(delta: &Tensor, eps: f32) -> Tensor {
    delta.map(|d| d.clamp(-eps, eps))
}

/// `x0 + delta`, with `delta` projected onto the ball and the result onto
/// `[0, 1]`. The sum is nudged by an ulp where rounding would otherwise put
/// it outside the ball as measured in `f32`.
fn apply(x0: &Tensor, delta: &Tensor, eps: f32) -> Tensor {
    let d = project_linf(delta, eps);
    let mut out = x0.clone();
    for (o, &di) in out.data_mut().iter_mut().zip(d.data()) {
        let x = *o;
        let mut v = (x + di).clamp(0.0, 1.0);
        while v - x > eps {
            v = v.next_down();
        }
        while x - v > eps {
            v = v.next_up();
        }
        *o = v;
    }
    out
}

/// One signed step: `x + step * sign(g)`.
fn step(x: &Tensor, g: &Tensor, step: f32) -> Tensor {
    let mut out = x.clone();
    for (o, &gi) in out.data_mut().iter_mut().zip(g.data()) {
        *o += step * sign(gi);
    }
    out
}

fn diff(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, &bi) in out.data_mut().iter_mut().zip(b.data()) {
        *o -= bi;
    }
    out
}

/// Untargeted fast gradient sign step of size `eps`.
pub fn fgsm(patch: &Tensor, ctx: &AttackContext, eps: f32) -> Result<Tensor> {
    AttackBudget::fgsm(eps).validate()?;
    if eps == 0.0 {
        return Ok(patch.clone());
    }
    let g = ctx.grad(patch, ctx.target)?;
    Ok(apply(patch, &diff(&step(patch, &g, eps), patch), eps))
}

/// Untargeted projected gradient ascent on the tracker loss.
pub fn pgd_attack(patch: &Tensor, ctx: &AttackContext, budget: &AttackBudget) -> Result<Tensor> {
    budget.validate()?;
    let mut x = patch.clone();
    for _ in 0..budget.steps {
        let g = ctx.grad(&x, ctx.target)?;
        x = apply(patch, &diff(&step(&x, &g, budget.step_size), patch), budget.eps);
    }
    Ok(x)
}

/// Perturbation carried between frames by the incremental attack.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerturbationState {
    pub delta: Option<Tensor>,
}

/// Targeted incremental attack: warm-starts from the carried perturbation
/// and descends the tracker loss at `target_pos` (patch coordinates).
pub fn spark_attack(
    patch: &Tensor,
    state: &PerturbationState,
    ctx: &AttackContext,
    target_pos: (f32, f32),
    budget: &AttackBudget,
    frame_idx: usize,
) -> Result<(Tensor, PerturbationState)> {
    budget.validate()?;
    let mut delta = match &state.delta {
        Some(d) if d.shape() == patch.shape() => project_linf(d, budget.eps),
        _ => Tensor::zeros(patch.shape()),
    };
    let mut x = apply(patch, &delta, budget.eps);
    for _ in 0..budget.iterations(frame_idx) {
        let g = ctx.grad(&x, target_pos)?;
        x = apply(patch, &diff(&step(&x, &g, -budget.step_size), patch), budget.eps);
    }
    delta = diff(&x, patch);
    Ok((x, PerturbationState { delta: Some(project_linf(&delta, budget.eps)) }))
}

/// A per-video attacker used by the evaluation harness.
pub trait Attacker {
    fn name(&self) -> String;
    /// `L∞` budget every output respects.
    fn eps(&self) -> f32;
    /// Perturbs the search patch of frame `frame_idx`. `frame_scale` is the
    /// number of frame pixels per patch pixel.
    fn attack(&mut self, patch: &Tensor, ctx: &AttackContext, frame_idx: usize, frame_scale: f32) -> Result<Tensor>;
}

pub struct FgsmAttacker {
    pub eps: f32,
}

impl Attacker for FgsmAttacker {
    fn name(&self) -> String {
        alloc::format!("fgsm({:.4})", self.eps)
    }

    fn eps(&self) -> f32 {
        self.eps
    }

    fn attack(&mut self, patch: &Tensor, ctx: &AttackContext, _: usize, _: f32) -> Result<Tensor> {
        fgsm(patch, ctx, self.eps)
    }
}

pub struct PgdAttacker {
    pub budget: AttackBudget,
}

impl Attacker for PgdAttacker {
    fn name(&self) -> String {
        "pgd".into()
    }

    fn eps(&self) -> f32 {
        self.budget.eps
    }

    fn attack(&mut self, patch: &Tensor, ctx: &AttackContext, _: usize, _: f32) -> Result<Tensor> {
        pgd_attack(patch, ctx, &self.budget)
    }
}

/// Incremental targeted attacker whose target drifts away from the true
/// position by `drift` frame pixels per frame along a seeded direction.
pub struct SparkAttacker {
    pub budget: AttackBudget,
    pub drift: f32,
    direction: (f32, f32),
    state: PerturbationState,
}

impl SparkAttacker {
    pub fn new(budget: AttackBudget, drift: f32, seed: u64) -> Self {
        let angle = uniform(&mut seeded(seed), 0.0, core::f32::consts::TAU);
        Self { budget, drift, direction: (libm::sinf(angle), libm::cosf(angle)), state: PerturbationState::default() }
    }

    pub fn state(&self) -> &PerturbationState {
        &self.state
    }
}

impl Attacker for SparkAttacker {
    fn name(&self) -> String {
        "spark".into()
    }

    fn eps(&self) -> f32 {
        self.budget.eps
    }

    fn attack(&mut self, patch: &Tensor, ctx: &AttackContext, frame_idx: usize, frame_scale: f32) -> Result<Tensor> {
        let shift = self.drift * frame_idx as f32 / frame_scale.max(1e-6);
        let target = (ctx.target.0 + shift * self.direction.0, ctx.target.1 + shift * self.direction.1);
        let (x, st) = spark_attack(patch, &self.state, ctx, target, &self.budget, frame_idx)?;
        self.state = st;
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::TrackerSpec;
    use alloc::vec;

    fn setup() -> (TrackerParams, Tensor, Tensor) {
        let params = TrackerParams::init(TrackerSpec::default(), 1).unwrap();
        let mut rng = seeded(2);
        let patch = Tensor::new([48, 48, 3], (0..48 * 48 * 3).map(|_| uniform(&mut rng, 0.0, 1.0)).collect()).unwrap();
        let tpl = params.features(&crate::image::sub_image(&patch, 16, 16, 16, 16).unwrap()).unwrap();
        (params, patch, tpl)
    }

    fn linf(a: &Tensor, b: &Tensor) -> f32 {
        a.max_abs_diff(b).unwrap()
    }

    #[test]
    fn project_examples() {
        let d = Tensor::new([3], vec![0.05, 0.2, -0.2]).unwrap();
        assert_eq!(project_linf(&d, 0.1).data(), &[0.05, 0.1, -0.1]);
    }

    #[test]
    fn budgets_hold() {
        let (params, patch, tpl) = setup();
        let ctx = AttackContext { tracker: &params, template_features: &tpl, target: (23.5, 23.5) };
        assert_eq!(fgsm(&patch, &ctx, 0.0).unwrap(), patch);
        let f = fgsm(&patch, &ctx, 8.0 / 255.0).unwrap();
        assert!(linf(&f, &patch) <= 8.0 / 255.0);
        let b = AttackBudget::pgd_default();
        let p = pgd_attack(&patch, &ctx, &b).unwrap();
        assert!(linf(&p, &patch) <= b.eps);
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let zero = AttackBudget { steps: 0, ..b };
        assert_eq!(pgd_attack(&patch, &ctx, &zero).unwrap(), patch);
    }

    #[test]
    fn pgd_raises_loss() {
        let (params, patch, tpl) = setup();
        let ctx = AttackContext { tracker: &params, template_features: &tpl, target: (23.5, 23.5) };
        let idx = ctx.index(ctx.target);
        let before = loss_and_input_grad(&params, &tpl, &patch, idx).unwrap().0;
        let p = pgd_attack(&patch, &ctx, &AttackBudget::pgd_default()).unwrap();
        let after = loss_and_input_grad(&params, &tpl, &p, idx).unwrap().0;
        assert!(after > before, "{} -> {}", before, after);
    }

    #[test]
    fn spark_schedule_and_state() {
        let b = AttackBudget::spark_default();
        assert_eq!((b.iterations(0), b.iterations(30), b.iterations(31), b.iterations(7)), (10, 10, 2, 2));
        let (params, patch, tpl) = setup();
        let ctx = AttackContext { tracker: &params, template_features: &tpl, target: (23.5, 23.5) };
        let none = AttackBudget { schedule: Schedule::Periodic { every: 30, long: 0, short: 0 }, ..b };
        let (x, _) = spark_attack(&patch, &PerturbationState::default(), &ctx, (30.0, 30.0), &none, 0).unwrap();
        assert_eq!(x, patch);
        let mut atk = SparkAttacker::new(b, 2.0, 5);
        for f in 0..4 {
            let x = atk.attack(&patch, &ctx, f, 1.0).unwrap();
            assert!(linf(&x, &patch) <= 0.3 + 1e-6);
            let d = atk.state().delta.as_ref().unwrap();
            assert!(d.data().iter().all(|v| v.abs() <= 0.3));
        }
    }
}
