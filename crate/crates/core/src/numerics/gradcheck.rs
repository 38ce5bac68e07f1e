use alloc::vec::Vec;

use super::{Graph, Tensor, Var};
use crate::error::shape_err;
use crate::Result;

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar-valued `f`. The difference quotient is formed in `f64` from
/// the `f32` forward values, using the step actually representable in `f32`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, h, &all)
}

/// Like [`grad_check`] but only probes the listed flat coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor, h: f32, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(crate::Error::Domain(alloc::format!("step must be positive, got {}", h)));
    }
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).len() != 1 {
        return Err(shape_err!("grad_check needs a scalar function"));
    }
    let analytic = g.backward(out)?.get_or_zeros(v, x.shape());

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item()? as f64)
    };

    let mut worst = 0.0f64;
    for &i in coords {
        let base = x.data()[i];
        let (up, down) = (base + h, base - h);
        let mut xp = x.clone();
        xp.data_mut()[i] = up;
        let mut xm = x.clone();
        xm.data_mut()[i] = down;
        let fd = (eval(xp)? - eval(xm)?) / (up as f64 - down as f64);
        let a = analytic.data()[i] as f64;
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Analytic derivative and difference quotients at one coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub analytic: f64,
    pub central: f64,
    pub forward: f64,
    pub backward: f64,
}

impl Probe {
    /// Error against the closest of the three quotients. Near a ReLU kink
    /// the central quotient straddles it, but the one-sided quotient on the
    /// point's own side does not.
    pub fn error(&self) -> f64 {
        let d = [self.central, self.forward, self.backward].iter().map(|q| (self.analytic - q).abs()).fold(f64::INFINITY, f64::min);
        d / self.analytic.abs().max(1.0)
    }
}

/// Central, forward and backward quotients of a scalar `f` at the listed
/// flat coordinates.
pub fn probe_gradient<F>(f: F, x: &Tensor, h: f32, coords: &[usize]) -> Result<Vec<Probe>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(crate::Error::Domain(alloc::format!("step must be positive, got {}", h)));
    }
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).len() != 1 {
        return Err(shape_err!("probe_gradient needs a scalar function"));
    }
    let f0 = g.value(out).item()? as f64;
    let analytic = g.backward(out)?.get_or_zeros(v, x.shape());
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item()? as f64)
    };
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let base = x.data()[i];
        let (up, down) = (base + h, base - h);
        let mut xp = x.clone();
        xp.data_mut()[i] = up;
        let mut xm = x.clone();
        xm.data_mut()[i] = down;
        let (fp, fm) = (eval(xp)?, eval(xm)?);
        out.push(Probe {
            analytic: analytic.data()[i] as f64,
            central: (fp - fm) / (up as f64 - down as f64),
            forward: (fp - f0) / (up as f64 - base as f64),
            backward: (f0 - fm) / (base as f64 - down as f64),
        });
    }
    Ok(out)
}
