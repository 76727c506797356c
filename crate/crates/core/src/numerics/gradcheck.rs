use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// Largest relative error among entries whose absolute error exceeds the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst_abs(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_error).fold(0.0, f64::max)
    }
}

fn scalar_loss(
    build: &impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
    store: &ParamStore,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::contract(format!(
            "finite-difference check needs a scalar loss, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares tape gradients against central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε` for every scalar entry of every parameter in `store`.
///
/// An entry passes when its relative error is within `rel_tol` or its
/// absolute error is within `abs_floor`. Gradients in `store` are overwritten.
pub fn finite_difference_check(
    build: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
    store: &mut ParamStore,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    if cfg.epsilon <= 0.0 {
        return Err(Error::contract("finite-difference epsilon must be positive"));
    }
    store.zero_grad();
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    if tape.value(out).len() != 1 {
        return Err(Error::contract(format!(
            "finite-difference check needs a scalar loss, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward_scalar(out, store)?;
    drop(tape);

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    let mut pass = true;
    for id in ids {
        let n = store.value(id).len();
        let analytic = store.grad(id).clone();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for e in 0..n {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + cfg.epsilon;
            let plus = scalar_loss(&build, store)?;
            store.value_mut(id).data_mut()[e] = orig - cfg.epsilon;
            let minus = scalar_loss(&build, store)?;
            store.value_mut(id).data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let a = analytic.data()[e];
            let abs = (a - numeric).abs();
            let denom = a.abs().max(numeric.abs());
            max_abs = max_abs.max(abs);
            if abs > cfg.abs_floor {
                let rel = if denom > 0.0 { abs / denom } else { 0.0 };
                max_rel = max_rel.max(rel);
            }
        }
        if max_rel > cfg.rel_tol {
            pass = false;
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            entries: n,
        });
    }
    Ok(GradCheckReport { params, pass })
}
