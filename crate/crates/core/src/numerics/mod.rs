//! Dense tensor kernel: reverse-mode autodiff, the nonlinearities used by
//! the attention and gate layers, parameter storage and the Adam optimizer.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{AdamConfig, AdamState, LrSchedule};
pub use params::{Linear, ParamInit, ParameterRegistry};
pub use tape::{Axis, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of `f` with respect to every entry of
/// the named parameters. Test and acceptance code only: the model path never
/// calls it.
pub fn numeric_grad<F>(
    registry: &ParameterRegistry,
    name: &str,
    step: f64,
    mut f: F,
) -> crate::Result<Vec<f64>>
where
    F: FnMut(&ParameterRegistry) -> crate::Result<f64>,
{
    let mut probe = registry.clone();
    let n = probe
        .get(name)
        .ok_or_else(|| crate::Error::contract(format!("unknown parameter `{name}`")))?
        .numel();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let orig = probe.get(name).expect("present").values()[k];
        probe.get_mut(name).expect("present").values_mut()[k] = orig + step;
        let up = f(&probe)?;
        probe.get_mut(name).expect("present").values_mut()[k] = orig - step;
        let down = f(&probe)?;
        probe.get_mut(name).expect("present").values_mut()[k] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
