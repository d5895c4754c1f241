//! Central finite-difference check of analytic gradients.

use serde::Serialize;

use super::params::ParamSet;
use super::Real;

/// Worst disagreement within one parameter group.
#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GroupCheck> {
        self.groups.iter().filter(|g| !g.passed).collect()
    }
}

/// Relative error with a floor on the denominator so that gradients of
/// order 1e-7 and below are judged absolutely.
const REL_FLOOR: f64 = 1e-7;

/// Compares `analytic` (a gradient laid out like `params`) with central
/// differences of `loss`, stepping each parameter by `1e-5 * max(1, |θ|)`.
/// `params` is restored afterwards.
pub fn grad_check<T, P, F>(params: &mut P, analytic: &P, mut loss: F, tolerance: f64) -> GradCheckReport
where
    T: Real,
    P: ParamSet<T>,
    F: FnMut(&P) -> f64,
{
    let mut expected: Vec<(String, Vec<T>)> = Vec::new();
    analytic.visit_params(&mut |name, _, g| expected.push((name.to_string(), g.to_vec())));

    let mut lens = Vec::new();
    params.visit_params(&mut |_, _, v| lens.push(v.len()));

    let mut groups = Vec::new();
    for (gi, &len) in lens.iter().enumerate() {
        let (name, grad) = &expected[gi];
        let mut check = GroupCheck {
            name: name.clone(),
            len,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            passed: true,
        };
        for k in 0..len {
            let original = read(params, gi, k);
            let h = 1e-5 * original.as_f64().abs().max(1.0);
            write(params, gi, k, T::from_f64_lossy(original.as_f64() + h));
            let plus = loss(params);
            write(params, gi, k, T::from_f64_lossy(original.as_f64() - h));
            let minus = loss(params);
            write(params, gi, k, original);
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad[k].as_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > check.max_rel_error || rel.is_nan() {
                check.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                check.worst_index = k;
            }
            check.max_abs_error = check.max_abs_error.max(abs);
        }
        check.passed = check.max_rel_error <= tolerance;
        groups.push(check);
    }
    GradCheckReport { tolerance, groups }
}

fn read<T: Real, P: ParamSet<T>>(p: &P, group: usize, k: usize) -> T {
    let mut out = T::zero();
    let mut gi = 0;
    p.visit_params(&mut |_, _, v| {
        if gi == group {
            out = v[k];
        }
        gi += 1;
    });
    out
}

fn write<T: Real, P: ParamSet<T>>(p: &mut P, group: usize, k: usize, value: T) {
    let mut gi = 0;
    p.visit_params_mut(&mut |_, _, v| {
        if gi == group {
            v[k] = value;
        }
        gi += 1;
    });
}
