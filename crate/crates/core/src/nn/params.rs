use super::Real;

pub type ParamVisitor<'a, T> = dyn FnMut(&str, &[usize], &[T]) + 'a;
pub type ParamVisitorMut<'a, T> = dyn FnMut(&str, &[usize], &mut [T]) + 'a;

/// Named parameter groups walked in a fixed order.
///
/// A gradient is represented by a value of the same type whose groups hold
/// derivatives, so walking both sides pairs every parameter with its gradient.
pub trait ParamSet<T: Real> {
    /// Learnable groups.
    fn visit_params(&self, f: &mut ParamVisitor<'_, T>);
    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>);

    /// Non-learnable state that still belongs in a checkpoint.
    fn visit_buffers(&self, _f: &mut ParamVisitor<'_, T>) {}
    fn visit_buffers_mut(&mut self, _f: &mut ParamVisitorMut<'_, T>) {}

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, v| n += v.len());
        n
    }

    fn param_groups(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, shape, v| out.push((name.to_string(), shape.to_vec(), v.to_vec())));
        out
    }

    fn all_params_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    fn zero_params(&mut self) {
        self.visit_params_mut(&mut |_, _, v| v.iter_mut().for_each(|x| *x = T::zero()));
    }
}

pub(crate) fn scoped<'a, 'b, T>(
    prefix: &'a str,
    f: &'a mut ParamVisitor<'b, T>,
) -> impl FnMut(&str, &[usize], &[T]) + use<'a, 'b, T> {
    move |name, shape, v| f(&format!("{prefix}.{name}"), shape, v)
}

pub(crate) fn scoped_mut<'a, 'b, T>(
    prefix: &'a str,
    f: &'a mut ParamVisitorMut<'b, T>,
) -> impl FnMut(&str, &[usize], &mut [T]) + use<'a, 'b, T> {
    move |name, shape, v| f(&format!("{prefix}.{name}"), shape, v)
}
