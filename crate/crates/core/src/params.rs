//! Named parameter blocks shared by layers, optimisers, checkpoints and the
//! gradient checker.
//!
//! A gradient is represented by a value of the same type as the module it
//! differentiates, so accumulation and optimiser updates can walk both
//! structures in lockstep.

/// Visits the trainable scalars of a module as named, ordered blocks.
///
/// Implementations must visit blocks in the same order in `visit` and
/// `visit_mut`; that order is the layout of the flat vectors below and of the
/// checkpoint format.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s| n += s.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, s| out.extend_from_slice(s));
        out
    }

    /// Overwrites every parameter from `flat`. Panics if the length differs.
    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// `(name, len)` for each block, in visiting order.
    fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, s| out.push((name.to_string(), s.len())));
        out
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, s| s.fill(value));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// `self += other`, block by block.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.to_flat();
        let mut offset = 0;
        self.visit_mut("", &mut |_, s| {
            for (a, b) in s.iter_mut().zip(&flat[offset..]) {
                *a += b;
            }
            offset += s.len();
        });
    }

    fn scale(&mut self, factor: f64) {
        self.visit_mut("", &mut |_, s| s.iter_mut().for_each(|v| *v *= factor));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

/// Joins a prefix and a field name with a dot, skipping an empty prefix.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
