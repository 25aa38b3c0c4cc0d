//! Uniform enumeration of every tensor a layer owns.
//!
//! The visiting order is fixed per layer type; gradient vectors, optimizer
//! state and archive entries all rely on it.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Updated by the optimizer.
    Trainable,
    /// Part of the model function but never updated (IWO prior weight).
    Frozen,
    /// Running statistics.
    Buffer,
}

/// Callback signature: `(name, dims, values, role)`.
pub type VisitFn<'a, T> = dyn FnMut(&str, &[usize], &mut [T], Role) + 'a;

pub trait Visit<T: Real> {
    fn visit(&mut self, prefix: &str, f: &mut VisitFn<'_, T>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gradients for the trainable tensors of a layer, in visiting order.
pub type Grads<T> = Vec<Vec<T>>;

/// Names, dims and roles of everything `layer` owns.
pub fn describe<T: Real, V: Visit<T> + ?Sized>(layer: &mut V) -> Vec<(String, Vec<usize>, Role)> {
    let mut out = Vec::new();
    layer.visit("", &mut |name, dims, _, role| out.push((name.to_string(), dims.to_vec(), role)));
    out
}

/// Flattened copies of every trainable tensor, in visiting order.
pub fn trainable_values<T: Real, V: Visit<T> + ?Sized>(layer: &mut V) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    layer.visit("", &mut |_, _, data, role| {
        if role == Role::Trainable {
            out.push(data.to_vec());
        }
    });
    out
}

/// Number of scalars held in tensors of the given roles.
pub fn count<T: Real, V: Visit<T> + ?Sized>(layer: &mut V, roles: &[Role]) -> usize {
    let mut n = 0;
    layer.visit("", &mut |_, _, data, role| {
        if roles.contains(&role) {
            n += data.len();
        }
    });
    n
}
