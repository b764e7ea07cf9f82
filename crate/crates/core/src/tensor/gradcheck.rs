use super::{Graph, ParamId, ParamStore, Tensor, Var};

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds a fresh graph from `x`, returning the graph, the node holding
/// `x`, and a scalar loss node. The result is the largest per-coordinate
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_difference_check<'a, F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&Tensor) -> (Graph<'a>, Var, Var),
{
    let (mut g, input, loss) = f(x);
    g.backward(loss).expect("scalar loss");
    let analytic = g.grad(input).expect("gradients after backward");
    drop(g);

    let eval = |t: &Tensor| {
        let (g, _, loss) = f(t);
        g.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe);
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-12)
}

/// Finite-difference check over every element of every parameter in
/// `store`, using the fourth-order stencil
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. `f` evaluates the
/// loss on a store and returns its value and the analytic parameter
/// gradients (missing parameters count as zero).
///
/// Parameters are restored to their original values before returning.
pub fn param_gradient_check<F>(store: &mut ParamStore, f: F, h: f64) -> f64
where
    F: Fn(&ParamStore) -> (f64, Vec<(ParamId, Tensor)>),
{
    let (_, grads) = f(store);
    let ids: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            let mut at = |dx: f64| {
                store.value_mut(id).data_mut()[i] = orig + dx;
                f(store).0
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let e = rel_err(analytic.data()[i], numeric);
            worst = worst.max(e);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_vec(vec![0.25, -0.5, 0.75, 0.125]);
        let err = finite_difference_check(
            |v| {
                let mut g = Graph::new();
                let x = g.input(v.clone());
                let l = g.sum(x);
                (g, x, l)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4]).unwrap();
        let err = finite_difference_check(
            |v| {
                let mut g = Graph::new();
                let x = g.input(v.clone());
                let l = g.cross_entropy(x, &[2, 0], &[1.0, 1.0]).unwrap();
                (g, x, l)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn param_check_on_affine_tanh() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::new(vec![2, 3], vec![0.2, -0.4, 0.1, 0.7, 0.3, -0.6]).unwrap())
            .unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.9, -1.1]).unwrap();
        let err = param_gradient_check(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let wv = g.param(s, w);
                let y = g.matmul(xv, wv).unwrap();
                let t = g.tanh(y);
                let l = g.sum(t);
                g.backward(l).unwrap();
                (g.value(l).item(), g.param_grads())
            },
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
        assert_eq!(store.value(w).data()[0], 0.2);
    }
}
