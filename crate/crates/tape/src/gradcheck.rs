//! Finite-difference verification of tape gradients.

use crate::{Graph, ParamStore, Var};

/// Outcome of [`check_params`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(floor)
}

/// Compares analytic parameter gradients of the scalar built by `f` against
/// central differences. At most `max_per_param` entries (evenly spaced) are
/// probed in each tensor.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, h: f64, max_per_param: usize) -> GradCheck
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let mut g = Graph::new(store);
    let root = f(&mut g);
    g.backward(root);
    let analytic: Vec<(crate::ParamId, Vec<f64>)> =
        g.param_grads().into_iter().map(|(id, gr)| (id, gr.to_vec())).collect();
    drop(g);
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let r = f(&mut g);
        g.scalar(r)
    };
    let mut work = store.clone();
    let mut out = GradCheck { max_rel_err: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    for id in store.ids() {
        let n = store.value(id).len();
        let ana = analytic.iter().find(|(i, _)| *i == id).map(|(_, g)| g.as_slice());
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let fp = eval(&work);
            work.value_mut(id).data_mut()[j] = orig - h;
            let fm = eval(&work);
            work.value_mut(id).data_mut()[j] = orig;
            let num = (fp - fm) / (2.0 * h);
            let a = ana.map(|g| g[j]).unwrap_or(0.0);
            let e = rel_err(a, num, 1e-6);
            out.checked += 1;
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst_param = store.get(id).name.clone();
                out.worst_index = j;
            }
        }
    }
    out
}

/// Same as [`check_params`] but for a gradient with respect to a graph input.
/// `f` receives the input node and returns the scalar.
pub fn check_input<F>(x: &crate::Tensor<f64>, f: F, h: f64) -> f64
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Var,
{
    let mut g = Graph::detached();
    let xv = g.input(x.clone());
    let r = f(&mut g, xv);
    g.backward(r);
    let ana = g.grad(xv).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |t: &crate::Tensor<f64>| {
        let mut g = Graph::detached();
        let xv = g.constant(t.clone());
        let r = f(&mut g, xv);
        g.scalar(r)
    };
    let mut work = x.clone();
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        let orig = work.data()[j];
        work.data_mut()[j] = orig + h;
        let fp = eval(&work);
        work.data_mut()[j] = orig - h;
        let fm = eval(&work);
        work.data_mut()[j] = orig;
        worst = worst.max(rel_err(ana[j], (fp - fm) / (2.0 * h), 1e-6));
    }
    worst
}
