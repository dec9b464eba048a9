use std::fmt;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter block (evenly strided).
    pub max_per_block: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_per_block: usize::MAX,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(move |b| b.rel_error >= self.tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "max rel error {:.3e} (tol {:.1e})", self.max_rel_error, self.tol)?;
        for b in &self.blocks {
            writeln!(
                f,
                "  {:<32} n={:<5} rel={:.3e} |g|={:.3e}",
                b.name, b.checked, b.rel_error, b.analytic_norm
            )?;
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Per block, the error is `|g_a - g_n| / max(|g_a| + |g_n|, 1e-8)` over the
/// checked coordinates, which stays meaningful when single entries are near 0.
pub fn grad_check<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let analytic = g.param_grads(&grads, store);
    drop(g);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        Ok(g.value(out).item())
    };

    let mut blocks = Vec::new();
    let mut max_rel: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let stride = n.div_ceil(opts.max_per_block.max(1)).max(1);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut checked = 0;
        for j in (0..n).step_by(stride) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + opts.eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig - opts.eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * opts.eps);
            let ana = analytic[id.index()].data()[j];
            diff2 += (num - ana) * (num - ana);
            a2 += ana * ana;
            n2 += num * num;
            checked += 1;
        }
        let rel = diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(1e-8);
        max_rel = max_rel.max(rel);
        blocks.push(BlockReport {
            name: store.name(id).to_string(),
            checked,
            rel_error: rel,
            analytic_norm: a2.sqrt(),
        });
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        blocks,
        max_rel_error: max_rel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::graph::CustomOp;
    use crate::numcore::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        let x = s
            .add("x", Tensor::matrix(2, 2, vec![0.3, -1.2, 2.5, 0.7]))
            .unwrap();
        let a = Tensor::matrix(2, 2, vec![1.0, 0.5, -0.25, 2.0]);
        let report = grad_check(
            &mut s,
            |g, s| {
                let xv = g.param(s, x);
                let av = g.constant(a.clone());
                let y = g.matmul(av, xv)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report}");
    }

    /// Square with a backward rule that forgets the factor 2.
    struct BrokenSquare;

    impl CustomOp for BrokenSquare {
        fn name(&self) -> &'static str {
            "broken_square"
        }
        fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
            vec![Some(inputs[0].zip_map(grad, |x, g| x * g).unwrap())]
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0])).unwrap();
        let report = grad_check(
            &mut s,
            |g, s| {
                let xv = g.param(s, x);
                let val = g.value(xv).map(|v| v * v);
                let y = g.custom(&[xv], val, Box::new(BrokenSquare));
                Ok(g.sum(y))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error > 1e-2, "{report}");
        assert_eq!(report.failures().count(), 1);
    }
}
