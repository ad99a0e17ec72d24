//! Central finite-difference verification of analytic gradients (f64 only).

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Something with differentiable scalar output over a set of named leaves.
pub trait GradCheckTarget {
    /// `(name, element count)` per leaf.
    fn leaves(&self) -> Vec<(String, usize)>;
    fn get(&self, leaf: usize, index: usize) -> f64;
    fn set(&mut self, leaf: usize, index: usize, value: f64);
    fn loss(&mut self) -> Result<f64>;
    /// Analytic gradient of the loss for every leaf, in `leaves()` order.
    fn gradients(&mut self) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so gradients that
    /// are zero up to rounding do not count as failures.
    pub floor: f64,
    /// Elements probed per leaf, evenly spaced; `None` probes all.
    pub probes_per_leaf: Option<usize>,
    /// Skip elements whose current value is within this distance of zero.
    pub min_abs_value: Option<f64>,
    /// Skip probes whose difference quotient changes between `step` and
    /// `step / 2`, i.e. where the stencil straddles a kink.
    pub kink_guard: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-6,
            floor: 1e-4,
            probes_per_leaf: None,
            min_abs_value: None,
            kink_guard: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub leaf: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

fn probe_indices(numel: usize, probes: Option<usize>) -> Vec<usize> {
    match probes {
        Some(k) if k < numel => (0..k).map(|j| (2 * j + 1) * numel / (2 * k)).collect(),
        _ => (0..numel).collect(),
    }
}

fn difference<G: GradCheckTarget + ?Sized>(t: &mut G, leaf: usize, i: usize, h: f64) -> Result<f64> {
    let x = t.get(leaf, i);
    t.set(leaf, i, x + h);
    let up = t.loss();
    t.set(leaf, i, x - h);
    let down = t.loss();
    t.set(leaf, i, x);
    Ok((up? - down?) / (2.0 * h))
}

pub fn grad_check<G: GradCheckTarget + ?Sized>(target: &mut G, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let analytic = target.gradients()?;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(opts.floor);
    let mut report = GradCheckReport::default();
    for (leaf, (name, numel)) in target.leaves().into_iter().enumerate() {
        for i in probe_indices(numel, opts.probes_per_leaf) {
            if opts
                .min_abs_value
                .is_some_and(|m| target.get(leaf, i).abs() <= m)
            {
                report.skipped += 1;
                continue;
            }
            let numeric = difference(target, leaf, i, opts.step)?;
            if opts.kink_guard {
                let half = difference(target, leaf, i, opts.step / 2.0)?;
                if rel(numeric, half) > opts.tolerance {
                    report.skipped += 1;
                    continue;
                }
            }
            let a = analytic[leaf][i];
            let err = rel(a, numeric);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
            if err > opts.tolerance {
                report.failures.push(Mismatch {
                    leaf: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}

/// Adapter that checks a graph-building closure over explicit input leaves.
pub struct FnTarget<F> {
    leaves: Vec<(String, Tensor<f64>)>,
    build: F,
}

impl<F> FnTarget<F>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    pub fn new(leaves: Vec<(String, Tensor<f64>)>, build: F) -> Self {
        FnTarget { leaves, build }
    }

    fn run(&mut self) -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = self
            .leaves
            .iter()
            .map(|(_, t)| g.input(t.clone().with_requires_grad(true)))
            .collect::<Result<Vec<_>>>()?;
        let out = (self.build)(&mut g, &vars)?;
        Ok((g, vars, out))
    }
}

impl<F> GradCheckTarget for FnTarget<F>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    fn leaves(&self) -> Vec<(String, usize)> {
        self.leaves
            .iter()
            .map(|(n, t)| (n.clone(), t.numel()))
            .collect()
    }

    fn get(&self, leaf: usize, index: usize) -> f64 {
        self.leaves[leaf].1.data()[index]
    }

    fn set(&mut self, leaf: usize, index: usize, value: f64) {
        self.leaves[leaf].1.data_mut()[index] = value;
    }

    fn loss(&mut self) -> Result<f64> {
        let (g, _, out) = self.run()?;
        Ok(g.item(out))
    }

    fn gradients(&mut self) -> Result<Vec<Vec<f64>>> {
        let (mut g, vars, out) = self.run()?;
        g.backward(out)?;
        Ok(vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
            })
            .collect())
    }
}
