use super::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor, so entries whose true gradient is ~0 are judged
    /// by absolute error instead.
    pub floor: f64,
    /// Probe at most this many entries per parameter (evenly strided).
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-6, floor: 1e-6, max_entries: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub max_abs_grad: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare reverse-mode gradients of the scalar built by `f` against central
/// differences, for every parameter in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if opts.h <= 0.0 {
        return Err(Error::Config("grad_check step must be positive".into()));
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::Probe(format!("objective is {v} at the probe point")));
        }
        Ok(v)
    };
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::Probe(format!("objective is {} at the probe point", g.scalar(out))));
    }
    let grads = g.backward(out)?;
    let analytic = g.param_grads(&grads, params);

    let mut work = params.clone();
    let mut report = Vec::new();
    for id in params.ids() {
        let n = params.get(id).len();
        let stride = opts.max_entries.map_or(1, |m| n.div_ceil(m.max(1)));
        let mut pc = ParamCheck {
            name: params.name(id).to_string(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_abs_grad: 0.0,
            checked: 0,
        };
        for k in (0..n).step_by(stride) {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + opts.h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - opts.h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let num = (up - down) / (2.0 * opts.h);
            let a = analytic[id.0].data()[k];
            pc.max_rel_err = pc.max_rel_err.max(rel_err(a, num, opts.floor));
            pc.max_abs_err = pc.max_abs_err.max((a - num).abs());
            pc.max_abs_grad = pc.max_abs_grad.max(a.abs());
            pc.checked += 1;
        }
        report.push(pc);
    }
    Ok(GradCheckReport { params: report, tol: opts.tol })
}
