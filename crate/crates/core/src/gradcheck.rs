//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            scale_floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks the tape gradient of a scalar computation against central
/// differences for every entry of every parameter.
pub fn grad_check<F>(params: &[Tensor<f64>], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar computation, got shape {:?}",
                tape.shape(out)
            )));
        }
        let loss = tape.value(out).item();
        if !want_grad {
            return Ok((loss, None));
        }
        let mut g = tape.backward(out)?;
        let grads = vars
            .iter()
            .zip(ps)
            .map(|(&v, p)| {
                g.take(v)
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect();
        Ok((loss, Some(grads)))
    };
    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("requested gradients");
    compare_with_differences(params, &analytic, cfg, |ps| eval(ps, false).map(|(l, _)| l))
}

/// Like [`grad_check`] for a computation over every parameter of `store`.
pub fn grad_check_store<F>(
    store: &ParamStore<f64>,
    cfg: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Ctx<'a, f64>) -> Result<Var>,
{
    let all = vec![true; store.layout().len()];
    let mut ctx = Ctx::new(store, Some(&all));
    let out = f(&mut ctx)?;
    if ctx.tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar computation, got shape {:?}",
            ctx.tape.shape(out)
        )));
    }
    let mut g = ctx.tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = ctx
        .param_grads(&mut g)
        .into_iter()
        .zip(store.tensors())
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    drop(ctx);
    let layout = store.layout().clone();
    compare_with_differences(store.tensors(), &analytic, cfg, |ps| {
        let s = ParamStore::from_tensors(layout.clone(), ps.to_vec())?;
        let mut ctx = Ctx::new(&s, None);
        let out = f(&mut ctx)?;
        Ok(ctx.tape.value(out).item())
    })
}

/// Compares `analytic` against central differences of `loss` around `params`.
pub fn compare_with_differences<L>(
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    cfg: GradCheckConfig,
    loss: L,
) -> Result<GradCheckReport>
where
    L: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::Contract(
            "one gradient per parameter expected".into(),
        ));
    }
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        n_checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        tolerance: cfg.tolerance,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::Contract(format!(
                "gradient {pi} has the wrong shape"
            )));
        }
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + cfg.step;
            let up = loss(&work)?;
            work[pi].data_mut()[ei] = orig - cfg.step;
            let down = loss(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad.data()[ei];
            let rel = relative_error(a, numeric, cfg.scale_floor);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((pi, ei));
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}
