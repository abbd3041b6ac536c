//! Central finite-difference oracle for tape gradients.

use super::{Result, Tape, Tensor, Var};

/// Gradients smaller than this in magnitude are compared absolutely.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Flat coordinates where the function is not differentiable within `h`.
    pub skipped: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped.len()).sum()
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the tape gradient of `f` with central differences of step `h`.
///
/// A coordinate is skipped when the one-sided slopes at steps `h` and `h/2`
/// disagree in the way a kink does (the gap does not halve with the step).
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn check_gradients<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let f0 = eval(&f, params)?;

    let mut work = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param gradient").clone();
        let mut max_rel_err: f64 = 0.0;
        let mut skipped = Vec::new();
        let mut checked = 0;
        for j in 0..params[pi].len() {
            let x = params[pi].data()[j];
            let at = |v: f64, work: &mut Vec<Tensor>| -> Result<f64> {
                work[pi].data_mut()[j] = v;
                let r = eval(&f, work);
                work[pi].data_mut()[j] = x;
                r
            };
            let fp = at(x + h, &mut work)?;
            let fm = at(x - h, &mut work)?;
            let fp2 = at(x + h / 2.0, &mut work)?;
            let fm2 = at(x - h / 2.0, &mut work)?;

            let gap = (fp - f0) / h - (f0 - fm) / h;
            let gap_half = (fp2 - f0) / (h / 2.0) - (f0 - fm2) / (h / 2.0);
            let scale = ((fp - fm) / (2.0 * h)).abs() + 1e-8;
            if gap.abs() > 1e-4 * scale && (gap - 2.0 * gap_half).abs() > 0.25 * gap.abs() {
                skipped.push(j);
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
            max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
            checked += 1;
        }
        reports.push(ParamCheck { index: pi, max_rel_err, checked, skipped });
    }
    let passed = reports.iter().all(|r| r.max_rel_err < tol);
    Ok(GradCheckReport { params: reports, tol, passed })
}
