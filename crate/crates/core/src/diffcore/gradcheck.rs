//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only ever calls the forward closure; it never reads the tape's
//! backward rules, so it can check them.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor of [`rel_err`]; below it the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-7;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_at: String,
}

impl Report {
    pub fn merge(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_err(analytic, numeric);
        if e > self.worst_rel || self.worst_at.is_empty() {
            self.worst_rel = e;
            self.worst_at = format!("{name}[{index}]: tape {analytic:e} vs fd {numeric:e}");
        }
    }
}

/// Compare tape gradients of `f` w.r.t. each input against central differences.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<Report>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), true)).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };
    let mut report = Report::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            report.merge(
                &format!("input{k}"),
                i,
                analytic[i],
                (up - down) / (2.0 * step),
            );
        }
    }
    Ok(report)
}
