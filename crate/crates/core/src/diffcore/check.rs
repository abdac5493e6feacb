use super::{DiffError, Tape, Tensor, Var};

fn eval<F>(f: &F, x: &Tensor) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = f(&mut tape, xv)?;
    let shape = tape.shape(out);
    if shape.iter().product::<usize>() != 1 {
        return Err(DiffError::NonScalarLoss(shape.to_vec()));
    }
    Ok(tape.scalar(out))
}

/// Central-difference gradient of a scalar tape function at `x`.
pub fn central_difference<F>(f: &F, x: &Tensor, eps: f64) -> Result<Vec<f64>, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    if !(eps > 0.0) {
        return Err(DiffError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let base = x.values().to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = eval(f, &Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = eval(f, &Tensor::new(x.shape().to_vec(), minus)?)?;
        let d = (fp - fm) / (2.0 * eps);
        if !d.is_finite() {
            return Err(DiffError::NonFinite { op: "grad_check" });
        }
        out.push(d);
    }
    Ok(out)
}

/// Largest per-coordinate discrepancy between the tape gradient of `f` at `x`
/// and a central difference with step `eps`.
///
/// The discrepancy is `|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1)`: relative
/// for gradients above one, absolute below.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    let x = x.clone().with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = central_difference(&f, &x, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max))
}
