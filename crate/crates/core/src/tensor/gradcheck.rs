use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error per input tensor, in input order.
    pub per_input: Vec<f64>,
    /// The coordinate attaining that error, per input.
    pub worst: Vec<CoordinateError>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CoordinateError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor], corrupt: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = if corrupt { Tape::with_corrupted_backward() } else { Tape::new() };
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::NonScalar(tape.value(out).shape().to_vec()));
    }
    Ok((tape, vars, out))
}

/// Central-difference gradient check of a scalar function of `inputs`.
///
/// Relative error per coordinate is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, eps, false)
}

#[doc(hidden)]
pub fn grad_check_with<F>(f: F, inputs: &[Tensor], eps: f64, corrupt_backward: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs, corrupt_backward)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    drop(tape);

    let scalar_at = |probe: &[Tensor]| -> Result<f64> {
        let (tape, _, out) = evaluate(&f, probe, false)?;
        Ok(tape.value(out).data()[0])
    };

    let mut probe = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut worst_coords = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst = CoordinateError::default();
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = scalar_at(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = scalar_at(&probe)?;
            probe[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > worst.rel_error {
                worst = CoordinateError {
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: err,
                };
            }
        }
        per_input.push(worst.rel_error);
        worst_coords.push(worst);
    }
    Ok(GradCheckReport {
        per_input,
        worst: worst_coords,
    })
}
