use super::{DiffError, NumericArray, Tape, Var};

/// Outcome of comparing tape adjoints with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - b| / max(1, |a|, |b|)` over all coordinates.
    pub max_relative_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn evaluate<F>(build: &F, params: &[NumericArray]) -> Result<(Tape, Vec<Var>, Var), DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.parameter(p.clone())).collect();
    let root = build(&mut tape, &vars)?;
    if !tape.value(root).is_scalar() {
        return Err(DiffError::NonScalarRoot(tape.value(root).shape().to_vec()));
    }
    Ok((tape, vars, root))
}

fn value_at<F>(build: &F, params: &[NumericArray]) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let (tape, _, root) = evaluate(build, params)?;
    Ok(tape.value(root).item())
}

/// Checks the adjoints of `build` against `(f(x+h) - f(x-h)) / 2h` for
/// every coordinate of every parameter.
pub fn check_gradients<F>(
    build: F,
    params: &[NumericArray],
    step: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if !(step > 0.0) {
        return Err(DiffError::InvalidStep(step));
    }
    let (tape, vars, root) = evaluate(&build, params)?;
    let first = tape.value(root).item();
    let second = value_at(&build, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(DiffError::NonDeterministic { first, second });
    }
    let analytic = tape.backward(root)?.take_ordered(&vars);
    drop(tape);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe: Vec<NumericArray> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..grad.len() {
            let original = probe[pi].data()[ci];
            probe[pi].data_mut()[ci] = original + step;
            let up = value_at(&build, &probe)?;
            probe[pi].data_mut()[ci] = original - step;
            let down = value_at(&build, &probe)?;
            probe[pi].data_mut()[ci] = original;

            let fd = (up - down) / (2.0 * step);
            let a = grad.data()[ci];
            let rel = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = rel;
                report.worst = (pi, ci);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
