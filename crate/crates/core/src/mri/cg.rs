use super::{ComplexImage, MriError, NormalOperator, SamplingMask};

/// Output of [`cg_solve`].
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub image: ComplexImage,
    pub iterations: usize,
    /// Final relative residual `‖(AᴴA+λI)m − rhs‖ / ‖rhs‖`.
    pub residual: f64,
    /// Relative residual before the first and after every iteration.
    pub residual_history: Vec<f64>,
}

fn dot(a: &ComplexImage, b: &ComplexImage) -> f64 {
    a.inner(b).0
}

fn axpy(y: &mut ComplexImage, s: f64, x: &ComplexImage) {
    for k in 0..y.len() {
        y.re[k] += s * x.re[k];
        y.im[k] += s * x.im[k];
    }
}

/// Solve `(AᴴA + λI) m = rhs` by conjugate gradients from `m = 0`.
///
/// Stops once the relative residual falls to `tol` or after `max_iters`
/// iterations.
pub fn cg_solve(
    rhs: &ComplexImage,
    mask: &SamplingMask,
    lambda: f64,
    max_iters: usize,
    tol: f64,
) -> Result<CgSolution, MriError> {
    if !(lambda > 0.0) {
        return Err(MriError::NonPositiveLambda(lambda));
    }
    let op = NormalOperator::new(std::sync::Arc::new(mask.clone()));
    let rhs_norm = rhs.norm();
    let mut x = ComplexImage::zeros(rhs.height, rhs.width);
    if rhs_norm == 0.0 {
        return Ok(CgSolution {
            image: x,
            iterations: 0,
            residual: 0.0,
            residual_history: vec![0.0],
        });
    }

    let mut r = rhs.clone();
    let mut p = rhs.clone();
    let mut rr = dot(&r, &r);
    let mut history = vec![rr.sqrt() / rhs_norm];
    let mut iterations = 0;

    while iterations < max_iters && history[iterations] > tol {
        let mut ap = op.apply_image(&p)?;
        axpy(&mut ap, lambda, &p);
        let alpha = rr / dot(&p, &ap);
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rr_new = dot(&r, &r);
        iterations += 1;
        let rel = rr_new.sqrt() / rhs_norm;
        if !rel.is_finite() {
            return Err(MriError::Diverged { iteration: iterations });
        }
        history.push(rel);
        let beta = rr_new / rr;
        for k in 0..p.len() {
            p.re[k] = r.re[k] + beta * p.re[k];
            p.im[k] = r.im[k] + beta * p.im[k];
        }
        rr = rr_new;
    }

    Ok(CgSolution {
        image: x,
        iterations,
        residual: history[iterations],
        residual_history: history,
    })
}
