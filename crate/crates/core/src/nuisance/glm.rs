//! Ridge-penalised generalised linear models fitted by Newton's method.
//!
//! All three fitters minimise `NLL(β) + ridge/2 · ‖β‖²` (the intercept is
//! penalised too, which keeps degenerate and separable fits finite). When a
//! Newton system is not positive definite the ridge is escalated by ×10 up to
//! [`MAX_RIDGE`] before giving up.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-8;
pub const MAX_RIDGE: f64 = 1e-2;
pub const MAX_ITER: usize = 100;
/// Relative change in penalised deviance that counts as converged.
pub const TOLERANCE: f64 = 1e-8;

#[inline]
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic regression coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryFit {
    pub coef: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Ridge actually used after any escalation.
    pub ridge: f64,
}

impl BinaryFit {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        logistic(dot(&self.coef, x))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let eta = x * DVector::from_column_slice(&self.coef);
        eta.iter().map(|&e| logistic(e)).collect()
    }
}

/// Multinomial logit with level 0 as reference: `coef` holds `k − 1` rows of
/// length `p`, one linear predictor per non-reference level.
#[derive(Clone, Debug, PartialEq)]
pub struct MultinomialFit {
    pub k: usize,
    pub p: usize,
    pub coef: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub ridge: f64,
}

impl MultinomialFit {
    /// Level probabilities for one feature row, written to `out[..k]`.
    pub fn predict_row_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        for j in 1..self.k {
            out[j] = dot(&self.coef[(j - 1) * self.p..j * self.p], x);
        }
        softmax_in_place(&mut out[..self.k]);
    }

    pub fn predict_row(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        self.predict_row_into(x, &mut out);
        out
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Ridge least squares coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    pub coef: Vec<f64>,
    pub ridge: f64,
}

impl LinearFit {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        dot(&self.coef, x)
    }
}

/// `Xᵀ diag(w) X` through a transposed copy so the product runs on the
/// blocked gemm kernel.
fn weighted_gram(x: &DMatrix<f64>, xt: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xs = x.clone();
    for mut col in xs.column_iter_mut() {
        for (v, wi) in col.iter_mut().zip(w) {
            *v *= wi;
        }
    }
    xt * xs
}

enum NewtonOutcome<T> {
    Done(T),
    Singular,
}

fn escalate<T>(ridge: f64, mut attempt: impl FnMut(f64) -> NewtonOutcome<T>) -> Result<T> {
    let mut ridge = ridge.max(0.0);
    loop {
        match attempt(ridge) {
            NewtonOutcome::Done(fit) => return Ok(fit),
            NewtonOutcome::Singular => {
                ridge = if ridge < DEFAULT_RIDGE { DEFAULT_RIDGE } else { ridge * 10.0 };
                if ridge > MAX_RIDGE * (1.0 + 1e-9) {
                    return Err(Error::Fit(
                        "Newton system singular even at the maximum ridge penalty".into(),
                    ));
                }
                log::debug!("escalating ridge to {ridge:e}");
            }
        }
    }
}

fn check_design(x: &DMatrix<f64>, n_targets: usize) -> Result<()> {
    if x.nrows() != n_targets {
        return Err(Error::Argument(format!(
            "design has {} rows but there are {} targets",
            x.nrows(),
            n_targets
        )));
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Argument("empty design matrix".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite feature value".into()));
    }
    Ok(())
}

fn converged(old: f64, new: f64) -> bool {
    (old - new).abs() / (new.abs() + 0.1) < TOLERANCE
}

/// Ridge-penalised logistic regression by iteratively reweighted least
/// squares with step halving. `targets` must lie in `[0, 1]`.
///
/// Stops when the relative change in penalised deviance drops below
/// [`TOLERANCE`] or after [`MAX_ITER`] iterations; in the latter case the
/// best iterate is returned with `converged == false`.
pub fn fit_binary_glm(x: &DMatrix<f64>, targets: &[f64], ridge: f64) -> Result<BinaryFit> {
    check_design(x, targets.len())?;
    if targets.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::Argument("binary targets must lie in [0, 1]".into()));
    }
    let xt = x.transpose();
    let y = DVector::from_column_slice(targets);
    escalate(ridge, |ridge| binary_newton(x, &xt, &y, ridge))
}

fn binary_objective(eta: &DVector<f64>, y: &DVector<f64>, beta: &DVector<f64>, ridge: f64) -> f64 {
    let nll: f64 = eta.iter().zip(y.iter()).map(|(&e, &t)| softplus(e) - t * e).sum();
    2.0 * nll + ridge * beta.norm_squared()
}

fn binary_newton(
    x: &DMatrix<f64>,
    xt: &DMatrix<f64>,
    y: &DVector<f64>,
    ridge: f64,
) -> NewtonOutcome<BinaryFit> {
    let p = x.ncols();
    let mut beta = DVector::zeros(p);
    let mut eta = x * &beta;
    let mut obj = binary_objective(&eta, y, &beta, ridge);
    let mut iterations = 0;
    let mut done = false;
    while iterations < MAX_ITER {
        iterations += 1;
        let mu: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
        let w: Vec<f64> = mu.iter().map(|&m| m * (1.0 - m)).collect();
        let resid = DVector::from_iterator(mu.len(), y.iter().zip(&mu).map(|(t, m)| t - m));
        let grad = xt * resid - &beta * ridge;
        let mut hess = weighted_gram(x, xt, &w);
        for j in 0..p {
            hess[(j, j)] += ridge;
        }
        let Some(chol) = hess.cholesky() else {
            return NewtonOutcome::Singular;
        };
        let step = chol.solve(&grad);
        if step.iter().any(|v| !v.is_finite()) {
            return NewtonOutcome::Singular;
        }
        let mut t = 1.0;
        let (mut cand, mut cand_eta, mut cand_obj);
        loop {
            cand = &beta + &step * t;
            cand_eta = x * &cand;
            cand_obj = binary_objective(&cand_eta, y, &cand, ridge);
            if cand_obj <= obj + 1e-12 * obj.abs() || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        let stop = converged(obj, cand_obj);
        if cand_obj <= obj {
            beta = cand;
            eta = cand_eta;
            obj = cand_obj;
        }
        if stop {
            done = true;
            break;
        }
    }
    NewtonOutcome::Done(BinaryFit {
        coef: beta.as_slice().to_vec(),
        converged: done,
        iterations,
        ridge,
    })
}

/// Ridge-penalised multinomial logit (softmax link, level 0 reference) by
/// full Newton iteration. `targets[i] < k`.
pub fn fit_multinomial(
    x: &DMatrix<f64>,
    targets: &[usize],
    k: usize,
    ridge: f64,
) -> Result<MultinomialFit> {
    check_design(x, targets.len())?;
    if k < 2 {
        return Err(Error::Argument(format!("need at least two levels, got k={k}")));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Argument(format!("target level {t} out of range for k={k}")));
    }
    let xt = x.transpose();
    escalate(ridge, |ridge| multinomial_newton(x, &xt, targets, k, ridge))
}

/// Row-major `n × k` probabilities and the penalised objective.
fn multinomial_state(
    eta: &DMatrix<f64>,
    targets: &[usize],
    coef: &DVector<f64>,
    ridge: f64,
) -> (Vec<f64>, f64) {
    let n = eta.nrows();
    let k = eta.ncols() + 1;
    let mut probs = vec![0.0; n * k];
    let mut nll = 0.0;
    for i in 0..n {
        let row = &mut probs[i * k..(i + 1) * k];
        row[0] = 0.0;
        for j in 1..k {
            row[j] = eta[(i, j - 1)];
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        nll += lse - row[targets[i]];
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    (probs, 2.0 * nll + ridge * coef.norm_squared())
}

fn multinomial_newton(
    x: &DMatrix<f64>,
    xt: &DMatrix<f64>,
    targets: &[usize],
    k: usize,
    ridge: f64,
) -> NewtonOutcome<MultinomialFit> {
    let (n, p) = x.shape();
    let q = k - 1;
    let dim = q * p;
    // Column-major p × q view of the flat coefficient vector.
    let as_matrix = |c: &DVector<f64>| DMatrix::from_column_slice(p, q, c.as_slice());
    let mut coef = DVector::zeros(dim);
    let (mut probs, mut obj) = multinomial_state(&(x * as_matrix(&coef)), targets, &coef, ridge);
    let mut iterations = 0;
    let mut done = false;
    while iterations < MAX_ITER {
        iterations += 1;
        let mut resid = DMatrix::zeros(n, q);
        for i in 0..n {
            for j in 0..q {
                let indicator = if targets[i] == j + 1 { 1.0 } else { 0.0 };
                resid[(i, j)] = indicator - probs[i * k + j + 1];
            }
        }
        let grad_m = xt * resid;
        let grad = DVector::from_column_slice(grad_m.as_slice()) - &coef * ridge;

        let mut hess = DMatrix::zeros(dim, dim);
        let mut w = vec![0.0; n];
        for j in 0..q {
            for l in j..q {
                for i in 0..n {
                    let pj = probs[i * k + j + 1];
                    let pl = probs[i * k + l + 1];
                    w[i] = if j == l { pj * (1.0 - pj) } else { -pj * pl };
                }
                let block = weighted_gram(x, xt, &w);
                hess.view_mut((j * p, l * p), (p, p)).copy_from(&block);
                if l != j {
                    hess.view_mut((l * p, j * p), (p, p)).copy_from(&block.transpose());
                }
            }
        }
        for d in 0..dim {
            hess[(d, d)] += ridge;
        }
        let Some(chol) = hess.cholesky() else {
            return NewtonOutcome::Singular;
        };
        let step = chol.solve(&grad);
        if step.iter().any(|v| !v.is_finite()) {
            return NewtonOutcome::Singular;
        }
        let mut t = 1.0;
        let (mut cand, mut cand_eta, mut cand_state);
        loop {
            cand = &coef + &step * t;
            cand_eta = x * as_matrix(&cand);
            cand_state = multinomial_state(&cand_eta, targets, &cand, ridge);
            if cand_state.1 <= obj + 1e-12 * obj.abs() || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        let stop = converged(obj, cand_state.1);
        if cand_state.1 <= obj {
            coef = cand;
            probs = cand_state.0;
            obj = cand_state.1;
        }
        if stop {
            done = true;
            break;
        }
    }
    // Stored level-major: coefficients of level j+1 are contiguous.
    NewtonOutcome::Done(MultinomialFit {
        k,
        p,
        coef: coef.as_slice().to_vec(),
        converged: done,
        iterations,
        ridge,
    })
}

/// Ridge least squares via the normal equations.
pub fn fit_linear(x: &DMatrix<f64>, targets: &[f64], ridge: f64) -> Result<LinearFit> {
    check_design(x, targets.len())?;
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Argument("non-finite target".into()));
    }
    let xt = x.transpose();
    let gram = &xt * x;
    let rhs = &xt * DVector::from_column_slice(targets);
    escalate(ridge, |ridge| {
        let mut h = gram.clone();
        for j in 0..h.ncols() {
            h[(j, j)] += ridge;
        }
        match h.cholesky() {
            Some(chol) => {
                let coef = chol.solve(&rhs);
                if coef.iter().all(|v| v.is_finite()) {
                    NewtonOutcome::Done(LinearFit {
                        coef: coef.as_slice().to_vec(),
                        ridge,
                    })
                } else {
                    NewtonOutcome::Singular
                }
            }
            None => NewtonOutcome::Singular,
        }
    })
}
