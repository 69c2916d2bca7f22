use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{BaselineError, FeatureMatrix, PseudoLabelMatrix};

const LOG_FLOOR: f64 = 1e-12;
const VAR_FLOOR: f64 = 1e-6;
const LOGME_TOL: f64 = 1e-6;
const LOGME_MAX_ITER: usize = 100;

/// Log expected empirical prediction: the mean log-likelihood of the target
/// labels under the empirical conditional `P(y | z)` composed with the source
/// model's class probabilities.
pub fn leep(theta: &PseudoLabelMatrix, labels: &[usize]) -> Result<f64, BaselineError> {
    let n = theta.rows();
    if labels.len() != n {
        return Err(BaselineError::Invalid(format!(
            "{} labels for {n} pseudo-label rows",
            labels.len()
        )));
    }
    let ky = labels.iter().max().map_or(0, |m| m + 1);
    let kz = theta.cols();
    let mut joint = vec![0.0; ky * kz];
    for (i, &y) in labels.iter().enumerate() {
        for (z, p) in theta.row(i).iter().enumerate() {
            joint[y * kz + z] += p / n as f64;
        }
    }
    let marginal: Vec<f64> = (0..kz).map(|z| (0..ky).map(|y| joint[y * kz + z]).sum()).collect();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let eep: f64 = theta
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(z, _)| marginal[z] > 0.0)
                .map(|(z, p)| joint[y * kz + z] / marginal[z] * p)
                .sum();
            eep.max(LOG_FLOOR).ln()
        })
        .sum();
    Ok(total / n as f64)
}

/// Negative conditional entropy `-H(Y | Z)` in nats, from hard source labels
/// `z` and target labels `y`.
pub fn nce(z: &[usize], y: &[usize]) -> Result<f64, BaselineError> {
    if z.len() != y.len() || z.is_empty() {
        return Err(BaselineError::Invalid(format!(
            "label sequences of length {} and {}",
            z.len(),
            y.len()
        )));
    }
    let n = z.len() as f64;
    let kz = z.iter().max().map_or(0, |m| m + 1);
    let ky = y.iter().max().map_or(0, |m| m + 1);
    let mut joint = vec![0usize; kz * ky];
    let mut marg = vec![0usize; kz];
    for (&a, &b) in z.iter().zip(y) {
        joint[a * ky + b] += 1;
        marg[a] += 1;
    }
    let h: f64 = joint
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(idx, &c)| {
            let p = c as f64 / n;
            let pz = marg[idx / ky] as f64 / n;
            -p * (p / pz).ln()
        })
        .sum();
    Ok(-h)
}

fn check_shape(f: &FeatureMatrix) -> Result<(), BaselineError> {
    if f.cols() > f.rows() {
        return Err(BaselineError::Invalid(format!(
            "feature dimension {} exceeds sample count {}",
            f.cols(),
            f.rows()
        )));
    }
    Ok(())
}

fn as_matrix(f: &FeatureMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(f.rows(), f.cols(), f.values())
}

fn centered_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c.transpose() * &c / n
}

/// `tr(pinv(cov(f)) cov(g))` where `g` replaces every feature row with its
/// class mean. A tiny ridge (`1e-8` of the mean variance) keeps the inverse
/// defined when features are collinear.
pub fn hscore(f: &FeatureMatrix) -> Result<f64, BaselineError> {
    check_shape(f)?;
    let x = as_matrix(f);
    let d = f.cols();
    let cov_f = centered_cov(&x);

    let mut sums = DMatrix::<f64>::zeros(f.num_classes(), d);
    let mut counts = vec![0usize; f.num_classes()];
    for (i, &y) in f.labels().iter().enumerate() {
        let mut row = sums.row_mut(y);
        row += x.row(i);
        counts[y] += 1;
    }
    let mut g = DMatrix::<f64>::zeros(f.rows(), d);
    for (i, &y) in f.labels().iter().enumerate() {
        g.set_row(i, &(sums.row(y) / counts[y] as f64));
    }
    let cov_g = centered_cov(&g);

    let tr = cov_f.trace();
    if tr <= 0.0 {
        // Constant features carry no information about the labels.
        return Ok(0.0);
    }
    let lambda = 1e-8 * tr / d as f64;
    let reg = cov_f + DMatrix::<f64>::identity(d, d) * lambda;
    let solved = match reg.clone().cholesky() {
        Some(ch) => ch.solve(&cov_g),
        None => reg
            .lu()
            .solve(&cov_g)
            .ok_or_else(|| BaselineError::Degenerate("feature covariance is singular".into()))?,
    };
    Ok(solved.trace())
}

/// Result of one LogME evidence maximisation for a single target column.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMeFit {
    pub alpha: f64,
    pub beta: f64,
    /// Log evidence per sample after each update, starting from the initial
    /// `alpha = beta = 1`.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

impl LogMeFit {
    pub fn evidence(&self) -> f64 {
        *self.trace.last().expect("trace starts with the initial evidence")
    }
}

struct Spectrum {
    n: usize,
    /// Eigenvalues of `F^T F`.
    s: Vec<f64>,
    v: DMatrix<f64>,
}

impl Spectrum {
    fn new(x: &DMatrix<f64>) -> Result<Self, BaselineError> {
        let eig = SymmetricEigen::new(x.transpose() * x);
        let s: Vec<f64> = eig.eigenvalues.iter().map(|&e| e.max(0.0)).collect();
        if s.iter().any(|e| !e.is_finite()) {
            return Err(BaselineError::Degenerate("non-finite feature spectrum".into()));
        }
        if s.iter().all(|&e| e == 0.0) {
            return Err(BaselineError::Degenerate("features are identically zero".into()));
        }
        Ok(Self {
            n: x.nrows(),
            s,
            v: eig.eigenvectors,
        })
    }
}

/// Log marginal likelihood per sample of a Bayesian linear model with prior
/// precision `alpha` and noise precision `beta`.
fn log_evidence(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sp: &Spectrum,
    proj: &DVector<f64>,
    alpha: f64,
    beta: f64,
) -> (f64, f64, f64) {
    let n = sp.n as f64;
    let d = sp.s.len() as f64;
    let coef = DVector::from_iterator(
        sp.s.len(),
        sp.s.iter()
            .zip(proj.iter())
            .map(|(&s, &p)| beta * p / (alpha + beta * s)),
    );
    let m = &sp.v * &coef;
    let m_sq = coef.norm_squared();
    let res = (y - x * &m).norm_squared();
    let log_det: f64 = sp.s.iter().map(|&s| (alpha + beta * s).ln()).sum();
    let ev = 0.5 * d * alpha.ln() + 0.5 * n * beta.ln()
        - 0.5 * log_det
        - 0.5 * beta * res
        - 0.5 * alpha * m_sq
        - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
    (ev / n, m_sq, res)
}

fn logme_column(x: &DMatrix<f64>, sp: &Spectrum, y: &DVector<f64>) -> Result<LogMeFit, BaselineError> {
    let proj = sp.v.transpose() * (x.transpose() * y);
    let n = sp.n as f64;
    let (mut alpha, mut beta) = (1.0f64, 1.0f64);
    let (ev, mut m_sq, mut res) = log_evidence(x, y, sp, &proj, alpha, beta);
    let mut trace = vec![ev];
    let mut iterations = 0;
    while iterations < LOGME_MAX_ITER {
        iterations += 1;
        let gamma: f64 = sp.s.iter().map(|&s| beta * s / (alpha + beta * s)).sum();
        if res <= 0.0 {
            return Err(BaselineError::Degenerate(
                "evidence is unbounded: features fit the labels exactly".into(),
            ));
        }
        if m_sq <= 0.0 {
            // The prior precision has run off to infinity: the column is best
            // explained by noise alone. Report the limiting evidence.
            let beta = n / y.norm_squared();
            trace.push(0.5 * beta.ln() - 0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln());
            return Ok(LogMeFit {
                alpha: f64::INFINITY,
                beta,
                trace,
                iterations,
            });
        }
        let new_alpha = gamma / m_sq;
        let new_beta = (n - gamma) / res;
        if !(new_alpha.is_finite() && new_beta.is_finite() && new_alpha > 0.0 && new_beta > 0.0) {
            return Err(BaselineError::Degenerate(format!(
                "precision update diverged (alpha {new_alpha}, beta {new_beta})"
            )));
        }
        let done = ((new_alpha - alpha) / alpha).abs() < LOGME_TOL && ((new_beta - beta) / beta).abs() < LOGME_TOL;
        alpha = new_alpha;
        beta = new_beta;
        let (ev, ms, r) = log_evidence(x, y, sp, &proj, alpha, beta);
        trace.push(ev);
        m_sq = ms;
        res = r;
        if done {
            break;
        }
    }
    Ok(LogMeFit {
        alpha,
        beta,
        trace,
        iterations,
    })
}

/// One-vs-all LogME fits, one per target class.
pub fn logme_with_trace(f: &FeatureMatrix) -> Result<Vec<LogMeFit>, BaselineError> {
    check_shape(f)?;
    let x = as_matrix(f);
    let sp = Spectrum::new(&x)?;
    (0..f.num_classes())
        .map(|c| {
            let y = DVector::from_iterator(f.rows(), f.labels().iter().map(|&l| if l == c { 1.0 } else { 0.0 }));
            logme_column(&x, &sp, &y)
        })
        .collect()
}

/// Mean per-sample log evidence over the one-vs-all target columns.
pub fn logme(f: &FeatureMatrix) -> Result<f64, BaselineError> {
    let fits = logme_with_trace(f)?;
    Ok(fits.iter().map(LogMeFit::evidence).sum::<f64>() / fits.len() as f64)
}

/// Bhattacharyya distance between two diagonal Gaussians.
pub fn bhattacharyya_diag(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> f64 {
    mu1.iter()
        .zip(var1)
        .zip(mu2.iter().zip(var2))
        .map(|((&m1, &v1), (&m2, &v2))| {
            let v = 0.5 * (v1 + v2);
            (m1 - m2).powi(2) / (8.0 * v) + 0.5 * (v / (v1 * v2).sqrt()).ln()
        })
        .sum()
}

/// Gaussian Bhattacharyya coefficient: `-sum_{i<j} exp(-BD(i, j))` over
/// per-class diagonal Gaussians. Zero means fully separated classes.
pub fn gbc(f: &FeatureMatrix) -> Result<f64, BaselineError> {
    let d = f.cols();
    let k = f.num_classes();
    let mut counts = vec![0usize; k];
    let mut mean = vec![0.0; k * d];
    for (i, &y) in f.labels().iter().enumerate() {
        counts[y] += 1;
        for (m, v) in mean[y * d..(y + 1) * d].iter_mut().zip(f.row(i)) {
            *m += v;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c < 2) {
        return Err(BaselineError::Invalid(format!(
            "class {c} needs at least two samples to estimate a variance"
        )));
    }
    for c in 0..k {
        for m in &mut mean[c * d..(c + 1) * d] {
            *m /= counts[c] as f64;
        }
    }
    let mut var = vec![0.0; k * d];
    for (i, &y) in f.labels().iter().enumerate() {
        for j in 0..d {
            var[y * d + j] += (f.row(i)[j] - mean[y * d + j]).powi(2);
        }
    }
    for c in 0..k {
        for v in &mut var[c * d..(c + 1) * d] {
            *v = (*v / counts[c] as f64).max(VAR_FLOOR);
        }
    }
    let mut score = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            let bd = bhattacharyya_diag(
                &mean[a * d..(a + 1) * d],
                &var[a * d..(a + 1) * d],
                &mean[b * d..(b + 1) * d],
                &var[b * d..(b + 1) * d],
            );
            score -= (-bd).exp();
        }
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(cols: usize, values: Vec<f64>, labels: Vec<usize>) -> FeatureMatrix {
        let k = labels.iter().max().unwrap() + 1;
        FeatureMatrix::new(cols, values, labels, k).unwrap()
    }

    #[test]
    fn hscore_two_points() {
        // f = [-1, 1] with distinct labels: cov_f = cov_g = 1.
        let f = fm(1, vec![-1.0, 1.0], vec![0, 1]);
        assert!((hscore(&f).unwrap() - 1.0).abs() < 1e-6);
        // Same-label features: cov_g = 0.
        let f = fm(1, vec![-1.0, 1.0, -1.0, 1.0], vec![0, 0, 1, 1]);
        assert!(hscore(&f).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hscore_scale_invariant() {
        let f = fm(
            2,
            vec![0.3, 1.0, -0.7, 2.0, 1.1, -0.4, 0.2, 0.9, -1.5, 0.1],
            vec![0, 1, 0, 1, 1],
        );
        let a = hscore(&f).unwrap();
        let b = hscore(&f.scaled(5.0)).unwrap();
        assert!((a - b).abs() < 1e-6 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn leep_uninformative_pseudo_labels() {
        let p = PseudoLabelMatrix::new(2, vec![0.5; 8]).unwrap();
        let v = leep(&p, &[0, 1, 0, 1]).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn leep_perfect_pseudo_labels() {
        let p = PseudoLabelMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(leep(&p, &[1, 0, 1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn nce_cases() {
        assert!(nce(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap() - (-(2f64.ln())) < 1e-12);
        assert!(nce(&[1, 0, 2], &[0, 1, 1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gbc_known_distance() {
        // Class 0 at {-1, 1} (mean 0, var 1), class 1 at {0, 2} (mean 1, var 1).
        let f = fm(1, vec![-1.0, 1.0, 0.0, 2.0], vec![0, 0, 1, 1]);
        assert!((gbc(&f).unwrap() + (-0.125f64).exp()).abs() < 1e-12);
        let same = fm(1, vec![-1.0, 1.0, -1.0, 1.0], vec![0, 0, 1, 1]);
        assert!((gbc(&same).unwrap() + 1.0).abs() < 1e-12);
        let far = fm(1, vec![-1.0, 1.0, 199.0, 201.0], vec![0, 0, 1, 1]);
        assert!(gbc(&far).unwrap() > -1e-10);
    }

    #[test]
    fn gbc_needs_two_per_class() {
        let f = fm(1, vec![0.0, 1.0, 2.0], vec![0, 1, 1]);
        assert!(gbc(&f).is_err());
    }

    #[test]
    fn wide_features_are_rejected() {
        let f = fm(3, vec![0.0, 1.0, 2.0, 1.0, 0.0, 3.0], vec![0, 1]);
        assert!(hscore(&f).is_err());
        assert!(logme(&f).is_err());
    }

    #[test]
    fn logme_zero_features_is_degenerate() {
        let f = fm(2, vec![0.0; 8], vec![0, 1, 0, 1]);
        assert!(matches!(logme(&f), Err(BaselineError::Degenerate(_))));
    }
}
