//! Weighted norm-of-residual costs with a risk-sensitive exponential
//! transform, and their analytic gradients and Gauss–Newton Hessians.
//!
//! The base cost is `l = Σ wᵢ nᵢ(rᵢ)` over residual slices `rᵢ`; the running
//! cost is `c = ρ(l; R) = (e^{R l} − 1) / R`, with `ρ(l; 0) = l`.
//!
//! Norm definitions (all vanish with zero gradient at the origin):
//!
//! | kind                | `n(r)`                         |
//! |---------------------|--------------------------------|
//! | `quadratic`         | `rᵀ W r` (`W = I` by default)  |
//! | `smooth-abs`        | `Σ (√(rᵢ² + p²) − p)`          |
//! | `hyperbolic-cosine` | `Σ (cosh(p rᵢ) − 1) / p`       |

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::serde_util::opt_matrix_rows;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Norm {
    Quadratic {
        #[serde(
            default,
            with = "opt_matrix_rows",
            skip_serializing_if = "Option::is_none"
        )]
        weight_matrix: Option<DMatrix<f64>>,
    },
    SmoothAbs {
        p: f64,
    },
    HyperbolicCosine {
        p: f64,
    },
}

impl Norm {
    pub fn quadratic() -> Self {
        Norm::Quadratic { weight_matrix: None }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Norm::Quadratic { weight_matrix: Some(w) } => {
                if w.nrows() != dim || w.ncols() != dim {
                    return Err(Error::Dimension {
                        what: "quadratic weight matrix",
                        expected: dim,
                        got: w.nrows(),
                    });
                }
                if (w - w.transpose()).amax() > 1e-12 * (1.0 + w.amax()) {
                    return Err(Error::InvalidConfig("weight matrix must be symmetric".into()));
                }
                if w.clone().cholesky().is_none() {
                    return Err(Error::InvalidConfig("weight matrix must be positive definite".into()));
                }
                Ok(())
            }
            Norm::Quadratic { weight_matrix: None } => Ok(()),
            Norm::SmoothAbs { p } | Norm::HyperbolicCosine { p } => {
                if *p > 0.0 && p.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig("norm parameter p must be positive".into()))
                }
            }
        }
    }

    pub fn value(&self, r: &[f64]) -> f64 {
        match self {
            Norm::Quadratic { weight_matrix: None } => r.iter().map(|v| v * v).sum(),
            Norm::Quadratic { weight_matrix: Some(w) } => {
                let rv = DVector::from_column_slice(r);
                rv.dot(&(w * &rv))
            }
            Norm::SmoothAbs { p } => r.iter().map(|v| (v * v + p * p).sqrt() - p).sum(),
            Norm::HyperbolicCosine { p } => r.iter().map(|v| ((p * v).cosh() - 1.0) / p).sum(),
        }
    }

    /// Value, gradient and Hessian, all in closed form.
    pub fn eval(&self, r: &[f64]) -> NormEval {
        let n = r.len();
        match self {
            Norm::Quadratic { weight_matrix } => {
                let rv = DVector::from_column_slice(r);
                let w = weight_matrix.clone().unwrap_or_else(|| DMatrix::identity(n, n));
                let wr = &w * &rv;
                NormEval {
                    value: rv.dot(&wr),
                    gradient: wr * 2.0,
                    hessian: w * 2.0,
                }
            }
            Norm::SmoothAbs { p } => {
                let mut eval = NormEval::zeros(n);
                for (i, v) in r.iter().enumerate() {
                    let s = (v * v + p * p).sqrt();
                    eval.value += s - p;
                    eval.gradient[i] = v / s;
                    eval.hessian[(i, i)] = p * p / (s * s * s);
                }
                eval
            }
            Norm::HyperbolicCosine { p } => {
                let mut eval = NormEval::zeros(n);
                for (i, v) in r.iter().enumerate() {
                    let z = p * v;
                    eval.value += (z.cosh() - 1.0) / p;
                    eval.gradient[i] = z.sinh();
                    eval.hessian[(i, i)] = p * z.cosh();
                }
                eval
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl NormEval {
    fn zeros(n: usize) -> Self {
        Self {
            value: 0.0,
            gradient: DVector::zeros(n),
            hessian: DMatrix::zeros(n, n),
        }
    }
}

/// One weighted norm over a contiguous slice of the model residual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTerm {
    pub name: String,
    pub weight: f64,
    pub norm: Norm,
    /// First residual index of this term.
    pub offset: usize,
    /// Number of residual entries.
    pub dim: usize,
}

impl CostTerm {
    pub fn new(name: impl Into<String>, weight: f64, norm: Norm, offset: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            weight,
            norm,
            offset,
            dim,
        }
    }

    fn slice<'a>(&self, residual: &'a [f64]) -> &'a [f64] {
        &residual[self.offset..self.offset + self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub terms: Vec<CostTerm>,
    #[serde(default)]
    pub risk: f64,
}

/// Everything the derivative-based planners need about `c` at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct CostDerivatives {
    /// Base cost `l`.
    pub base: f64,
    /// Running cost `c = ρ(l; R)`.
    pub cost: f64,
    pub cx: DVector<f64>,
    pub cu: DVector<f64>,
    pub cxx: DMatrix<f64>,
    pub cuu: DMatrix<f64>,
    pub cxu: DMatrix<f64>,
}

/// `ρ(l; R) = (e^{R l} − 1) / R`, exactly `l` when `R = 0`.
pub fn risk_transform(l: f64, risk: f64) -> f64 {
    if risk == 0.0 {
        l
    } else {
        (risk * l).exp_m1() / risk
    }
}

/// `∂ρ/∂l = e^{R l}`.
pub fn risk_slope(l: f64, risk: f64) -> f64 {
    if risk == 0.0 {
        1.0
    } else {
        (risk * l).exp()
    }
}

/// `J = Σ_t c_t`.
pub fn total_objective(per_step_costs: &[f64]) -> f64 {
    per_step_costs.iter().sum()
}

/// Symmetrizes and floors eigenvalues at zero.
pub fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    if sym.nrows() == 0 {
        return sym;
    }
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let floored = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&floored) * v.transpose();
    (&out + out.transpose()) * 0.5
}

impl CostSpec {
    pub fn new(terms: Vec<CostTerm>, risk: f64) -> Self {
        Self { terms, risk }
    }

    pub fn validate(&self, nr: usize) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::InvalidConfig("cost needs at least one term".into()));
        }
        if !self.risk.is_finite() {
            return Err(Error::InvalidConfig("risk must be finite".into()));
        }
        for term in &self.terms {
            if !(term.weight >= 0.0 && term.weight.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "term `{}` weight must be non-negative",
                    term.name
                )));
            }
            if term.dim == 0 || term.offset + term.dim > nr {
                return Err(Error::InvalidConfig(format!(
                    "term `{}` slice {}..{} outside residual of length {nr}",
                    term.name,
                    term.offset,
                    term.offset + term.dim
                )));
            }
            term.norm.validate(term.dim)?;
        }
        Ok(())
    }

    /// Weighted value `wᵢ nᵢ(rᵢ)` of every term.
    pub fn term_values(&self, residual: &[f64]) -> Vec<f64> {
        self.terms
            .iter()
            .map(|t| t.weight * t.norm.value(t.slice(residual)))
            .collect()
    }

    pub fn base_cost(&self, residual: &[f64]) -> f64 {
        self.term_values(residual).iter().sum()
    }

    /// Running cost `ρ(l(r); R)`.
    pub fn cost(&self, residual: &[f64]) -> f64 {
        risk_transform(self.base_cost(residual), self.risk)
    }

    /// Gradients `∂c/∂x`, `∂c/∂u` through the residual Jacobians `C`, `D`.
    pub fn gradient(&self, residual: &[f64], c: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let derivs = self.derivatives(residual, c, d)?;
        Ok((derivs.cx, derivs.cu))
    }

    /// Gauss–Newton Hessians `(c_xx, c_uu, c_xu)`, symmetrized but not
    /// projected.
    pub fn hessian_gn(
        &self,
        residual: &[f64],
        c: &DMatrix<f64>,
        d: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let derivs = self.derivatives(residual, c, d)?;
        Ok((derivs.cxx, derivs.cuu, derivs.cxu))
    }

    pub fn derivatives(&self, residual: &[f64], c: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<CostDerivatives> {
        check_len("residual Jacobian rows (C)", residual.len(), c.nrows())?;
        check_len("residual Jacobian rows (D)", residual.len(), d.nrows())?;
        let (nx, nu) = (c.ncols(), d.ncols());
        let mut base = 0.0;
        let mut lx = DVector::zeros(nx);
        let mut lu = DVector::zeros(nu);
        let mut lxx = DMatrix::zeros(nx, nx);
        let mut luu = DMatrix::zeros(nu, nu);
        let mut lxu = DMatrix::zeros(nx, nu);

        for term in &self.terms {
            if term.offset + term.dim > residual.len() {
                return Err(Error::Dimension {
                    what: "residual",
                    expected: term.offset + term.dim,
                    got: residual.len(),
                });
            }
            let eval = term.norm.eval(term.slice(residual));
            let w = term.weight;
            let ci = c.rows(term.offset, term.dim);
            let di = d.rows(term.offset, term.dim);
            base += w * eval.value;
            lx += ci.transpose() * &eval.gradient * w;
            lu += di.transpose() * &eval.gradient * w;
            let hc = &eval.hessian * ci;
            let hd = &eval.hessian * di;
            lxx += ci.transpose() * &hc * w;
            luu += di.transpose() * &hd * w;
            lxu += ci.transpose() * &hd * w;
        }

        let risk = self.risk;
        let slope = risk_slope(base, risk);
        let mut cxx = (&lxx + &lx * lx.transpose() * risk) * slope;
        let mut cuu = (&luu + &lu * lu.transpose() * risk) * slope;
        let cxu = (&lxu + &lx * lu.transpose() * risk) * slope;
        cxx = (&cxx + cxx.transpose()) * 0.5;
        cuu = (&cuu + cuu.transpose()) * 0.5;

        Ok(CostDerivatives {
            base,
            cost: risk_transform(base, risk),
            cx: lx * slope,
            cu: lu * slope,
            cxx,
            cuu,
            cxu,
        })
    }
}
