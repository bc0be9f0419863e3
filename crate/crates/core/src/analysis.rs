//! Post-hoc decomposition and audits: SVD ablation of a trained value matrix
//! into rotation and scaling parts, global parameter counting, orthogonality
//! checks and the Householder degrees-of-freedom identity.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Full SVD `W = U·diag(Σ)·Vᵀ` with descending singular values.
pub struct SvdParts<S: Scalar> {
    pub u: Tensor<S>,
    pub sigma: Vec<S>,
    pub v: Tensor<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblatedKind {
    /// Rotation-only replacement `W_UV = U·Vᵀ`.
    Wuv,
    /// Scaling-only diagonal replacement `W_Σ`.
    Wsigma,
}

pub struct AblatedValue<S: Scalar> {
    pub kind: AblatedKind,
    pub matrix: Tensor<S>,
}

const MAX_SWEEPS: usize = 64;

/// One-sided Jacobi SVD of a square matrix. Column pairs of a working copy
/// are rotated until mutually orthogonal; the accumulated rotations form `V`,
/// the column norms form `Σ`, and the normalized columns form `U`.
pub fn svd_decompose<S: Scalar>(w: &Tensor<S>) -> Result<SvdParts<S>> {
    let shape = w.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch {
            op: "svd_decompose",
            lhs: shape.clone(),
            rhs: vec![shape.first().copied().unwrap_or(0); 2],
        });
    }
    let d = shape[0];
    let mut a = w.data();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("svd_decompose: non-finite input".into()));
    }
    let mut v = vec![S::zero(); d * d];
    for i in 0..d {
        v[i * d + i] = S::one();
    }

    let tol = S::from_f64(1e-15);
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d.saturating_sub(1) {
            for q in (p + 1)..d {
                let mut alpha = S::zero();
                let mut beta = S::zero();
                let mut gamma = S::zero();
                for i in 0..d {
                    let ap = a[i * d + p];
                    let aq = a[i * d + q];
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if gamma == S::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (S::from_f64(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (S::one() + zeta * zeta).sqrt());
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..d {
                    let ap = a[i * d + p];
                    let aq = a[i * d + q];
                    a[i * d + p] = c * ap - s * aq;
                    a[i * d + q] = s * ap + c * aq;
                    let vp = v[i * d + p];
                    let vq = v[i * d + q];
                    v[i * d + p] = c * vp - s * vq;
                    v[i * d + q] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Singular values are the column norms of the rotated copy.
    let mut sigma: Vec<S> = (0..d)
        .map(|j| {
            (0..d)
                .map(|i| a[i * d + j] * a[i * d + j])
                .sum::<S>()
                .sqrt()
        })
        .collect();

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| sigma[y].partial_cmp(&sigma[x]).expect("finite singular values"));

    let sigma_max = sigma[order[0]];
    let tiny = S::from_f64(1e-300).max(sigma_max * S::from_f64(1e-15));
    let mut u = vec![S::zero(); d * d];
    let mut v_sorted = vec![S::zero(); d * d];
    let mut sigma_sorted = vec![S::zero(); d];
    let mut deferred: Vec<usize> = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        sigma_sorted[slot] = sigma[j];
        for i in 0..d {
            v_sorted[i * d + slot] = v[i * d + j];
        }
        if sigma[j] > tiny {
            for i in 0..d {
                u[i * d + slot] = a[i * d + j] / sigma[j];
            }
        } else {
            sigma_sorted[slot] = S::zero();
            deferred.push(slot);
        }
    }
    sigma = sigma_sorted;

    // Complete U for null directions: Gram-Schmidt of basis vectors against
    // the columns already present.
    for slot in deferred {
        'candidates: for cand in 0..d {
            let mut col = vec![S::zero(); d];
            col[cand] = S::one();
            for other in 0..d {
                if other == slot {
                    continue;
                }
                let dot: S = (0..d).map(|i| col[i] * u[i * d + other]).sum();
                for i in 0..d {
                    col[i] = col[i] - dot * u[i * d + other];
                }
            }
            let norm: S = col.iter().map(|&x| x * x).sum::<S>().sqrt();
            if norm > S::from_f64(1e-6) {
                for i in 0..d {
                    u[i * d + slot] = col[i] / norm;
                }
                break 'candidates;
            }
        }
    }

    // Deterministic signs: make the largest-magnitude entry of each U column
    // positive, flipping the matching V column to preserve the product.
    for j in 0..d {
        let mut best = 0;
        for i in 1..d {
            if u[i * d + j].abs() > u[best * d + j].abs() {
                best = i;
            }
        }
        if u[best * d + j] < S::zero() {
            for i in 0..d {
                u[i * d + j] = -u[i * d + j];
                v_sorted[i * d + j] = -v_sorted[i * d + j];
            }
        }
    }

    Ok(SvdParts {
        u: Tensor::from_vec(vec![d, d], u).expect("sized"),
        sigma,
        v: Tensor::from_vec(vec![d, d], v_sorted).expect("sized"),
    })
}

impl<S: Scalar> SvdParts<S> {
    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    /// `U·diag(Σ)·Vᵀ`.
    pub fn reconstruct(&self) -> Tensor<S> {
        let d = self.dim();
        let u = self.u.data();
        let v = self.v.data();
        let mut us = vec![S::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                us[i * d + j] = u[i * d + j] * self.sigma[j];
            }
        }
        let vt = transpose_raw(&v, d, d);
        Tensor::from_vec(vec![d, d], matmul_raw(&us, &vt, d, d, d)).expect("sized")
    }
}

/// Rotation-only ablation `W_UV = U·Vᵀ`.
pub fn build_wuv<S: Scalar>(parts: &SvdParts<S>) -> AblatedValue<S> {
    let d = parts.dim();
    let u = parts.u.data();
    let vt = transpose_raw(&parts.v.data(), d, d);
    AblatedValue {
        kind: AblatedKind::Wuv,
        matrix: Tensor::from_vec(vec![d, d], matmul_raw(&u, &vt, d, d, d)).expect("sized"),
    }
}

/// Scaling-only ablation `W_Σ`: a diagonal matrix whose entries affinely map
/// the row norms `c` of `W` into `[Σ_min, Σ_max]` via
/// `(Σ_max − Σ_min)·(c − max(c))/(max(c) − min(c)) + Σ_max`. When all row
/// norms are equal the formula degenerates and `Σ_max·I` is returned.
pub fn build_wsigma<S: Scalar>(parts: &SvdParts<S>, w: &Tensor<S>) -> Result<AblatedValue<S>> {
    let d = parts.dim();
    if w.shape() != vec![d, d] {
        return Err(Error::ShapeMismatch {
            op: "build_wsigma",
            lhs: w.shape(),
            rhs: vec![d, d],
        });
    }
    let data = w.data();
    let row_norms: Vec<S> = (0..d)
        .map(|i| {
            data[i * d..(i + 1) * d]
                .iter()
                .map(|&x| x * x)
                .sum::<S>()
                .sqrt()
        })
        .collect();
    let c_max = row_norms.iter().copied().fold(row_norms[0], S::max);
    let c_min = row_norms.iter().copied().fold(row_norms[0], S::min);
    let s_max = parts.sigma[0];
    let s_min = parts.sigma[d - 1];

    let mut m = vec![S::zero(); d * d];
    if c_max == c_min {
        for i in 0..d {
            m[i * d + i] = s_max;
        }
    } else {
        for i in 0..d {
            m[i * d + i] = (s_max - s_min) * (row_norms[i] - c_max) / (c_max - c_min) + s_max;
        }
    }
    Ok(AblatedValue {
        kind: AblatedKind::Wsigma,
        matrix: Tensor::from_vec(vec![d, d], m).expect("sized"),
    })
}

// ── Counting ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCountReport {
    pub total: usize,
    pub groups: BTreeMap<String, usize>,
}

/// Count trainable scalars grouped by leading path namespace.
pub fn count_parameters<S: Scalar>(named: &[(String, Tensor<S>)]) -> ParamCountReport {
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0;
    for (name, t) in named {
        if !t.requires_grad() {
            continue;
        }
        let group = name.split('/').next().unwrap_or("").to_string();
        *groups.entry(group).or_default() += t.numel();
        total += t.numel();
    }
    ParamCountReport { total, groups }
}

/// Free parameters of `d` unit-constrained Householder vectors plus one
/// scaling vector: `d·(d−1) + d`. Equals `d²`, the dense matrix count.
pub fn householder_degrees_of_freedom(d: usize) -> usize {
    d * (d - 1) + d
}

// ── Orthogonality audit ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrthogonalityReport {
    pub frobenius_defect: f64,
    pub max_abs_defect: f64,
}

/// Defects of `MᵀM − I`.
pub fn orthogonality_report<S: Scalar>(m: &Tensor<S>) -> Result<OrthogonalityReport> {
    let shape = m.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch {
            op: "orthogonality_report",
            lhs: shape.clone(),
            rhs: vec![shape.first().copied().unwrap_or(0); 2],
        });
    }
    let d = shape[0];
    let data = m.data();
    let mt = transpose_raw(&data, d, d);
    let mtm = matmul_raw(&mt, &data, d, d, d);
    let mut frob = 0.0f64;
    let mut max_abs = 0.0f64;
    for i in 0..d {
        for j in 0..d {
            let idm = if i == j { 1.0 } else { 0.0 };
            let e = mtm[i * d + j].as_f64() - idm;
            frob += e * e;
            max_abs = max_abs.max(e.abs());
        }
    }
    Ok(OrthogonalityReport {
        frobenius_defect: frob.sqrt(),
        max_abs_defect: max_abs,
    })
}
