//! Householder-product parameterization of the fusion value matrix.
//!
//! A reflection `P = I − 2vvᵀ/‖v‖²` is orthogonal for any nonzero `v`. Pairs
//! of trainable vectors `(v1, v2)` define two reflections about `v1−v2` and
//! `v1+v2` whose product is a rotation that starts near the identity when
//! `‖v2‖` is small. A stack of `C` such couples, optionally followed by a
//! diagonal scaling, replaces the dense `d×d` value matrix with `2·C·d (+d)`
//! trainable scalars while staying exactly orthogonal (up to scaling) for
//! every parameter value — not just at initialization.
//!
//! Applications run reflection-by-reflection in `O(C·d)` per input row; no
//! `d×d` matrix is ever materialized except by [`materialize`], which exists
//! for regularization and audits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::sample_normal;
use crate::params::{join_path, HasParams};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Reject reflection directions with norm below this.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// Initialization length of the perturbation vector `v2` is `0.01/√d`.
pub const V2_INIT_SCALE: f64 = 0.01;

/// A coupled pair of reflection-generating vectors.
pub struct HouseholderCouple<S: Scalar> {
    pub v1: Tensor<S>,
    pub v2: Tensor<S>,
}

impl<S: Scalar> HouseholderCouple<S> {
    /// Apply `P_c = (I − 2aaᵀ/‖a‖²)(I − 2bbᵀ/‖b‖²)` with `a = v1−v2`,
    /// `b = v1+v2`, right factor first.
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let a = tensor::sub(&self.v1, &self.v2)?;
        let b = tensor::add(&self.v1, &self.v2)?;
        let y = reflect(&b, x)?;
        reflect(&a, &y)
    }

    pub fn deep_clone(&self) -> Self {
        HouseholderCouple {
            v1: self.v1.deep_clone(),
            v2: self.v2.deep_clone(),
        }
    }
}

impl<S: Scalar> HasParams<S> for HouseholderCouple<S> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((join_path(prefix, "v1"), self.v1.clone()));
        out.push((join_path(prefix, "v2"), self.v2.clone()));
    }
}

/// Ordered product of reflection couples plus an optional diagonal scaling.
pub struct HouseholderStack<S: Scalar> {
    couples: Vec<HouseholderCouple<S>>,
    scaling: Option<Tensor<S>>,
    dim: usize,
}

/// Reflect the last axis of `x` about the hyperplane orthogonal to `v`:
/// `x − 2·(x·v)·vᵀ/‖v‖²`, differentiable in both arguments. `v` need not be
/// normalized. Accepts rank-1 or rank-2 `x`.
pub fn reflect<S: Scalar>(v: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let vs = v.shape();
    if vs.len() != 1 {
        return Err(Error::Rank {
            op: "reflect",
            expected: 1,
            shape: vs,
        });
    }
    let d = vs[0];
    let norm_sq: f64 = v.with_data(|vd| vd.iter().map(|&e| (e * e).as_f64()).sum());
    if norm_sq.sqrt() < DEGENERACY_THRESHOLD {
        return Err(Error::SingularDirection { couple: None });
    }

    let was_vector = x.rank() == 1;
    let rows = if was_vector {
        tensor::reshape(x, vec![1, d])?
    } else if x.rank() == 2 {
        x.clone()
    } else {
        return Err(Error::Rank {
            op: "reflect",
            expected: 2,
            shape: x.shape(),
        });
    };
    if rows.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            op: "reflect",
            lhs: x.shape(),
            rhs: vs,
        });
    }

    let s = tensor::sum(&tensor::mul(v, v)?);
    let proj = tensor::matmul(&rows, &tensor::reshape(v, vec![d, 1])?)?;
    let coeff = tensor::div_scalar(&proj, &s)?;
    let rank_one = tensor::matmul(&coeff, &tensor::reshape(v, vec![1, d])?)?;
    let out = tensor::sub(&rows, &tensor::scale(&rank_one, S::from_f64(2.0)))?;
    if was_vector {
        tensor::reshape(&out, vec![d])
    } else {
        Ok(out)
    }
}

/// Apply one couple to `x`. Free-function form of [`HouseholderCouple::apply`].
pub fn couple_apply<S: Scalar>(c: &HouseholderCouple<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    c.apply(x)
}

impl<S: Scalar> HouseholderStack<S> {
    pub fn new(couples: Vec<HouseholderCouple<S>>, scaling: Option<Tensor<S>>) -> Result<Self> {
        let Some(first) = couples.first() else {
            return Err(Error::Config("householder stack needs at least one couple".into()));
        };
        let dim = first.v1.shape()[0];
        for c in &couples {
            if c.v1.shape() != vec![dim] || c.v2.shape() != vec![dim] {
                return Err(Error::ShapeMismatch {
                    op: "householder_stack",
                    lhs: c.v1.shape(),
                    rhs: vec![dim],
                });
            }
        }
        if let Some(s) = &scaling {
            if s.shape() != vec![dim] {
                return Err(Error::ShapeMismatch {
                    op: "householder_stack",
                    lhs: s.shape(),
                    rhs: vec![dim],
                });
            }
        }
        Ok(HouseholderStack { couples, scaling, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_couples(&self) -> usize {
        self.couples.len()
    }

    pub fn couples(&self) -> &[HouseholderCouple<S>] {
        &self.couples
    }

    pub fn scaling(&self) -> Option<&Tensor<S>> {
        self.scaling.as_ref()
    }

    pub fn is_scaled(&self) -> bool {
        self.scaling.is_some()
    }

    /// Trainable scalars: `2·C·d`, plus `d` when scaled.
    pub fn param_count(&self) -> usize {
        stack_param_count(self.couples.len(), self.dim, self.scaling.is_some())
    }

    pub fn deep_clone(&self) -> Self {
        HouseholderStack {
            couples: self.couples.iter().map(HouseholderCouple::deep_clone).collect(),
            scaling: self.scaling.as_ref().map(Tensor::deep_clone),
            dim: self.dim,
        }
    }
}

impl<S: Scalar> HasParams<S> for HouseholderStack<S> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, c) in self.couples.iter().enumerate() {
            c.collect_params(&join_path(prefix, &format!("couple{i:03}")), out);
        }
        if let Some(s) = &self.scaling {
            out.push((join_path(prefix, "scaling"), s.clone()));
        }
    }
}

pub fn stack_param_count(c_couples: usize, d: usize, scaled: bool) -> usize {
    2 * c_couples * d + if scaled { d } else { 0 }
}

/// Apply `P_C = Π_{c=1..C} P_c` (couple 1 outermost) to the last axis of `x`,
/// then the elementwise row scaling when present. Cost is `O(C·d)` per row.
pub fn stack_apply<S: Scalar>(h: &HouseholderStack<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    // Couple 1 is the leftmost factor, so it acts last on column vectors.
    let mut y = x.clone();
    for (i, c) in h.couples.iter().enumerate().rev() {
        y = c.apply(&y).map_err(|e| match e {
            Error::SingularDirection { couple: None } => {
                Error::SingularDirection { couple: Some(i) }
            }
            other => other,
        })?;
    }
    match &h.scaling {
        Some(s) => {
            if y.rank() == 1 {
                tensor::mul(&y, s)
            } else {
                tensor::scale_cols(&y, s)
            }
        }
        None => Ok(y),
    }
}

/// Dense `W_C = Σ_s·P_C` obtained by pushing the identity basis through the
/// stack. Differentiable, for regularization and audits only.
pub fn materialize<S: Scalar>(h: &HouseholderStack<S>) -> Result<Tensor<S>> {
    // Row i of stack_apply(I) is W_C·e_i, i.e. column i of W_C.
    let basis = Tensor::eye(h.dim);
    let cols = stack_apply(h, &basis)?;
    tensor::transpose2(&cols)
}

/// Seeded initialization: per couple, `v1` is standard normal rescaled to unit
/// length and `v2` standard normal rescaled to length `0.01/√d`; scaling (when
/// enabled) starts at all ones.
pub fn init_stack<S: Scalar>(
    c_couples: usize,
    d: usize,
    seed: u64,
    scaled: bool,
) -> Result<HouseholderStack<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_stack_with_rng(c_couples, d, scaled, &mut rng)
}

pub fn init_stack_with_rng<S: Scalar>(
    c_couples: usize,
    d: usize,
    scaled: bool,
    rng: &mut ChaCha8Rng,
) -> Result<HouseholderStack<S>> {
    if c_couples == 0 {
        return Err(Error::Config("householder stack needs C >= 1".into()));
    }
    if d < 2 {
        return Err(Error::Config("householder stack needs d >= 2".into()));
    }
    let mut couples = Vec::with_capacity(c_couples);
    for _ in 0..c_couples {
        let v1 = rescaled_normal::<S>(d, 1.0, rng);
        let v2 = rescaled_normal::<S>(d, V2_INIT_SCALE / (d as f64).sqrt(), rng);
        couples.push(HouseholderCouple {
            v1: v1.tracked(),
            v2: v2.tracked(),
        });
    }
    let scaling = scaled.then(|| Tensor::ones(&[d]).tracked());
    HouseholderStack::new(couples, scaling)
}

/// Standard normal vector rescaled to an exact target length (in `f64`).
fn rescaled_normal<S: Scalar>(d: usize, target_len: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let raw: Vec<S> = sample_normal(d, 1.0, rng);
    let norm: f64 = raw.iter().map(|&v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    let scale = target_len / norm;
    Tensor::from_vec(
        vec![d],
        raw.iter()
            .map(|&v| S::from_f64(v.as_f64() * scale))
            .collect(),
    )
    .expect("sized data")
}
