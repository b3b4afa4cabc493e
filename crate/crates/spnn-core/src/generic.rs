//! The metriplectic algebra: GENERIC evolution step, degeneracy residuals,
//! structural rate diagnostics and operator validity checks.
//!
//! A metriplectic system evolves as `dz/dt = L ∂E/∂z + M ∂S/∂z` with a
//! skew-symmetric Poisson matrix `L` and a symmetric positive semi-definite
//! friction matrix `M` (Grmela & Öttinger, Phys. Rev. E 56, 1997). The
//! degeneracy conditions `L ∂S/∂z = 0` and `M ∂E/∂z = 0` make the energy a
//! conserved quantity and the entropy non-decreasing.
//!
//! Here the exact gradients are replaced by learned discrete gradient
//! operators: per-step matrices `A, B` with `A z ≈ ∂E/∂z`, `B z ≈ ∂S/∂z`,
//! composed through a forward-Euler update. Everything in this module is a
//! pure function of immutable inputs and may be called concurrently.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg::{dot, symmetric_eigenvalues, Mat};

/// One named block of a state vector (e.g. a 2-D position or a scalar
/// entropy slot).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub dim: usize,
    pub unit: String,
}

/// Ordered slot descriptor for a system's flat state vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    slots: Vec<Slot>,
}

impl StateLayout {
    pub fn new(slots: Vec<Slot>) -> Self {
        Self { slots }
    }

    pub fn slot(name: &str, dim: usize, unit: &str) -> Slot {
        Slot {
            name: name.to_string(),
            dim,
            unit: unit.to_string(),
        }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Total state dimension (sum of slot dimensions).
    pub fn dim(&self) -> usize {
        self.slots.iter().map(|s| s.dim).sum()
    }

    /// Flat per-component names: a slot `q1` of dimension 2 yields
    /// `q1_x, q1_y`; higher dimensions are numbered.
    pub fn component_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for s in &self.slots {
            match s.dim {
                1 => names.push(s.name.clone()),
                2 => {
                    names.push(format!("{}_x", s.name));
                    names.push(format!("{}_y", s.name));
                }
                d => {
                    for k in 0..d {
                        names.push(format!("{}_{}", s.name, k));
                    }
                }
            }
        }
        names
    }

    /// Name of flat component `idx`.
    pub fn component_name(&self, idx: usize) -> String {
        self.component_names()
            .get(idx)
            .cloned()
            .unwrap_or_else(|| format!("component_{idx}"))
    }
}

/// A system state: flat vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub values: Vec<f64>,
    pub layout: StateLayout,
}

impl StateVector {
    pub fn new(values: Vec<f64>, layout: StateLayout) -> Result<Self, Error> {
        if values.len() != layout.dim() {
            return Err(Error::Dimension {
                context: "StateVector::new",
                expected: layout.dim(),
                got: values.len(),
            });
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                slot: layout.component_name(idx),
                step: None,
            });
        }
        Ok(Self { values, layout })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// The constant operator pair of a system: Poisson matrix `L`
/// (skew-symmetric) and friction matrix `M` (symmetric PSD). Entries are
/// stored so that `L + L^T = 0` and `M - M^T = 0` hold bit-exactly for the
/// built-in systems; `validate` reports any defect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericOperators {
    l: Mat,
    m: Mat,
}

/// Tolerance on the smallest eigenvalue of `M`: eigenvalues down to
/// `-1e-12` are treated as zero (round-off of an exact PSD matrix).
pub const PSD_TOLERANCE: f64 = -1e-12;

impl GenericOperators {
    pub fn new(l: Mat, m: Mat) -> Result<Self, Error> {
        if !l.is_square() {
            return Err(Error::Dimension {
                context: "GenericOperators: L must be square",
                expected: l.rows(),
                got: l.cols(),
            });
        }
        if !m.is_square() {
            return Err(Error::Dimension {
                context: "GenericOperators: M must be square",
                expected: m.rows(),
                got: m.cols(),
            });
        }
        if l.rows() != m.rows() {
            return Err(Error::Dimension {
                context: "GenericOperators: L and M sizes differ",
                expected: l.rows(),
                got: m.rows(),
            });
        }
        Ok(Self { l, m })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn poisson(&self) -> &Mat {
        &self.l
    }

    pub fn friction(&self) -> &Mat {
        &self.m
    }

    pub fn validate(&self) -> OperatorDiagnostics {
        validate_operators(&self.l, &self.m).expect("dimensions checked at construction")
    }
}

/// Structural defects of an operator pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorDiagnostics {
    /// `max_ij |L + L^T|`.
    pub skew_defect: f64,
    /// `max_ij |M - M^T|`.
    pub symmetry_defect: f64,
    /// Smallest eigenvalue of the symmetrized `M`, from a cyclic Jacobi
    /// eigensolve (exact enough for the n <= 16 operators used here).
    pub min_eigenvalue: f64,
}

impl OperatorDiagnostics {
    pub fn is_valid(&self) -> bool {
        self.skew_defect == 0.0
            && self.symmetry_defect == 0.0
            && self.min_eigenvalue >= PSD_TOLERANCE
    }
}

/// Check a candidate `(L, M)` pair for skew-symmetry, symmetry and positive
/// semi-definiteness.
pub fn validate_operators(l: &Mat, m: &Mat) -> Result<OperatorDiagnostics, Error> {
    if !l.is_square() || !m.is_square() {
        return Err(Error::Dimension {
            context: "validate_operators: matrices must be square",
            expected: l.rows(),
            got: if l.is_square() { m.cols() } else { l.cols() },
        });
    }
    if l.rows() != m.rows() {
        return Err(Error::Dimension {
            context: "validate_operators: L and M sizes differ",
            expected: l.rows(),
            got: m.rows(),
        });
    }
    let eig = symmetric_eigenvalues(m);
    Ok(OperatorDiagnostics {
        skew_defect: l.max_abs_sum_with_transpose(),
        symmetry_defect: m.max_abs_diff_with_transpose(),
        min_eigenvalue: eig.first().copied().unwrap_or(0.0),
    })
}

/// Learned per-step gradient operators: `A z` approximates the energy
/// gradient, `B z` the entropy gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientOperatorPair {
    pub a: Mat,
    pub b: Mat,
}

impl GradientOperatorPair {
    pub fn new(a: Mat, b: Mat) -> Result<Self, Error> {
        if !a.is_square() || !b.is_square() || a.rows() != b.rows() {
            return Err(Error::Dimension {
                context: "GradientOperatorPair",
                expected: a.rows(),
                got: b.rows(),
            });
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite {
                slot: "gradient operator entries".to_string(),
                step: None,
            });
        }
        Ok(Self { a, b })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }
}

fn check_dims(n: usize, ops: &GenericOperators, grads: &GradientOperatorPair) -> Result<(), Error> {
    if ops.dim() != n {
        return Err(Error::Dimension {
            context: "operator size vs state",
            expected: n,
            got: ops.dim(),
        });
    }
    if grads.dim() != n {
        return Err(Error::Dimension {
            context: "gradient operator size vs state",
            expected: n,
            got: grads.dim(),
        });
    }
    Ok(())
}

/// The shared forward-Euler kernel: `out = z + dt (L a + M b)` with
/// `a = A z`, `b = B z`. Every caller of the update (public op, training
/// loop, evaluation rollout) goes through this function so all paths agree
/// bit-for-bit.
pub(crate) fn step_kernel(
    z: &[f64],
    l: &Mat,
    m: &Mat,
    a_op: &Mat,
    b_op: &Mat,
    dt: f64,
    az: &mut [f64],
    bz: &mut [f64],
    la_mb: &mut [f64],
    out: &mut [f64],
) {
    a_op.matvec_into(z, az);
    b_op.matvec_into(z, bz);
    l.matvec_into(az, out); // reuse `out` as scratch for L a
    m.matvec_into(bz, la_mb);
    for i in 0..z.len() {
        la_mb[i] += out[i];
        out[i] = z[i] + dt * la_mb[i];
    }
}

/// One GENERIC step `z + dt (L·A z + M·B z)`. The input is not mutated.
pub fn integrate_step(
    z: &StateVector,
    ops: &GenericOperators,
    grads: &GradientOperatorPair,
    dt: f64,
) -> Result<StateVector, Error> {
    if dt <= 0.0 {
        return Err(Error::InvalidTimeStep { dt });
    }
    let n = z.dim();
    check_dims(n, ops, grads)?;
    let mut az = vec![0.0; n];
    let mut bz = vec![0.0; n];
    let mut rate = vec![0.0; n];
    let mut out = vec![0.0; n];
    step_kernel(
        &z.values, &ops.l, &ops.m, &grads.a, &grads.b, dt, &mut az, &mut bz, &mut rate, &mut out,
    );
    if let Some(idx) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            slot: z.layout.component_name(idx),
            step: None,
        });
    }
    Ok(StateVector {
        values: out,
        layout: z.layout.clone(),
    })
}

/// Discrete degeneracy residuals `r1 = L·(B z)`, `r2 = M·(A z)`. Both vanish
/// when the learned gradients respect the metriplectic structure.
pub fn degeneracy_residuals(
    z: &StateVector,
    ops: &GenericOperators,
    grads: &GradientOperatorPair,
) -> Result<(Vec<f64>, Vec<f64>), Error> {
    let n = z.dim();
    check_dims(n, ops, grads)?;
    let az = grads.a.matvec(&z.values);
    let bz = grads.b.matvec(&z.values);
    Ok((ops.l.matvec(&bz), ops.m.matvec(&az)))
}

/// Discrete analogues of dE/dt and dS/dt under the learned gradients:
/// `energy_rate = (A z)^T (L A z + M B z)` and
/// `entropy_rate = (B z)^T (L A z + M B z)`.
pub fn structural_rates(
    z: &StateVector,
    ops: &GenericOperators,
    grads: &GradientOperatorPair,
) -> Result<(f64, f64), Error> {
    let n = z.dim();
    check_dims(n, ops, grads)?;
    let az = grads.a.matvec(&z.values);
    let bz = grads.b.matvec(&z.values);
    let mut rate = ops.l.matvec(&az);
    let mb = ops.m.matvec(&bz);
    for (r, m) in rate.iter_mut().zip(&mb) {
        *r += m;
    }
    Ok((dot(&az, &rate), dot(&bz, &rate)))
}
