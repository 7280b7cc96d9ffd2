//! The driven-dissipative Bose-Hubbard model in the frame rotating at the
//! pump frequency.
//!
//! Per site: detuning `-delta_omega * n`, on-site interaction
//! `(U/2) * b'b'bb`, and a real homogeneous drive `F (b' + b)`. Hopping
//! couples nearest neighbors as `-(J/z) * (b_j' b_l + h.c.)` with one term
//! per bond multiplicity. Every site loses bosons at rate `gamma`, giving
//! jump operators `sqrt(gamma) b_j`.
//!
//! Base clusters carry their operators in the full Fock basis as sparse
//! matrices; merged clusters get the same [`OperatorSet`] layout with
//! corner-projected (dense) entries, so Hamiltonian assembly and
//! observables are basis-agnostic.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::Geometry;
use crate::numerics::{kron_sparse, ComplexSparse, NumericsError, Operator};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("cluster dimension {dim} exceeds the brute-force cap {cap}")]
    ClusterTooLarge { dim: usize, cap: usize },

    #[error("bond ({a},{b}) has no tracked operator and exact mode was requested")]
    MissingBondOperator { a: usize, b: usize },

    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// On-site interaction: finite `U` or the hard-core limit (`U = infinity`,
/// at most one boson per site, the `U` term dropped identically).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    Finite(f64),
    HardCore,
}

/// Physical parameters, all rates in units of `gamma` unless `gamma` is
/// changed. Only the pump-cavity detuning enters; the two frequencies are
/// never needed individually.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Detuning between pump and bare boson frequency.
    pub delta_omega: f64,
    pub interaction: Interaction,
    /// Hopping amplitude J (enters as J/z).
    pub hopping: f64,
    /// Drive amplitude F, real by choice of pump phase.
    pub drive: f64,
    /// Single-boson loss rate per site.
    pub gamma: f64,
    /// Boson cutoff per site; Hilbert dimension per site is n_max + 1.
    pub n_max: usize,
    /// Coordination number in the J/z normalization, fixed to the target
    /// lattice's value at every level of the recursion.
    pub z: usize,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(ModelError::InvalidParams(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if self.n_max < 1 {
            return Err(ModelError::InvalidParams("n_max must be at least 1".into()));
        }
        if matches!(self.interaction, Interaction::HardCore) && self.n_max != 1 {
            return Err(ModelError::InvalidParams(format!(
                "hard-core bosons require n_max = 1, got {}",
                self.n_max
            )));
        }
        if self.z == 0 {
            return Err(ModelError::InvalidParams("z must be positive".into()));
        }
        for (name, v) in [
            ("delta_omega", self.delta_omega),
            ("hopping", self.hopping),
            ("drive", self.drive),
        ] {
            if !v.is_finite() {
                return Err(ModelError::InvalidParams(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn site_dim(&self) -> usize {
        self.n_max + 1
    }

    pub fn is_hardcore(&self) -> bool {
        matches!(self.interaction, Interaction::HardCore)
    }
}

/// Single-site ladder, number, and pair-counting operators in the
/// truncated Fock basis: `b[k-1, k] = sqrt(k)`, `n = diag(0..n_max)`,
/// `n2 = diag(k (k-1))` (equal to b'b'bb on the diagonal).
pub fn fock_site_operators(n_max: usize) -> (ComplexSparse, ComplexSparse, ComplexSparse) {
    assert!(n_max >= 1);
    let d = n_max + 1;
    let mut b_trips = Vec::with_capacity(n_max);
    let mut n_trips = Vec::with_capacity(d);
    let mut n2_trips = Vec::with_capacity(d);
    for k in 1..=n_max {
        b_trips.push((k - 1, k, Complex64::new((k as f64).sqrt(), 0.0)));
        n_trips.push((k, k, Complex64::new(k as f64, 0.0)));
        if k >= 2 {
            n2_trips.push((k, k, Complex64::new((k * (k - 1)) as f64, 0.0)));
        }
    }
    (
        ComplexSparse::from_triplets(d, d, &b_trips),
        ComplexSparse::from_triplets(d, d, &n_trips),
        ComplexSparse::from_triplets(d, d, &n2_trips),
    )
}

/// Per-site operators of a cluster in its current basis.
#[derive(Clone, Debug)]
pub struct SiteOps {
    pub b: Operator,
    pub n: Operator,
    pub n2: Operator,
}

/// Per-bond operators: `hop = b_a' b_b` and `dens = n_a n_b`, tracked
/// exactly in exact mode, absent (reconstructed on demand) in fast mode.
#[derive(Clone, Debug)]
pub struct BondOps {
    pub hop: Option<Operator>,
    pub dens: Option<Operator>,
}

/// How bond operators are carried through merges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorMode {
    /// Bond operators projected exactly from the node where the pair first
    /// coexists.
    Exact,
    /// Bond operators rebuilt as products of truncated single-site
    /// operators; cheaper, converges with M.
    Fast,
}

/// All operators of a cluster, in one shared basis. `bonds` is parallel to
/// the cluster geometry's bond list.
#[derive(Clone, Debug)]
pub struct OperatorSet {
    pub dim: usize,
    pub sites: Vec<SiteOps>,
    pub bonds: Vec<BondOps>,
    pub mode: OperatorMode,
}

impl OperatorSet {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Hopping operator for bond index `k`, reconstructing `b_a' b_b` from
    /// site operators when it is not tracked.
    pub fn hop(&self, geom: &Geometry, k: usize) -> Result<Operator> {
        if let Some(op) = &self.bonds[k].hop {
            return Ok(op.clone());
        }
        let bond = geom.bonds[k];
        if self.mode == OperatorMode::Exact {
            return Err(ModelError::MissingBondOperator {
                a: bond.a,
                b: bond.b,
            });
        }
        let ba = &self.sites[bond.a].b;
        let bb = &self.sites[bond.b].b;
        Ok(match (ba, bb) {
            (Operator::Sparse(x), Operator::Sparse(y)) => {
                Operator::Sparse(x.dagger().mul_sparse(y))
            }
            _ => Operator::Dense(ba.to_dense().dag_mul(&bb.to_dense())),
        })
    }

    /// Density-density operator for bond index `k` (`n_a n_b`).
    pub fn dens(&self, geom: &Geometry, k: usize) -> Result<Operator> {
        if let Some(op) = &self.bonds[k].dens {
            return Ok(op.clone());
        }
        let bond = geom.bonds[k];
        if self.mode == OperatorMode::Exact {
            return Err(ModelError::MissingBondOperator {
                a: bond.a,
                b: bond.b,
            });
        }
        let na = &self.sites[bond.a].n;
        let nb = &self.sites[bond.b].n;
        Ok(match (na, nb) {
            (Operator::Sparse(x), Operator::Sparse(y)) => Operator::Sparse(x.mul_sparse(y)),
            _ => Operator::Dense(na.to_dense().mul(&nb.to_dense())),
        })
    }

    /// Total-number operator, summed over sites.
    pub fn n_total(&self) -> Operator {
        let mut acc: Option<Operator> = None;
        for s in &self.sites {
            acc = Some(match acc {
                None => s.n.clone(),
                Some(Operator::Sparse(a)) => match &s.n {
                    Operator::Sparse(b) => Operator::Sparse(a.add(b)),
                    Operator::Dense(b) => {
                        let mut d = a.to_dense();
                        d.axpy(Complex64::new(1.0, 0.0), b);
                        Operator::Dense(d)
                    }
                },
                Some(Operator::Dense(mut a)) => {
                    a.axpy(Complex64::new(1.0, 0.0), &s.n.to_dense());
                    Operator::Dense(a)
                }
            });
        }
        acc.expect("cluster has at least one site")
    }
}

/// Place a single-site operator on site `j` of a cluster by Kronecker
/// products with identities, using the cluster's site ordering.
fn place_on_site(op: &ComplexSparse, site: usize, n_sites: usize, site_dim: usize) -> ComplexSparse {
    let mut acc = ComplexSparse::identity(1);
    for j in 0..n_sites {
        let factor = if j == site {
            op.clone()
        } else {
            ComplexSparse::identity(site_dim)
        };
        acc = kron_sparse(&acc, &factor).expect("base-cluster dimension fits the kron cap");
    }
    acc
}

/// Exact construction in the full Fock basis of a small cluster. All bonds
/// of the geometry get tracked hop/dens operators.
pub fn build_base_cluster_ops(
    geom: &Geometry,
    params: &ModelParams,
    brute_force_cap: usize,
) -> Result<OperatorSet> {
    params.validate()?;
    let n_sites = geom.n_sites();
    let site_dim = params.site_dim();
    let dim = site_dim
        .checked_pow(n_sites as u32)
        .ok_or(ModelError::ClusterTooLarge {
            dim: usize::MAX,
            cap: brute_force_cap,
        })?;
    if dim > brute_force_cap {
        return Err(ModelError::ClusterTooLarge {
            dim,
            cap: brute_force_cap,
        });
    }
    let (b1, n1, n21) = fock_site_operators(params.n_max);
    let sites: Vec<SiteOps> = (0..n_sites)
        .map(|j| SiteOps {
            b: Operator::Sparse(place_on_site(&b1, j, n_sites, site_dim)),
            n: Operator::Sparse(place_on_site(&n1, j, n_sites, site_dim)),
            n2: Operator::Sparse(place_on_site(&n21, j, n_sites, site_dim)),
        })
        .collect();
    let bonds: Vec<BondOps> = geom
        .bonds
        .iter()
        .map(|bond| {
            let (Operator::Sparse(ba), Operator::Sparse(bb)) =
                (&sites[bond.a].b, &sites[bond.b].b)
            else {
                unreachable!("base cluster operators are sparse");
            };
            let (Operator::Sparse(na), Operator::Sparse(nb)) =
                (&sites[bond.a].n, &sites[bond.b].n)
            else {
                unreachable!();
            };
            BondOps {
                hop: Some(Operator::Sparse(ba.dagger().mul_sparse(bb))),
                dens: Some(Operator::Sparse(na.mul_sparse(nb))),
            }
        })
        .collect();
    Ok(OperatorSet {
        dim,
        sites,
        bonds,
        mode: OperatorMode::Exact,
    })
}

/// Assemble the rotating-frame Hamiltonian in the cluster's basis:
///
/// H = sum_j [ -dw n_j + (U/2) n2_j + F (b_j' + b_j) ]
///     - (J/z) sum_bonds mult (K_jl + K_jl')
pub fn assemble_hamiltonian(
    ops: &OperatorSet,
    geom: &Geometry,
    params: &ModelParams,
) -> Result<Operator> {
    let u_half = match params.interaction {
        Interaction::Finite(u) => 0.5 * u,
        Interaction::HardCore => 0.0,
    };
    let j_over_z = params.hopping / params.z as f64;
    let hops: Vec<Operator> = geom
        .bonds
        .iter()
        .enumerate()
        .map(|(k, _)| ops.hop(geom, k))
        .collect::<Result<_>>()?;
    let all_sparse = ops.sites.iter().all(|s| s.b.is_sparse())
        && hops.iter().all(Operator::is_sparse);
    if all_sparse {
        let mut h = ComplexSparse::zero(ops.dim, ops.dim);
        for s in &ops.sites {
            let (Operator::Sparse(b), Operator::Sparse(n), Operator::Sparse(n2)) =
                (&s.b, &s.n, &s.n2)
            else {
                unreachable!();
            };
            h = h.add(&n.scale(Complex64::new(-params.delta_omega, 0.0)));
            if u_half != 0.0 {
                h = h.add(&n2.scale(Complex64::new(u_half, 0.0)));
            }
            let drive = b.add(&b.dagger()).scale(Complex64::new(params.drive, 0.0));
            h = h.add(&drive);
        }
        for (hop, bond) in hops.iter().zip(&geom.bonds) {
            let Operator::Sparse(hop) = hop else {
                unreachable!()
            };
            let coeff = Complex64::new(-j_over_z * bond.multiplicity as f64, 0.0);
            h = h.add(&hop.add(&hop.dagger()).scale(coeff));
        }
        Ok(Operator::Sparse(h))
    } else {
        let mut h = crate::numerics::ComplexDense::zeros(ops.dim, ops.dim);
        for s in &ops.sites {
            h.axpy(Complex64::new(-params.delta_omega, 0.0), &s.n.to_dense());
            if u_half != 0.0 {
                h.axpy(Complex64::new(u_half, 0.0), &s.n2.to_dense());
            }
            let b = s.b.to_dense();
            h.axpy(Complex64::new(params.drive, 0.0), &b.add(&b.dagger()));
        }
        for (hop, bond) in hops.iter().zip(&geom.bonds) {
            let hop = hop.to_dense();
            let coeff = Complex64::new(-j_over_z * bond.multiplicity as f64, 0.0);
            h.axpy(coeff, &hop.add(&hop.dagger()));
        }
        Ok(Operator::Dense(h))
    }
}

/// One jump operator `sqrt(gamma) b_j` per site, in the cluster basis.
pub fn jump_operators(ops: &OperatorSet, params: &ModelParams) -> Vec<Operator> {
    let s = Complex64::new(params.gamma.sqrt(), 0.0);
    ops.sites.iter().map(|site| site.b.scale(s)).collect()
}
