//! Expectation values and correlation functions on a solved state.
//!
//! Everything here reads `(OperatorSet, Geometry, rho)` so the same code
//! serves Fock-basis clusters and corner-basis clusters. Ratios with a
//! vanishing denominator are reported as absent values (`None`), never as
//! zero or NaN.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::lattice::Geometry;
use crate::model::{ModelError, OperatorSet};
use crate::numerics::{ComplexDense, EigenDecomposition, Operator};

/// Densities below this are treated as vanishing when they enter a ratio.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Statistical errors (standard errors over trajectories) where Monte
/// Carlo sampling was used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservableErrors {
    pub n: f64,
    pub re_b: f64,
    pub im_b: f64,
    pub g2_onsite: f64,
    pub g2_nn: f64,
}

/// One row of physics output: site-averaged population, coherence, and
/// correlation functions, with the per-site/per-bond breakdown kept.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObservableRecord {
    pub n: f64,
    pub re_b: f64,
    pub im_b: f64,
    pub g2_onsite: Option<f64>,
    pub g2_nn: Option<f64>,
    pub per_site_n: Vec<f64>,
    pub per_site_b: Vec<(f64, f64)>,
    pub per_bond_g2nn: Vec<Option<f64>>,
    pub errors: Option<ObservableErrors>,
}

impl ObservableRecord {
    pub fn all_finite(&self) -> bool {
        self.n.is_finite()
            && self.re_b.is_finite()
            && self.im_b.is_finite()
            && self.g2_onsite.is_none_or(f64::is_finite)
            && self.g2_nn.is_none_or(f64::is_finite)
    }
}

/// Per-site populations and coherences: `n_j = tr(rho n_j)`,
/// `<b_j> = tr(rho b_j)`.
pub fn site_expectations(ops: &OperatorSet, rho: &ComplexDense) -> (Vec<f64>, Vec<Complex64>) {
    let ns = ops
        .sites
        .iter()
        .map(|s| s.n.expectation(rho).re)
        .collect();
    let bs = ops.sites.iter().map(|s| s.b.expectation(rho)).collect();
    (ns, bs)
}

/// (site-averaged g2, bond-averaged nearest-neighbor g2, per-bond values).
pub type G2Summary = (Option<f64>, Option<f64>, Vec<Option<f64>>);

/// On-site and nearest-neighbor second-order correlations.
///
/// The scalars are averages over sites resp. bonds (weighted by bond
/// multiplicity). A ratio whose density denominator vanishes is absent.
pub fn g2_functions(
    ops: &OperatorSet,
    geom: &Geometry,
    rho: &ComplexDense,
) -> Result<G2Summary, ModelError> {
    let (ns, _) = site_expectations(ops, rho);

    let mut g2_sum = 0.0;
    let mut g2_count = 0usize;
    let mut g2_defined = true;
    for (j, s) in ops.sites.iter().enumerate() {
        let num = s.n2.expectation(rho).re;
        if ns[j] > DENSITY_FLOOR {
            g2_sum += num / (ns[j] * ns[j]);
            g2_count += 1;
        } else {
            g2_defined = false;
        }
    }
    let g2_onsite = if g2_defined && g2_count > 0 {
        Some(g2_sum / g2_count as f64)
    } else {
        None
    };

    let mut per_bond = Vec::with_capacity(geom.bonds.len());
    let mut nn_sum = 0.0;
    let mut nn_weight = 0usize;
    let mut nn_defined = true;
    for (k, bond) in geom.bonds.iter().enumerate() {
        let dens = ops.dens(geom, k)?;
        let num = dens.expectation(rho).re;
        if ns[bond.a] > DENSITY_FLOOR && ns[bond.b] > DENSITY_FLOOR {
            let val = num / (ns[bond.a] * ns[bond.b]);
            per_bond.push(Some(val));
            nn_sum += val * bond.multiplicity as f64;
            nn_weight += bond.multiplicity;
        } else {
            per_bond.push(None);
            nn_defined = false;
        }
    }
    let g2_nn = if nn_defined && nn_weight > 0 {
        Some(nn_sum / nn_weight as f64)
    } else {
        None
    };
    Ok((g2_onsite, g2_nn, per_bond))
}

/// Full observable record from a density matrix.
pub fn record_from_state(
    ops: &OperatorSet,
    geom: &Geometry,
    rho: &ComplexDense,
) -> Result<ObservableRecord, ModelError> {
    let (ns, bs) = site_expectations(ops, rho);
    let n_sites = ns.len() as f64;
    let n = ns.iter().sum::<f64>() / n_sites;
    let b_avg: Complex64 = bs.iter().sum::<Complex64>() / n_sites;
    let (g2_onsite, g2_nn, per_bond) = g2_functions(ops, geom, rho)?;
    Ok(ObservableRecord {
        n,
        re_b: b_avg.re,
        im_b: b_avg.im,
        g2_onsite,
        g2_nn,
        per_site_n: ns,
        per_site_b: bs.iter().map(|z| (z.re, z.im)).collect(),
        per_bond_g2nn: per_bond,
        errors: None,
    })
}

/// One row of the probability-spectrum export.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SpectrumRow {
    /// 1-based rank, descending probability.
    pub rank: usize,
    pub p: f64,
    /// Total boson population of the eigenvector.
    pub n_tot: f64,
}

/// Probability spectrum of a density-matrix eigendecomposition: for each
/// eigenvector (descending p) its probability and total boson population.
pub fn probability_spectrum(eig: &EigenDecomposition, n_total: &Operator) -> Vec<SpectrumRow> {
    let dim = eig.dim();
    let mut scratch = vec![Complex64::new(0.0, 0.0); dim];
    (0..dim)
        .map(|r| {
            let v = eig.vector(r);
            let n_tot = n_total.quadratic_form(&v, &mut scratch).re;
            SpectrumRow {
                rank: r + 1,
                p: eig.values[r],
                n_tot,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::build_geometry;
    use crate::model::{build_base_cluster_ops, Interaction, ModelParams};
    use crate::numerics::hermitian_eig;

    fn params(n_max: usize) -> ModelParams {
        ModelParams {
            delta_omega: 5.0,
            interaction: if n_max == 1 {
                Interaction::HardCore
            } else {
                Interaction::Finite(0.0)
            },
            hopping: 1.0,
            drive: 2.0,
            gamma: 1.0,
            n_max,
            z: 4,
        }
    }

    #[test]
    fn vacuum_has_no_population() {
        let geom = build_geometry(2, 1, true, false).unwrap();
        let ops = build_base_cluster_ops(&geom, &params(1), 4096).unwrap();
        let mut rho = ComplexDense::zeros(4, 4);
        rho[(0, 0)] = Complex64::new(1.0, 0.0);
        let rec = record_from_state(&ops, &geom, &rho).unwrap();
        assert_eq!(rec.n, 0.0);
        assert_eq!(rec.re_b, 0.0);
        assert!(rec.g2_onsite.is_none(), "vacuum ratios are absent");
        assert!(rec.g2_nn.is_none());
    }

    #[test]
    fn coherent_state_statistics() {
        // |alpha> on a single soft-core site: n = |alpha|^2, <b> = alpha,
        // g2 = 1 up to truncation
        let geom = build_geometry(1, 1, false, false).unwrap();
        let p = params(12);
        let ops = build_base_cluster_ops(&geom, &p, 1 << 14).unwrap();
        let alpha = Complex64::new(0.3, 0.25);
        let dim = 13;
        let mut psi = vec![Complex64::new(0.0, 0.0); dim];
        let mut amp = Complex64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
        let mut fact = 1.0;
        for (k, slot) in psi.iter_mut().enumerate() {
            if k > 0 {
                fact *= k as f64;
                amp *= alpha;
            }
            *slot = amp / fact.sqrt();
        }
        let rho = ComplexDense::from_fn(dim, dim, |r, c| psi[r] * psi[c].conj());
        let rec = record_from_state(&ops, &geom, &rho).unwrap();
        assert!((rec.n - alpha.norm_sqr()).abs() < 1e-9);
        assert!((rec.re_b - alpha.re).abs() < 1e-9);
        assert!((rec.im_b - alpha.im).abs() < 1e-9);
        assert!((rec.g2_onsite.unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fock_one_has_zero_g2() {
        let geom = build_geometry(1, 1, false, false).unwrap();
        let p = params(3);
        let ops = build_base_cluster_ops(&geom, &p, 4096).unwrap();
        let mut rho = ComplexDense::zeros(4, 4);
        rho[(1, 1)] = Complex64::new(1.0, 0.0);
        let rec = record_from_state(&ops, &geom, &rho).unwrap();
        assert!((rec.n - 1.0).abs() < 1e-14);
        assert_eq!(rec.g2_onsite, Some(0.0));
    }

    #[test]
    fn product_state_has_unit_nn_correlation() {
        // rho = rho_a x rho_b across two sites: g2_nn = 1 exactly
        let geom = build_geometry(2, 1, true, false).unwrap();
        let p = params(2);
        let ops = build_base_cluster_ops(&geom, &p, 4096).unwrap();
        // single-site thermal-ish mix
        let site = ComplexDense::from_diag(&[0.6, 0.3, 0.1]);
        let rho = crate::numerics::kron(&site, &site).unwrap();
        let rec = record_from_state(&ops, &geom, &rho).unwrap();
        let g2nn = rec.g2_nn.unwrap();
        assert!((g2nn - 1.0).abs() < 1e-10, "factorized state g2_nn = {g2nn}");
    }

    #[test]
    fn spectrum_of_pure_and_mixed_states() {
        let geom = build_geometry(1, 1, false, false).unwrap();
        let p = params(1);
        let ops = build_base_cluster_ops(&geom, &p, 4096).unwrap();
        let ntot = ops.n_total();

        let mut pure = ComplexDense::zeros(2, 2);
        pure[(1, 1)] = Complex64::new(1.0, 0.0);
        let eig = hermitian_eig(&pure, 1e-10).unwrap();
        let rows = probability_spectrum(&eig, &ntot);
        assert_eq!(rows[0].rank, 1);
        assert!((rows[0].p - 1.0).abs() < 1e-12);
        assert!((rows[0].n_tot - 1.0).abs() < 1e-12);

        let mixed = ComplexDense::from_diag(&[0.5, 0.5]);
        let eig = hermitian_eig(&mixed, 1e-10).unwrap();
        let rows = probability_spectrum(&eig, &ntot);
        let psum: f64 = rows.iter().map(|r| r.p).sum();
        assert!((psum - 1.0).abs() < 1e-10);
        assert_eq!(rows.len(), 2);
        let nsum: f64 = rows.iter().map(|r| r.n_tot).sum();
        assert!((nsum - 1.0).abs() < 1e-12);
    }
}
