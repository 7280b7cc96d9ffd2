//! Square-lattice geometry and the binary merge schedule.
//!
//! A [`Geometry`] is a rectangle of sites with optional periodic wrapping
//! per axis. Sites carry explicit coordinates so that merged clusters can
//! keep their children's site ordering (left cluster's sites first, then
//! the right's); nearest-neighbor bonds are always derived from the
//! coordinates, so any consistent ordering works.
//!
//! A [`MergeSchedule`] is the binary tree that grows the target lattice
//! from base clusters: first along x, then along y, doubling where it can
//! and absorbing remainders otherwise. Every bond of every node is mapped
//! either to a bond of a child or registered as a cross bond first realized
//! at that node.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("lattice dimensions must be at least 1x1, got {0}x{1}")]
    EmptyLattice(usize, usize),

    #[error(
        "target {tx}x{ty} is not reachable from base {bx}x{by}: each target \
         axis must be a multiple of the base axis"
    )]
    UnreachableTarget {
        tx: usize,
        ty: usize,
        bx: usize,
        by: usize,
    },

    #[error("base cluster {0}x{1} exceeds the brute-force cap: dimension {2} > {3}")]
    LeafTooLarge(usize, usize, usize, usize),
}

pub type Result<T> = std::result::Result<T, LatticeError>;

/// An undirected nearest-neighbor bond between two local site indices,
/// with `a < b`. Width-2 periodic axes produce multiplicity-2 bonds (the
/// direct and wrapped connections coincide as a pair but both enter the
/// Hamiltonian sum).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub multiplicity: usize,
}

/// A rectangular cluster of sites with its nearest-neighbor bond list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    pub periodic_x: bool,
    pub periodic_y: bool,
    /// Coordinates of each site; local index = position in this list.
    pub sites: Vec<(usize, usize)>,
    /// Sorted by (a, b).
    pub bonds: Vec<Bond>,
}

impl Geometry {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Weighted degree of a site (bond multiplicities counted).
    pub fn degree(&self, site: usize) -> usize {
        self.bonds
            .iter()
            .filter(|b| b.a == site || b.b == site)
            .map(|b| b.multiplicity)
            .sum()
    }

    /// Total bond multiplicity.
    pub fn total_multiplicity(&self) -> usize {
        self.bonds.iter().map(|b| b.multiplicity).sum()
    }

    /// Coordination number when all sites share the same weighted degree.
    pub fn coordination_number(&self) -> Option<usize> {
        if self.n_sites() == 0 {
            return None;
        }
        let z = self.degree(0);
        if (1..self.n_sites()).all(|s| self.degree(s) == z) {
            Some(z)
        } else {
            None
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn site_index(&self, x: usize, y: usize) -> Option<usize> {
        self.sites.iter().position(|&(sx, sy)| sx == x && sy == y)
    }
}

/// Standard row-major geometry: site index = y * Lx + x.
pub fn build_geometry(lx: usize, ly: usize, periodic_x: bool, periodic_y: bool) -> Result<Geometry> {
    if lx == 0 || ly == 0 {
        return Err(LatticeError::EmptyLattice(lx, ly));
    }
    let mut sites = Vec::with_capacity(lx * ly);
    for y in 0..ly {
        for x in 0..lx {
            sites.push((x, y));
        }
    }
    geometry_from_sites(lx, ly, periodic_x, periodic_y, sites)
}

/// Geometry over an explicit site ordering; bonds are enumerated from the
/// coordinates by +x and +y displacement with wraparound where periodic.
pub fn geometry_from_sites(
    width: usize,
    height: usize,
    periodic_x: bool,
    periodic_y: bool,
    sites: Vec<(usize, usize)>,
) -> Result<Geometry> {
    if width == 0 || height == 0 {
        return Err(LatticeError::EmptyLattice(width, height));
    }
    assert_eq!(sites.len(), width * height, "site list must cover the rectangle");
    let mut geom = Geometry {
        width,
        height,
        periodic_x,
        periodic_y,
        sites,
        bonds: Vec::new(),
    };
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for idx in 0..geom.n_sites() {
        let (x, y) = geom.sites[idx];
        // +x neighbor
        let nx = if x + 1 < width {
            Some(x + 1)
        } else if periodic_x {
            Some(0)
        } else {
            None
        };
        if let Some(nx) = nx {
            if nx != x {
                let j = geom.site_index(nx, y).expect("site grid must be complete");
                pairs.push((idx.min(j), idx.max(j)));
            }
        }
        // +y neighbor
        let ny = if y + 1 < height {
            Some(y + 1)
        } else if periodic_y {
            Some(0)
        } else {
            None
        };
        if let Some(ny) = ny {
            if ny != y {
                let j = geom.site_index(x, ny).expect("site grid must be complete");
                pairs.push((idx.min(j), idx.max(j)));
            }
        }
    }
    pairs.sort_unstable();
    for (a, b) in pairs {
        match geom.bonds.last_mut() {
            Some(bond) if bond.a == a && bond.b == b => bond.multiplicity += 1,
            _ => geom.bonds.push(Bond {
                a,
                b,
                multiplicity: 1,
            }),
        }
    }
    Ok(geom)
}

/// Where a parent bond's operator comes from at a merge node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BondSource {
    /// Bond index in the left child's geometry.
    Left(usize),
    /// Bond index in the right child's geometry.
    Right(usize),
    /// First realized at this node; endpoints span the two children.
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeAxis {
    X,
    Y,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum NodeKind {
    Leaf,
    Merged {
        left: usize,
        right: usize,
        axis: MergeAxis,
        /// Parallel to the node geometry's bond list.
        bond_sources: Vec<BondSource>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleNode {
    pub geometry: Geometry,
    pub kind: NodeKind,
    /// Per-node cap on the corner dimension, from the planning call.
    pub m_cap: usize,
}

/// Binary merge tree; `nodes[root]` covers the target lattice.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MergeSchedule {
    pub nodes: Vec<ScheduleNode>,
    pub root: usize,
}

impl MergeSchedule {
    pub fn node(&self, idx: usize) -> &ScheduleNode {
        &self.nodes[idx]
    }

    /// Number of merge (non-leaf) nodes.
    pub fn n_merges(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Merged { .. }))
            .count()
    }

    /// Indices in solve order (children before parents).
    pub fn solve_order(&self) -> Vec<usize> {
        // nodes are appended children-first during planning
        (0..self.nodes.len()).collect()
    }
}

/// Plan the binary merge tree from `base` to `target`.
///
/// The x axis is grown first, then y. Each growth step merges the current
/// cluster with the largest already-built cluster that fits, so axes double
/// where possible and odd remainders are absorbed one block at a time.
/// `m_schedule` assigns a corner-dimension cap per merge level (last entry
/// repeats; empty means uncapped). `site_dim` is the per-site Hilbert
/// dimension used to enforce `leaf_cap` on base clusters.
pub fn plan_merge_schedule(
    target: &Geometry,
    base: &Geometry,
    m_schedule: &[usize],
    site_dim: usize,
    leaf_cap: usize,
) -> Result<MergeSchedule> {
    let (tx, ty) = target.shape();
    let (bx, by) = base.shape();
    if tx % bx != 0 || ty % by != 0 {
        return Err(LatticeError::UnreachableTarget { tx, ty, bx, by });
    }
    let leaf_dim = site_dim
        .checked_pow((bx * by) as u32)
        .unwrap_or(usize::MAX);
    if leaf_dim > leaf_cap {
        return Err(LatticeError::LeafTooLarge(bx, by, leaf_dim, leaf_cap));
    }

    let cap_for = |level: usize| -> usize {
        if m_schedule.is_empty() {
            usize::MAX
        } else {
            *m_schedule.get(level).unwrap_or(m_schedule.last().unwrap())
        }
    };

    let mut nodes: Vec<ScheduleNode> = Vec::new();
    // (width, height) in base-block units -> node index
    let mut by_shape: std::collections::HashMap<(usize, usize), usize> =
        std::collections::HashMap::new();

    let leaf_geom = build_geometry(bx, by, target.periodic_x, target.periodic_y)?;
    nodes.push(ScheduleNode {
        geometry: leaf_geom,
        kind: NodeKind::Leaf,
        m_cap: usize::MAX,
    });
    by_shape.insert((1, 1), 0);

    let kx = tx / bx;
    let ky = ty / by;
    let mut level = 0;

    // grow along x: (cur,1) + (add,1) -> (cur+add,1), in base-block units
    let mut cur = 1;
    while cur < kx {
        let add = cur.min(kx - cur);
        let left = by_shape[&(cur, 1)];
        let right = by_shape[&(add, 1)];
        let idx = push_merge(&mut nodes, left, right, MergeAxis::X, target, cap_for(level));
        cur += add;
        by_shape.insert((cur, 1), idx);
        level += 1;
    }
    // grow along y: (kx,cur) + (kx,add) -> (kx,cur+add)
    let mut cur_y = 1;
    while cur_y < ky {
        let add = cur_y.min(ky - cur_y);
        let left = by_shape[&(kx, cur_y)];
        let right = by_shape[&(kx, add)];
        let idx = push_merge(&mut nodes, left, right, MergeAxis::Y, target, cap_for(level));
        cur_y += add;
        by_shape.insert((kx, cur_y), idx);
        level += 1;
    }

    let root = nodes.len() - 1;
    debug_assert_eq!(nodes[root].geometry.shape(), target.shape());
    Ok(MergeSchedule { nodes, root })
}

fn push_merge(
    nodes: &mut Vec<ScheduleNode>,
    left: usize,
    right: usize,
    axis: MergeAxis,
    target: &Geometry,
    m_cap: usize,
) -> usize {
    let lg = &nodes[left].geometry;
    let rg = &nodes[right].geometry;
    let (width, height, shifted): (usize, usize, Vec<(usize, usize)>) = match axis {
        MergeAxis::X => {
            assert_eq!(lg.height, rg.height, "x-merge requires equal heights");
            let sites = lg
                .sites
                .iter()
                .copied()
                .chain(rg.sites.iter().map(|&(x, y)| (x + lg.width, y)))
                .collect();
            (lg.width + rg.width, lg.height, sites)
        }
        MergeAxis::Y => {
            assert_eq!(lg.width, rg.width, "y-merge requires equal widths");
            let sites = lg
                .sites
                .iter()
                .copied()
                .chain(rg.sites.iter().map(|&(x, y)| (x, y + lg.height)))
                .collect();
            (lg.width, lg.height + rg.height, sites)
        }
    };
    let geometry = geometry_from_sites(
        width,
        height,
        target.periodic_x,
        target.periodic_y,
        shifted,
    )
    .expect("merged geometry dimensions are nonzero");
    let n_left = lg.n_sites();

    let mut bond_sources = Vec::with_capacity(geometry.bonds.len());
    for bond in &geometry.bonds {
        let src = if bond.a < n_left && bond.b < n_left {
            let pos = nodes[left]
                .geometry
                .bonds
                .iter()
                .position(|lb| lb.a == bond.a && lb.b == bond.b)
                .expect("intra-left bond must exist in the left child's periodic geometry");
            BondSource::Left(pos)
        } else if bond.a >= n_left && bond.b >= n_left {
            let (la, lb_) = (bond.a - n_left, bond.b - n_left);
            let pos = nodes[right]
                .geometry
                .bonds
                .iter()
                .position(|rb| rb.a == la && rb.b == lb_)
                .expect("intra-right bond must exist in the right child's periodic geometry");
            BondSource::Right(pos)
        } else {
            debug_assert!(bond.a < n_left && bond.b >= n_left);
            BondSource::Cross
        };
        bond_sources.push(src);
    }

    nodes.push(ScheduleNode {
        geometry,
        kind: NodeKind::Merged {
            left,
            right,
            axis,
            bond_sources,
        },
        m_cap,
    });
    nodes.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_periodic_has_doubled_bonds() {
        let g = build_geometry(2, 2, true, true).unwrap();
        let expect = [(0usize, 1usize), (0, 2), (1, 3), (2, 3)];
        assert_eq!(g.bonds.len(), 4);
        for (bond, (a, b)) in g.bonds.iter().zip(expect.iter()) {
            assert_eq!((bond.a, bond.b), (*a, *b));
            assert_eq!(bond.multiplicity, 2);
        }
        for s in 0..4 {
            assert_eq!(g.degree(s), 4);
        }
    }

    #[test]
    fn four_by_four_periodic_degrees() {
        let g = build_geometry(4, 4, true, true).unwrap();
        assert_eq!(g.bonds.len(), 32);
        assert!(g.bonds.iter().all(|b| b.multiplicity == 1));
        for s in 0..16 {
            assert_eq!(g.degree(s), 4);
        }
        assert_eq!(g.coordination_number(), Some(4));
    }

    #[test]
    fn ring_of_three() {
        let g = build_geometry(3, 1, true, false).unwrap();
        let pairs: Vec<(usize, usize)> = g.bonds.iter().map(|b| (b.a, b.b)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);
        assert!(g.bonds.iter().all(|b| b.multiplicity == 1));
    }

    #[test]
    fn single_axis_of_length_one_has_no_bonds() {
        let g = build_geometry(1, 1, true, true).unwrap();
        assert!(g.bonds.is_empty());
        let g2 = build_geometry(1, 4, true, true).unwrap();
        // only y-axis bonds; no x self-loops
        assert!(g2.bonds.iter().all(|b| {
            let (xa, _) = g2.sites[b.a];
            let (xb, _) = g2.sites[b.b];
            xa == 0 && xb == 0
        }));
    }

    #[test]
    fn periodic_bond_count_law() {
        for (lx, ly) in [(3, 3), (4, 3), (4, 4), (6, 3)] {
            let g = build_geometry(lx, ly, true, true).unwrap();
            assert_eq!(g.total_multiplicity(), 2 * lx * ly);
        }
    }

    #[test]
    fn plan_four_by_four_from_two_by_two() {
        let target = build_geometry(4, 4, true, true).unwrap();
        let base = build_geometry(2, 2, true, true).unwrap();
        let s = plan_merge_schedule(&target, &base, &[], 2, 4096).unwrap();
        let shapes: Vec<(usize, usize)> =
            s.nodes.iter().map(|n| n.geometry.shape()).collect();
        assert_eq!(shapes, vec![(2, 2), (4, 2), (4, 4)]);

        // cross bonds of the root are exactly the pairs spanning the halves
        let root = &s.nodes[s.root];
        let NodeKind::Merged { bond_sources, .. } = &root.kind else {
            panic!("root must be a merge node");
        };
        for (bond, src) in root.geometry.bonds.iter().zip(bond_sources) {
            let (_, ya) = root.geometry.sites[bond.a];
            let (_, yb) = root.geometry.sites[bond.b];
            let spans_halves = (ya < 2) != (yb < 2);
            assert_eq!(
                matches!(src, BondSource::Cross),
                spans_halves,
                "bond ({},{}) source {:?}",
                bond.a,
                bond.b,
                src
            );
        }
        // the 4x4 y-wrap bonds (row 0 - row 3) are cross bonds of the root
        let wraps: Vec<usize> = root
            .geometry
            .bonds
            .iter()
            .enumerate()
            .filter(|(_, b)| {
                let (_, ya) = root.geometry.sites[b.a];
                let (_, yb) = root.geometry.sites[b.b];
                ya.min(yb) == 0 && ya.max(yb) == 3
            })
            .map(|(i, _)| i)
            .collect();
        assert_eq!(wraps.len(), 4);
        for i in wraps {
            assert!(matches!(bond_sources[i], BondSource::Cross));
        }
    }

    #[test]
    fn plan_three_by_three_from_three_by_one() {
        let target = build_geometry(3, 3, true, true).unwrap();
        let base = build_geometry(3, 1, true, true).unwrap();
        let s = plan_merge_schedule(&target, &base, &[], 2, 4096).unwrap();
        let shapes: Vec<(usize, usize)> =
            s.nodes.iter().map(|n| n.geometry.shape()).collect();
        assert_eq!(shapes, vec![(3, 1), (3, 2), (3, 3)]);
        // unequal concatenation: the 3x3 root merges the 3x2 with the 3x1 leaf
        let NodeKind::Merged { left, right, .. } = &s.nodes[s.root].kind else {
            panic!();
        };
        assert_eq!(s.nodes[*left].geometry.shape(), (3, 2));
        assert_eq!(s.nodes[*right].geometry.shape(), (3, 1));
    }

    #[test]
    fn plan_two_by_two_from_two_by_one_cross_bonds() {
        let target = build_geometry(2, 2, true, true).unwrap();
        let base = build_geometry(2, 1, true, true).unwrap();
        let s = plan_merge_schedule(&target, &base, &[], 2, 4096).unwrap();
        let root = &s.nodes[s.root];
        let NodeKind::Merged { bond_sources, .. } = &root.kind else {
            panic!();
        };
        // cross bonds are the growth-axis pairs, multiplicity 2, and the
        // total bond registration matches the canonical 2x2 geometry
        let canonical = build_geometry(2, 2, true, true).unwrap();
        assert_eq!(
            root.geometry.total_multiplicity(),
            canonical.total_multiplicity()
        );
        let cross: Vec<&Bond> = root
            .geometry
            .bonds
            .iter()
            .zip(bond_sources)
            .filter(|(_, s)| matches!(s, BondSource::Cross))
            .map(|(b, _)| b)
            .collect();
        assert_eq!(cross.len(), 2);
        for b in cross {
            assert_eq!(b.multiplicity, 2);
            let (xa, ya) = root.geometry.sites[b.a];
            let (xb, yb) = root.geometry.sites[b.b];
            assert_eq!(xa, xb);
            assert_ne!(ya, yb);
        }
    }

    #[test]
    fn plan_six_by_three_from_three_by_one() {
        let target = build_geometry(6, 3, true, true).unwrap();
        let base = build_geometry(3, 1, true, true).unwrap();
        let s = plan_merge_schedule(&target, &base, &[], 2, 4096).unwrap();
        let shapes: Vec<(usize, usize)> =
            s.nodes.iter().map(|n| n.geometry.shape()).collect();
        assert_eq!(shapes, vec![(3, 1), (6, 1), (6, 2), (6, 3)]);
    }

    #[test]
    fn schedule_bond_assignment_is_total() {
        let target = build_geometry(4, 4, true, true).unwrap();
        let base = build_geometry(2, 2, true, true).unwrap();
        let s = plan_merge_schedule(&target, &base, &[], 2, 4096).unwrap();
        let canonical = build_geometry(4, 4, true, true).unwrap();
        let root = &s.nodes[s.root];
        assert_eq!(
            root.geometry.total_multiplicity(),
            canonical.total_multiplicity()
        );
        let NodeKind::Merged { bond_sources, .. } = &root.kind else {
            panic!();
        };
        assert_eq!(bond_sources.len(), root.geometry.bonds.len());
    }

    #[test]
    fn schedule_is_deterministic() {
        let target = build_geometry(6, 3, true, true).unwrap();
        let base = build_geometry(3, 1, true, true).unwrap();
        let a = plan_merge_schedule(&target, &base, &[100], 2, 4096).unwrap();
        let b = plan_merge_schedule(&target, &base, &[100], 2, 4096).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn plan_rejects_unreachable_and_oversized() {
        let target = build_geometry(5, 4, true, true).unwrap();
        let base = build_geometry(2, 2, true, true).unwrap();
        assert!(matches!(
            plan_merge_schedule(&target, &base, &[], 2, 4096),
            Err(LatticeError::UnreachableTarget { .. })
        ));
        let target = build_geometry(4, 4, true, true).unwrap();
        assert!(matches!(
            plan_merge_schedule(&target, &base, &[], 2, 8),
            Err(LatticeError::LeafTooLarge(..))
        ));
    }
}
