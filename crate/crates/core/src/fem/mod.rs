//! Plane-strain linear elasticity on a structured grid of bilinear quads.
//!
//! Each element carries one parameter `psi_k = ln(E_k)`. Loading is a mix of
//! prescribed displacements and nodal forces. With a linear constitutive law
//! the residual `K(psi) U - f` is linear in `U`, so a converged state is a
//! single factorization and solve; the same factor serves the adjoint solves
//! that produce output sensitivities.

mod banded;
mod element;

use std::collections::HashSet;

use nalgebra::DMatrix;
use rayon::prelude::*;

pub use banded::{BandedCholesky, BandedSpd};
pub use element::{plane_strain_d, unit_stiffness, ElementMatrix, ElementVector};

use crate::error::{Error, Result};

/// Regular `nx` by `ny` grid of rectangles covering `[0, lx] x [0, ly]`.
///
/// Nodes are numbered row by row from the bottom-left corner, elements
/// likewise; node `n` owns displacement dofs `2n` (x) and `2n + 1` (y).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh2D {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

/// Displacement component of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl Mesh2D {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidInput(format!(
                "mesh needs at least one element per axis, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "mesh side lengths must be positive, got {lx} x {ly}"
            )));
        }
        Ok(Self { nx, ny, lx, ly })
    }

    pub fn n_elements(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.n_nodes()
    }

    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn node(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix <= self.nx && iy <= self.ny);
        iy * (self.nx + 1) + ix
    }

    pub fn node_grid(&self, node: usize) -> (usize, usize) {
        (node % (self.nx + 1), node / (self.nx + 1))
    }

    pub fn node_coords(&self, node: usize) -> (f64, f64) {
        let (ix, iy) = self.node_grid(node);
        (ix as f64 * self.hx(), iy as f64 * self.hy())
    }

    pub fn dof(&self, ix: usize, iy: usize, axis: Axis) -> usize {
        2 * self.node(ix, iy)
            + match axis {
                Axis::X => 0,
                Axis::Y => 1,
            }
    }

    pub fn element(&self, ex: usize, ey: usize) -> usize {
        debug_assert!(ex < self.nx && ey < self.ny);
        ey * self.nx + ex
    }

    pub fn element_grid(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    pub fn element_center(&self, k: usize) -> (f64, f64) {
        let (ex, ey) = self.element_grid(k);
        ((ex as f64 + 0.5) * self.hx(), (ey as f64 + 0.5) * self.hy())
    }

    /// Corner nodes, counter-clockwise from the bottom-left one.
    pub fn element_nodes(&self, k: usize) -> [usize; 4] {
        let (ex, ey) = self.element_grid(k);
        [
            self.node(ex, ey),
            self.node(ex + 1, ey),
            self.node(ex + 1, ey + 1),
            self.node(ex, ey + 1),
        ]
    }

    pub fn element_dofs(&self, k: usize) -> [usize; 8] {
        let nodes = self.element_nodes(k);
        let mut dofs = [0; 8];
        for (a, &n) in nodes.iter().enumerate() {
            dofs[2 * a] = 2 * n;
            dofs[2 * a + 1] = 2 * n + 1;
        }
        dofs
    }

    /// Edge-adjacent element pairs `(k, l)` with `k < l`, each listed once.
    pub fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for ey in 0..self.ny {
            for ex in 0..self.nx {
                let k = self.element(ex, ey);
                if ex + 1 < self.nx {
                    pairs.push((k, self.element(ex + 1, ey)));
                }
                if ey + 1 < self.ny {
                    pairs.push((k, self.element(ex, ey + 1)));
                }
            }
        }
        pairs
    }
}

/// Prescribed displacements and applied nodal forces, both keyed by global dof.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundarySpec {
    pub dirichlet: Vec<(usize, f64)>,
    pub traction: Vec<(usize, f64)>,
}

impl BoundarySpec {
    /// Bottom edge fixed, top edge moved by `(0, top_uy)`, vertical edges free.
    pub fn platen_compression(mesh: &Mesh2D, top_uy: f64) -> Self {
        let mut dirichlet = Vec::with_capacity(4 * (mesh.nx + 1));
        for ix in 0..=mesh.nx {
            dirichlet.push((mesh.dof(ix, 0, Axis::X), 0.0));
            dirichlet.push((mesh.dof(ix, 0, Axis::Y), 0.0));
        }
        for ix in 0..=mesh.nx {
            dirichlet.push((mesh.dof(ix, mesh.ny, Axis::X), 0.0));
            dirichlet.push((mesh.dof(ix, mesh.ny, Axis::Y), top_uy));
        }
        Self {
            dirichlet,
            traction: Vec::new(),
        }
    }

    pub fn validate(&self, mesh: &Mesh2D) -> Result<()> {
        let n = mesh.n_dofs();
        let mut seen = HashSet::new();
        for &(dof, v) in &self.dirichlet {
            if dof >= n {
                return Err(Error::InvalidInput(format!(
                    "prescribed dof {dof} out of range (mesh has {n} dofs)"
                )));
            }
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("prescribed value at dof {dof} is {v}")));
            }
            if !seen.insert(dof) {
                return Err(Error::InvalidInput(format!("dof {dof} prescribed twice")));
            }
        }
        let mut loaded = HashSet::new();
        for &(dof, v) in &self.traction {
            if dof >= n {
                return Err(Error::InvalidInput(format!(
                    "loaded dof {dof} out of range (mesh has {n} dofs)"
                )));
            }
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("nodal force at dof {dof} is {v}")));
            }
            if seen.contains(&dof) {
                return Err(Error::InvalidInput(format!(
                    "dof {dof} is both prescribed and loaded"
                )));
            }
            if !loaded.insert(dof) {
                return Err(Error::InvalidInput(format!("dof {dof} loaded twice")));
            }
        }
        Ok(())
    }

    /// Whether the loading is purely kinematic (no applied forces).
    pub fn is_displacement_driven(&self) -> bool {
        self.traction.iter().all(|&(_, f)| f == 0.0)
    }
}

/// Per-element log-modulus with an optional mask of clamped entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialField {
    pub psi: Vec<f64>,
    pub fixed_mask: Vec<bool>,
}

impl MaterialField {
    pub fn new(psi: Vec<f64>, fixed_mask: Vec<bool>) -> Result<Self> {
        if psi.len() != fixed_mask.len() {
            return Err(Error::DimensionMismatch {
                what: "fixed mask length",
                expected: psi.len(),
                got: fixed_mask.len(),
            });
        }
        if let Some(k) = psi.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "material field entry {k} is not finite ({})",
                psi[k]
            )));
        }
        Ok(Self { psi, fixed_mask })
    }

    pub fn free(psi: Vec<f64>) -> Result<Self> {
        let n = psi.len();
        Self::new(psi, vec![false; n])
    }

    pub fn uniform(mesh: &Mesh2D, value: f64) -> Result<Self> {
        Self::free(vec![value; mesh.n_elements()])
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.psi.len()).filter(|&k| !self.fixed_mask[k]).collect()
    }

    pub fn free_values(&self) -> Vec<f64> {
        self.free_indices().into_iter().map(|k| self.psi[k]).collect()
    }

    /// Copy of this field with the free entries replaced by `values`, in
    /// element order. Clamped entries are untouched.
    pub fn with_free_values(&self, values: &[f64]) -> Result<Self> {
        let free = self.free_indices();
        if values.len() != free.len() {
            return Err(Error::DimensionMismatch {
                what: "free parameter vector",
                expected: free.len(),
                got: values.len(),
            });
        }
        let mut psi = self.psi.clone();
        for (&k, &v) in free.iter().zip(values) {
            psi[k] = v;
        }
        Self::new(psi, self.fixed_mask.clone())
    }

    pub fn moduli(&self) -> impl Iterator<Item = f64> + '_ {
        self.psi.iter().map(|p| p.exp())
    }
}

/// Converged displacement state together with the factorized free-free
/// stiffness block, kept for adjoint solves.
#[derive(Debug, Clone)]
pub struct Solution {
    pub u: Vec<f64>,
    factor: BandedCholesky,
}

impl Solution {
    pub fn factor(&self) -> &BandedCholesky {
        &self.factor
    }
}

/// Assembly and solution machinery for one mesh, boundary condition and Poisson
/// ratio. The per-element stiffness is precomputed for unit modulus since all
/// elements share the same geometry.
#[derive(Debug, Clone)]
pub struct PlaneStrainSolver {
    mesh: Mesh2D,
    bc: BoundarySpec,
    poisson: f64,
    k_unit: ElementMatrix,
    /// Global dof to position among the free dofs.
    free_index: Vec<Option<usize>>,
    free_dofs: Vec<usize>,
    prescribed: Vec<Option<f64>>,
    bandwidth: usize,
}

impl PlaneStrainSolver {
    pub fn new(mesh: Mesh2D, bc: BoundarySpec, poisson: f64) -> Result<Self> {
        if !(poisson > -1.0 && poisson < 0.5) {
            return Err(Error::InvalidInput(format!(
                "Poisson ratio must lie in (-1, 0.5), got {poisson}"
            )));
        }
        bc.validate(&mesh)?;
        let n = mesh.n_dofs();
        let mut prescribed = vec![None; n];
        for &(dof, v) in &bc.dirichlet {
            prescribed[dof] = Some(v);
        }
        let mut free_index = vec![None; n];
        let mut free_dofs = Vec::new();
        for dof in 0..n {
            if prescribed[dof].is_none() {
                free_index[dof] = Some(free_dofs.len());
                free_dofs.push(dof);
            }
        }
        let mut bandwidth = 0;
        for k in 0..mesh.n_elements() {
            let idx: Vec<usize> = mesh
                .element_dofs(k)
                .iter()
                .filter_map(|&d| free_index[d])
                .collect();
            if let (Some(lo), Some(hi)) = (idx.iter().min(), idx.iter().max()) {
                bandwidth = bandwidth.max(hi - lo);
            }
        }
        let k_unit = unit_stiffness(mesh.hx(), mesh.hy(), poisson);
        Ok(Self {
            mesh,
            bc,
            poisson,
            k_unit,
            free_index,
            free_dofs,
            prescribed,
            bandwidth,
        })
    }

    pub fn mesh(&self) -> &Mesh2D {
        &self.mesh
    }

    pub fn boundary(&self) -> &BoundarySpec {
        &self.bc
    }

    pub fn poisson(&self) -> f64 {
        self.poisson
    }

    /// Free (unprescribed) dofs in increasing order.
    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }

    pub fn unit_element_stiffness(&self) -> &ElementMatrix {
        &self.k_unit
    }

    fn check_field(&self, field: &MaterialField) -> Result<()> {
        if field.len() != self.mesh.n_elements() {
            return Err(Error::DimensionMismatch {
                what: "material field length",
                expected: self.mesh.n_elements(),
                got: field.len(),
            });
        }
        if let Some(k) = field.psi.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "material field entry {k} is not finite"
            )));
        }
        Ok(())
    }

    fn gather(&self, u: &[f64], k: usize) -> ElementVector {
        let dofs = self.mesh.element_dofs(k);
        ElementVector::from_fn(|a, _| u[dofs[a]])
    }

    /// Assemble `K(psi)`, apply the Dirichlet set by partitioning and solve
    /// `K_ff U_f = f_f - K_fp U_p`.
    pub fn solve(&self, field: &MaterialField) -> Result<Solution> {
        self.check_field(field)?;
        let nf = self.free_dofs.len();
        let mut k_ff = BandedSpd::zeros(nf, self.bandwidth);
        let mut rhs = vec![0.0; nf];
        for &(dof, f) in &self.bc.traction {
            if let Some(i) = self.free_index[dof] {
                rhs[i] += f;
            }
        }
        for (k, e) in field.moduli().enumerate() {
            let dofs = self.mesh.element_dofs(k);
            for a in 0..8 {
                let Some(i) = self.free_index[dofs[a]] else {
                    continue;
                };
                for b in 0..8 {
                    let kab = e * self.k_unit[(a, b)];
                    match (self.free_index[dofs[b]], self.prescribed[dofs[b]]) {
                        (Some(j), _) => k_ff.add(i, j, kab),
                        (None, Some(up)) => rhs[i] -= kab * up,
                        (None, None) => unreachable!("dof is either free or prescribed"),
                    }
                }
            }
        }
        let factor = k_ff.cholesky()?;
        let u_f = factor.solve(&rhs);
        let mut u = vec![0.0; self.mesh.n_dofs()];
        for (dof, p) in self.prescribed.iter().enumerate() {
            if let Some(v) = p {
                u[dof] = *v;
            }
        }
        for (i, &dof) in self.free_dofs.iter().enumerate() {
            u[dof] = u_f[i];
        }
        Ok(Solution { u, factor })
    }

    /// Sensitivities `d u_q / d psi_k` of the observed dofs, one adjoint
    /// solve per observable against the stored factor. Columns of clamped
    /// elements are zero.
    pub fn jacobian(
        &self,
        field: &MaterialField,
        solution: &Solution,
        observed: &[usize],
    ) -> Result<DMatrix<f64>> {
        self.check_field(field)?;
        let rows: Vec<usize> = observed
            .iter()
            .map(|&dof| {
                if dof >= self.mesh.n_dofs() {
                    Err(Error::InvalidInput(format!("observed dof {dof} out of range")))
                } else {
                    self.free_index[dof].ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "observed dof {dof} is prescribed; its sensitivity is identically zero"
                        ))
                    })
                }
            })
            .collect::<Result<_>>()?;

        let n_el = self.mesh.n_elements();
        // dK/dpsi_k U restricted to element k: E_k * K_unit * u_e.
        let element_forces: Vec<Option<ElementVector>> = (0..n_el)
            .map(|k| {
                if field.fixed_mask[k] {
                    None
                } else {
                    Some(self.k_unit * self.gather(&solution.u, k) * field.psi[k].exp())
                }
            })
            .collect();

        let nf = self.free_dofs.len();
        let row_vals: Vec<Vec<f64>> = rows
            .par_iter()
            .map(|&i| {
                let mut adj = vec![0.0; nf];
                adj[i] = 1.0;
                solution.factor.solve_in_place(&mut adj);
                (0..n_el)
                    .map(|k| match &element_forces[k] {
                        None => 0.0,
                        Some(fk) => {
                            let dofs = self.mesh.element_dofs(k);
                            let mut s = 0.0;
                            for a in 0..8 {
                                if let Some(j) = self.free_index[dofs[a]] {
                                    s += adj[j] * fk[a];
                                }
                            }
                            -s
                        }
                    })
                    .collect()
            })
            .collect();

        Ok(DMatrix::from_fn(rows.len(), n_el, |i, k| row_vals[i][k]))
    }

    /// `U^T K(psi) U` summed element by element.
    pub fn strain_energy(&self, field: &MaterialField, u: &[f64]) -> f64 {
        field
            .moduli()
            .enumerate()
            .map(|(k, e)| {
                let ue = self.gather(u, k);
                e * (ue.transpose() * self.k_unit * ue)[(0, 0)]
            })
            .sum()
    }
}

/// Solve the forward problem and return the full displacement vector.
pub fn assemble_and_solve(
    mesh: &Mesh2D,
    bc: &BoundarySpec,
    field: &MaterialField,
    poisson: f64,
) -> Result<Vec<f64>> {
    let solver = PlaneStrainSolver::new(*mesh, bc.clone(), poisson)?;
    Ok(solver.solve(field)?.u)
}

/// Pick the observed entries `y_i = U[q_i]`.
pub fn observe(u: &[f64], selection: &[usize]) -> Result<Vec<f64>> {
    selection
        .iter()
        .map(|&i| {
            u.get(i).copied().ok_or_else(|| {
                Error::InvalidInput(format!(
                    "observation index {i} out of range ({} dofs)",
                    u.len()
                ))
            })
        })
        .collect()
}

/// Output sensitivities `G = dy/dpsi` via one forward solve plus one adjoint
/// solve per observable.
pub fn adjoint_jacobian(
    mesh: &Mesh2D,
    bc: &BoundarySpec,
    field: &MaterialField,
    poisson: f64,
    selection: &[usize],
) -> Result<DMatrix<f64>> {
    let solver = PlaneStrainSolver::new(*mesh, bc.clone(), poisson)?;
    let sol = solver.solve(field)?;
    solver.jacobian(field, &sol, selection)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_mesh() -> (Mesh2D, BoundarySpec) {
        let mesh = Mesh2D::new(10, 10, 10.0, 10.0).unwrap();
        let bc = BoundarySpec::platen_compression(&mesh, -0.1);
        (mesh, bc)
    }

    #[test]
    fn uniform_field_gives_uniform_strain() {
        let (mesh, bc) = example_mesh();
        let field = MaterialField::uniform(&mesh, 0.0).unwrap();
        let u = assemble_and_solve(&mesh, &bc, &field, 0.0).unwrap();
        for n in 0..mesh.n_nodes() {
            let (_, y) = mesh.node_coords(n);
            assert!(u[2 * n].abs() < 1e-12, "ux at node {n} = {}", u[2 * n]);
            assert!((u[2 * n + 1] + 0.01 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_all_moduli_leaves_displacements_unchanged() {
        let (mesh, bc) = example_mesh();
        let psi: Vec<f64> = (0..100).map(|k| ((k * 37) % 11) as f64 * 0.1).collect();
        let shifted: Vec<f64> = psi.iter().map(|p| p + 3.0_f64.ln()).collect();
        let u0 = assemble_and_solve(&mesh, &bc, &MaterialField::free(psi).unwrap(), 0.0).unwrap();
        let u1 =
            assemble_and_solve(&mesh, &bc, &MaterialField::free(shifted).unwrap(), 0.0).unwrap();
        for (a, b) in u0.iter().zip(&u1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn example_mesh_has_198_free_dofs() {
        let (mesh, bc) = example_mesh();
        let solver = PlaneStrainSolver::new(mesh, bc, 0.0).unwrap();
        assert_eq!(solver.free_dofs().len(), 198);
    }

    #[test]
    fn observe_selects_entries() {
        let u = vec![1.0, 2.0, 3.0];
        assert_eq!(observe(&u, &[2]).unwrap(), vec![3.0]);
        assert!(observe(&u, &[]).unwrap().is_empty());
        assert!(observe(&u, &[3]).is_err());
    }

    #[test]
    fn missing_constraints_are_diagnosed() {
        let mesh = Mesh2D::new(2, 2, 1.0, 1.0).unwrap();
        // Only the y-dofs of the bottom edge: free horizontal translation.
        let bc = BoundarySpec {
            dirichlet: (0..=2).map(|ix| (mesh.dof(ix, 0, Axis::Y), 0.0)).collect(),
            traction: vec![(mesh.dof(1, 2, Axis::Y), -1.0)],
        };
        let field = MaterialField::uniform(&mesh, 0.0).unwrap();
        let err = assemble_and_solve(&mesh, &bc, &field, 0.3).unwrap_err();
        assert!(matches!(err, Error::SingularStiffness { .. }));
    }

    #[test]
    fn non_finite_field_is_rejected() {
        assert!(MaterialField::free(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn overlapping_boundary_sets_are_rejected() {
        let mesh = Mesh2D::new(1, 1, 1.0, 1.0).unwrap();
        let bc = BoundarySpec {
            dirichlet: vec![(0, 0.0)],
            traction: vec![(0, 1.0)],
        };
        assert!(bc.validate(&mesh).is_err());
    }

    #[test]
    fn prescribed_dofs_have_no_sensitivity() {
        let (mesh, bc) = example_mesh();
        let field = MaterialField::uniform(&mesh, 0.0).unwrap();
        let err = adjoint_jacobian(&mesh, &bc, &field, 0.0, &[0]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn clamped_columns_are_zero_and_shift_direction_is_null() {
        let mesh = Mesh2D::new(3, 3, 3.0, 3.0).unwrap();
        let bc = BoundarySpec::platen_compression(&mesh, -0.05);
        let psi: Vec<f64> = (0..9).map(|k| 0.2 * k as f64).collect();
        let mut mask = vec![false; 9];
        mask[4] = true;
        let solver = PlaneStrainSolver::new(mesh, bc.clone(), 0.2).unwrap();
        let q = solver.free_dofs().to_vec();

        let field = MaterialField::new(psi.clone(), mask).unwrap();
        let sol = solver.solve(&field).unwrap();
        let g = solver.jacobian(&field, &sol, &q).unwrap();
        assert!(g.column(4).iter().all(|&v| v == 0.0));

        let field = MaterialField::free(psi).unwrap();
        let sol = solver.solve(&field).unwrap();
        let g = solver.jacobian(&field, &sol, &q).unwrap();
        let row_sums = &g * nalgebra::DVector::from_element(9, 1.0);
        assert!(row_sums.amax() < 1e-12 * g.amax().max(1.0));
    }

    #[test]
    fn energy_is_positive_for_nonzero_solution() {
        let (mesh, bc) = example_mesh();
        let field = MaterialField::uniform(&mesh, 1.0).unwrap();
        let solver = PlaneStrainSolver::new(mesh, bc, 0.0).unwrap();
        let sol = solver.solve(&field).unwrap();
        assert!(solver.strain_energy(&field, &sol.u) > 0.0);
        let zero = vec![0.0; mesh.n_dofs()];
        assert_eq!(solver.strain_energy(&field, &zero), 0.0);
    }

    #[test]
    fn neighbor_pairs_count() {
        let mesh = Mesh2D::new(10, 10, 1.0, 1.0).unwrap();
        assert_eq!(mesh.neighbor_pairs().len(), 2 * 10 * 9);
    }
}
