//! Bilinear four-node quadrilateral in plane strain.

use nalgebra::{SMatrix, SVector};

pub type ElementMatrix = SMatrix<f64, 8, 8>;
pub type ElementVector = SVector<f64, 8>;

/// Corner order of the reference square, counter-clockwise from (-1, -1).
const CORNERS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];

/// Plane-strain constitutive matrix (Voigt order xx, yy, xy with engineering
/// shear) for modulus `e` and Poisson ratio `nu`.
pub fn plane_strain_d(e: f64, nu: f64) -> SMatrix<f64, 3, 3> {
    let c = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
    SMatrix::<f64, 3, 3>::new(
        c * (1.0 - nu),
        c * nu,
        0.0,
        c * nu,
        c * (1.0 - nu),
        0.0,
        0.0,
        0.0,
        c * (1.0 - 2.0 * nu) / 2.0,
    )
}

/// Strain-displacement matrix at reference point `(xi, eta)` of an
/// axis-aligned `hx` by `hy` rectangle.
fn strain_displacement(xi: f64, eta: f64, hx: f64, hy: f64) -> SMatrix<f64, 3, 8> {
    let mut b = SMatrix::<f64, 3, 8>::zeros();
    for (a, &(xa, ya)) in CORNERS.iter().enumerate() {
        let dn_dx = 0.25 * xa * (1.0 + eta * ya) * 2.0 / hx;
        let dn_dy = 0.25 * ya * (1.0 + xi * xa) * 2.0 / hy;
        b[(0, 2 * a)] = dn_dx;
        b[(1, 2 * a + 1)] = dn_dy;
        b[(2, 2 * a)] = dn_dy;
        b[(2, 2 * a + 1)] = dn_dx;
    }
    b
}

/// Element stiffness for unit modulus, 2x2 Gauss quadrature, unit thickness.
/// The stiffness of an element with modulus `E` is `E` times this matrix.
pub fn unit_stiffness(hx: f64, hy: f64, nu: f64) -> ElementMatrix {
    let d = plane_strain_d(1.0, nu);
    let g = 1.0 / 3.0_f64.sqrt();
    let det_j = hx * hy / 4.0;
    let mut k = ElementMatrix::zeros();
    for &xi in &[-g, g] {
        for &eta in &[-g, g] {
            let b = strain_displacement(xi, eta, hx, hy);
            k += b.transpose() * d * b * det_j;
        }
    }
    k
}
