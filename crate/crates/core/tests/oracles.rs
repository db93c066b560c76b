use std::f64::consts::{LN_2, PI};

use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use parabolicity_core::capacity::capacity;
use parabolicity_core::domain::{build_radial_grid, build_surface_grid, Grading, OuterRadius, RadialGrid};
use parabolicity_core::solver::{p_energy, solve_dirichlet};
use parabolicity_core::{BoundaryValues, ModelManifold, ScalarField, SolverOptions};

/// Dense Dirichlet solve for p = 2, with the stiffness matrix read off the
/// quadratic energy by polarisation.
fn dense_dirichlet(domain: &parabolicity_core::DiscreteDomain, bc: &BoundaryValues) -> Vec<f64> {
    let n = domain.len();
    let unit = |i: usize| {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    };
    let energy = |v: Vec<f64>| p_energy(domain, &ScalarField::new(domain, v).unwrap(), 2.0);
    let diag: Vec<f64> = (0..n).map(|i| energy(unit(i))).collect();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, i)] = diag[i];
        for j in 0..i {
            let mut v = unit(i);
            v[j] = 1.0;
            let off = 0.5 * (energy(v) - diag[i] - diag[j]);
            a[(i, j)] = off;
            a[(j, i)] = off;
        }
    }
    let free: Vec<usize> = (0..n).filter(|&i| bc.value(i).is_none()).collect();
    let fixed = DVector::from_iterator(n, (0..n).map(|i| bc.value(i).unwrap_or(0.0)));
    let rhs = -(&a * &fixed);
    let k = free.len();
    let sub = DMatrix::from_fn(k, k, |r, c| a[(free[r], free[c])]);
    let b = DVector::from_iterator(k, free.iter().map(|&i| rhs[i]));
    let x = sub.lu().solve(&b).expect("stiffness matrix is nonsingular");
    let mut u = fixed.as_slice().to_vec();
    for (r, &i) in free.iter().enumerate() {
        u[i] = x[r];
    }
    u
}

#[test]
fn surface_solver_matches_dense_linear_solve() {
    let m = ModelManifold::euclidean(2);
    let d = build_surface_grid(&m, 2.0, 3.0, 10, 8).unwrap();
    let mut bc = BoundaryValues::new(d.len());
    bc.fix(&d.inner_boundary(), 1.0);
    for (k, node) in d.outer_boundary().iter().enumerate() {
        bc.fix_node(node, (k as f64 * 0.7).sin());
    }
    let s = solve_dirichlet(&d, &bc, 2.0, &SolverOptions::with_tol(1e-12)).unwrap();
    assert!(s.report.converged());
    let dense = dense_dirichlet(&d, &bc);
    for (x, y) in s.field.values.iter().zip(&dense) {
        assert_relative_eq!(*x, *y, epsilon = 1e-10);
    }
}

/// Richardson extrapolation for a second-order sequence at `m`, `2m`.
fn extrapolate(coarse: f64, fine: f64) -> f64 {
    (4.0 * fine - coarse) / 3.0
}

fn annulus_capacity(m: &ModelManifold, p: f64, r_max: f64, cells: usize) -> f64 {
    let d = build_radial_grid(m, p, r_max, cells).unwrap();
    capacity(&d, &d.inner_boundary(), p, &SolverOptions::with_tol(1e-12)).unwrap().value
}

#[test]
fn extrapolated_planar_capacity_is_two_pi_over_ln_two() {
    let m = ModelManifold::euclidean(2);
    let exact = 2.0 * PI / LN_2;
    let coarse = annulus_capacity(&m, 2.0, 2.0, 128);
    let fine = annulus_capacity(&m, 2.0, 2.0, 256);
    assert!((fine - exact).abs() < (coarse - exact).abs());
    assert_relative_eq!(extrapolate(coarse, fine), exact, max_relative = 1e-7);
}

#[test]
fn extrapolated_capacity_matches_closed_form_for_other_exponents() {
    let m = ModelManifold::euclidean(2);
    for p in [1.5f64, 3.0] {
        // cap_p of the annulus 1 < r < 2 in the plane.
        let exact = 2.0 * PI * ((2.0 - p).abs() / (p - 1.0)).powf(p - 1.0)
            / (2f64.powf((p - 2.0) / (p - 1.0)) - 1.0).abs().powf(p - 1.0);
        let coarse = annulus_capacity(&m, p, 2.0, 128);
        let fine = annulus_capacity(&m, p, 2.0, 256);
        assert_relative_eq!(extrapolate(coarse, fine), exact, max_relative = 1e-6);
    }
}

#[test]
fn unit_sphere_capacity_in_space_tends_to_four_pi() {
    let m = ModelManifold::euclidean(3);
    let r_max = 1e6;
    let d = RadialGrid::new(OuterRadius::Radius(r_max), 2048)
        .graded(Grading::Logarithmic)
        .build(&m, 2.0)
        .unwrap();
    let cap = capacity(&d, &d.inner_boundary(), 2.0, &SolverOptions::with_tol(1e-12)).unwrap().value;
    assert_relative_eq!(cap, 4.0 * PI / (1.0 - 1.0 / r_max), max_relative = 1e-3);
}

#[test]
fn radial_data_on_a_surface_grid_gives_the_radial_solution() {
    let m = ModelManifold::euclidean(2);
    for p in [1.5f64, 3.0] {
        let radial = build_radial_grid(&m, p, 2.0, 24).unwrap();
        let surface = build_surface_grid(&m, p, 2.0, 24, 8).unwrap();
        let opts = SolverOptions::with_tol(1e-11);
        let a = solve_dirichlet(&radial, &BoundaryValues::condenser(&radial, 1.0, 0.0), p, &opts).unwrap();
        let b = solve_dirichlet(&surface, &BoundaryValues::condenser(&surface, 1.0, 0.0), p, &opts).unwrap();
        for i in 0..surface.len() {
            let ring = surface.ring_of(i);
            assert_relative_eq!(b.field.values[i], a.field.values[ring], epsilon = 1e-8);
        }
    }
}
