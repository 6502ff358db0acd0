//! Real roots of three quadrics in three unknowns.
//!
//! Each quadric is given over the CGR monomial order
//! `[x², y², z², xy, xz, yz, x, y, z, 1]`. A generic system has 8 complex
//! solutions. We build the degree-4 Macaulay matrix (each quadric times every
//! monomial of degree ≤ 2), take its 8-dimensional null space and recover the
//! roots from a shift (multiplication) eigenproblem on the degree ≤ 3 rows.

use nalgebra::{DMatrix, DVector, SMatrix, Vector3};

use crate::constraints::Monomials;

const MAX_DEGREE: usize = 4;
const ROOTS: usize = 8;
/// Fixed generic linear form used as the shift polynomial.
const SHIFT: [f64; 3] = [0.716_473_2, -0.393_812_7, 0.576_038_5];

/// Exponent triples of all monomials with total degree ≤ 4, graded order.
fn monomial_basis() -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(35);
    for deg in 0..=MAX_DEGREE {
        for a in (0..=deg).rev() {
            for b in (0..=deg - a).rev() {
                out.push([a, b, deg - a - b]);
            }
        }
    }
    out
}

struct Basis {
    exps: Vec<[usize; 3]>,
    lookup: [[[usize; MAX_DEGREE + 1]; MAX_DEGREE + 1]; MAX_DEGREE + 1],
}

impl Basis {
    fn new() -> Self {
        let exps = monomial_basis();
        let mut lookup = [[[usize::MAX; MAX_DEGREE + 1]; MAX_DEGREE + 1]; MAX_DEGREE + 1];
        for (i, e) in exps.iter().enumerate() {
            lookup[e[0]][e[1]][e[2]] = i;
        }
        Self { exps, lookup }
    }

    fn index(&self, e: [usize; 3]) -> usize {
        self.lookup[e[0]][e[1]][e[2]]
    }

    fn degree(&self, i: usize) -> usize {
        self.exps[i].iter().sum()
    }
}

/// Exponents of the CGR monomial order.
const QUADRIC_EXPS: [[usize; 3]; 10] = [
    [2, 0, 0],
    [0, 2, 0],
    [0, 0, 2],
    [1, 1, 0],
    [1, 0, 1],
    [0, 1, 1],
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [0, 0, 0],
];

fn add(a: [usize; 3], b: [usize; 3]) -> [usize; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Candidate real roots of `q_i · r(s) = 0, i = 0..3`.
///
/// Roots whose eigenvalue has a small imaginary part are returned too (real
/// part of the recovered point); callers are expected to polish candidates
/// against their own objective.
pub fn solve_three_quadrics(quadrics: &[Monomials; 3]) -> Vec<Vector3<f64>> {
    let basis = Basis::new();
    let n = basis.exps.len();
    let multipliers: Vec<usize> = (0..n).filter(|&i| basis.degree(i) <= 2).collect();

    // Square, zero-padded Macaulay matrix so the SVD yields the full right basis.
    let mut mac = DMatrix::<f64>::zeros(n, n);
    let mut row = 0;
    for q in quadrics {
        let norm = q.norm();
        if norm == 0.0 {
            return Vec::new();
        }
        for &mu in &multipliers {
            for (k, e) in QUADRIC_EXPS.iter().enumerate() {
                mac[(row, basis.index(add(*e, basis.exps[mu])))] += q[k] / norm;
            }
            row += 1;
        }
    }

    let svd = mac.svd(false, true);
    let Some(v_t) = svd.v_t else {
        return Vec::new();
    };
    // Rows of v_t are sorted by descending singular value; the null space is the tail.
    let null = v_t.rows(n - ROOTS, ROOTS).transpose();

    let low: Vec<usize> = (0..n).filter(|&i| basis.degree(i) <= 3).collect();
    let mut s1 = DMatrix::<f64>::zeros(low.len(), ROOTS);
    let mut sg = DMatrix::<f64>::zeros(low.len(), ROOTS);
    for (r, &mu) in low.iter().enumerate() {
        s1.set_row(r, &null.row(mu));
        let e = basis.exps[mu];
        for (axis, c) in SHIFT.iter().enumerate() {
            let mut shifted = e;
            shifted[axis] += 1;
            let idx = basis.index(shifted);
            let contrib = null.row(idx) * *c;
            let current = sg.row(r).into_owned();
            sg.set_row(r, &(current + contrib));
        }
    }

    let Ok(action) = s1.clone().svd(true, true).solve(&sg, 1e-12) else {
        return Vec::new();
    };
    let action = SMatrix::<f64, ROOTS, ROOTS>::from_iterator(action.iter().copied());
    let eigenvalues = action.complex_eigenvalues();

    let one = basis.index([0, 0, 0]);
    let xs = [basis.index([1, 0, 0]), basis.index([0, 1, 0]), basis.index([0, 0, 1])];
    let mut roots = Vec::new();
    for lambda in eigenvalues.iter() {
        if lambda.im.abs() > 0.05 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let shifted = action - SMatrix::<f64, ROOTS, ROOTS>::identity() * lambda.re;
        let svd = shifted.svd(false, true);
        let Some(v_t) = svd.v_t else { continue };
        let w: DVector<f64> = DVector::from_iterator(ROOTS, v_t.row(ROOTS - 1).iter().copied());
        let mono = &s1 * w;
        let scale = mono[one];
        if scale.abs() < 1e-10 * mono.norm() {
            // Root at infinity.
            continue;
        }
        let root = Vector3::new(mono[xs[0]] / scale, mono[xs[1]] / scale, mono[xs[2]] / scale);
        if root.iter().all(|v| v.is_finite()) {
            roots.push(root);
        }
    }
    roots
}
