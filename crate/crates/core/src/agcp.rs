//! Confidence-gated propagation of ground control points (GCPs).
//!
//! Pixels whose confidence exceeds `tau` are GCPs. The refined disparity
//! minimizes
//!
//! ```text
//! E(x) = Σ_i Σ_{v∈M_i} h_v c_iv (x_i − D'_v)²  +  γ Σ_i Σ_{j∈N4(i)} w_ij (x_i − x_j)²
//! ```
//!
//! where `M_i` is a square window around `i`, `h_v` marks GCPs and `c`, `w`
//! are bilateral kernels on color and position. A vanishing term
//! `ε Σ_i (x_i − D'_i)²` keeps the problem definite and lets pixels that are
//! only negligibly coupled to any GCP keep their input value. Setting the
//! gradient to zero gives a sparse symmetric positive definite system,
//! solved here with Jacobi-preconditioned conjugate gradients.

use crate::error::{Error, Result};
use crate::stereo::{ConfidenceMap, DisparityMap, Image};

/// Weight `ε` of the pull towards the input disparity.
pub const EPS_REG: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AgcpConfig {
    pub tau: f64,
    pub gamma: f64,
    pub radius_m: usize,
    pub sigma_color: f64,
    pub sigma_space: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for AgcpConfig {
    fn default() -> Self {
        AgcpConfig {
            tau: 0.7,
            gamma: 1.0,
            radius_m: 2,
            sigma_color: 0.1,
            sigma_space: 2.0,
            cg_tol: 1e-8,
            cg_max_iter: 5000,
        }
    }
}

impl AgcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::invalid(format!("gamma {} must be positive", self.gamma)));
        }
        if !(self.sigma_color > 0.0) || !(self.sigma_space > 0.0) {
            return Err(Error::invalid("kernel bandwidths must be positive"));
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iter == 0 {
            return Err(Error::invalid("CG tolerance and iteration cap must be positive"));
        }
        Ok(())
    }
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, value)` lists; duplicate columns are
    /// summed and columns sorted.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                if c >= n {
                    return Err(Error::shape(format!("column {c} outside {n}×{n} matrix")));
                }
                if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Result<Self> {
        Self::from_rows(
            a.iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0.0)
                        .map(|(j, &v)| (j, v))
                        .collect()
                })
                .collect(),
        )
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.col_idx[s..e].binary_search(&j) {
            Ok(k) => self.values[s + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *o = s;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.col_idx[k]] = self.values[k];
            }
        }
        d
    }

    /// Largest `|A_ij − A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                worst = worst.max((self.values[k] - self.get(j, i)).abs());
            }
        }
        worst
    }
}

fn check_shapes(d: &DisparityMap, q: &ConfidenceMap, img: &Image) -> Result<()> {
    let dims = (d.height, d.width);
    if dims != (q.height, q.width) || dims != (img.height, img.width) {
        return Err(Error::shape(format!(
            "disparity {dims:?}, confidence {:?} and image {:?} differ",
            (q.height, q.width),
            (img.height, img.width)
        )));
    }
    Ok(())
}

fn bilateral(img: &Image, a: usize, b: usize, dist2: f64, cfg: &AgcpConfig) -> f64 {
    let c = img.channels;
    let color: f64 = img.data[a * c..(a + 1) * c]
        .iter()
        .zip(&img.data[b * c..(b + 1) * c])
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (-color / (cfg.sigma_color * cfg.sigma_color) - dist2 / (cfg.sigma_space * cfg.sigma_space)).exp()
}

/// GCP mask `h`.
pub fn gcp_mask(q: &ConfidenceMap, tau: f64) -> Vec<bool> {
    q.data.iter().map(|&v| v > tau).collect()
}

/// Right and down neighbors of each pixel with their smoothness weight.
fn edges(img: &Image, cfg: &AgcpConfig) -> Vec<(usize, usize, f64)> {
    let (h, w) = (img.height, img.width);
    let mut out = Vec::with_capacity(2 * h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                out.push((i, i + 1, bilateral(img, i, i + 1, 1.0, cfg)));
            }
            if y + 1 < h {
                out.push((i, i + w, bilateral(img, i, i + w, 1.0, cfg)));
            }
        }
    }
    out
}

/// Aggregated data terms `(Σ_v h_v c_iv, Σ_v h_v c_iv D'_v)` per pixel.
fn data_terms(d: &DisparityMap, gcp: &[bool], img: &Image, cfg: &AgcpConfig) -> Vec<(f64, f64)> {
    let (h, w) = (d.height, d.width);
    let r = cfg.radius_m as isize;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = (y * w as isize + x) as usize;
            let (mut s, mut sd) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let v = (yy * w as isize + xx) as usize;
                    if !gcp[v] {
                        continue;
                    }
                    let c = bilateral(img, i, v, (dy * dy + dx * dx) as f64, cfg);
                    s += c;
                    sd += c * d.data[v];
                }
            }
            out.push((s, sd));
        }
    }
    out
}

/// Assembles `A x = b` for the propagation energy.
pub fn build_system(
    d_final: &DisparityMap,
    q: &ConfidenceMap,
    img: &Image,
    cfg: &AgcpConfig,
) -> Result<(SparseMatrix, Vec<f64>)> {
    check_shapes(d_final, q, img)?;
    cfg.validate()?;
    let n = d_final.data.len();
    let gcp = gcp_mask(q, cfg.tau);
    let data = data_terms(d_final, &gcp, img, cfg);
    let mut rows: Vec<Vec<(usize, f64)>> = data
        .iter()
        .enumerate()
        .map(|(i, &(s, _))| vec![(i, s + EPS_REG)])
        .collect();
    for (i, j, wij) in edges(img, cfg) {
        // w is symmetric, so w_ij + w_ji = 2 w_ij
        let a = cfg.gamma * 2.0 * wij;
        rows[i].push((i, a));
        rows[j].push((j, a));
        rows[i].push((j, -a));
        rows[j].push((i, -a));
    }
    let b = data
        .iter()
        .zip(&d_final.data)
        .map(|(&(_, sd), &d)| sd + EPS_REG * d)
        .collect();
    debug_assert_eq!(rows.len(), n);
    Ok((SparseMatrix::from_rows(rows)?, b))
}

/// Direct evaluation of the propagation energy at `x`.
pub fn energy(x: &[f64], d_final: &DisparityMap, q: &ConfidenceMap, img: &Image, cfg: &AgcpConfig) -> Result<f64> {
    check_shapes(d_final, q, img)?;
    if x.len() != d_final.data.len() {
        return Err(Error::shape("energy argument length"));
    }
    let gcp = gcp_mask(q, cfg.tau);
    let (h, w) = (d_final.height, d_final.width);
    let r = cfg.radius_m as isize;
    let mut e = 0.0;
    for y in 0..h as isize {
        for x0 in 0..w as isize {
            let i = (y * w as isize + x0) as usize;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x0 + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let v = (yy * w as isize + xx) as usize;
                    if gcp[v] {
                        let c = bilateral(img, i, v, (dy * dy + dx * dx) as f64, cfg);
                        e += c * (x[i] - d_final.data[v]).powi(2);
                    }
                }
            }
        }
    }
    for (i, j, wij) in edges(img, cfg) {
        // each unordered pair appears once per endpoint
        e += cfg.gamma * 2.0 * wij * (x[i] - x[j]).powi(2);
    }
    Ok(e)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Jacobi-scaled norm of `Ax − b`.
    pub residual_norm: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients from a zero initial guess.
///
/// Residuals are measured in the Jacobi-scaled norm `‖r‖_M = √(rᵀ D⁻¹ r)`,
/// which keeps rows held only by the small regularizer from hiding large
/// errors in `x`. Stops once `‖Ax − b‖_M ≤ tol · ‖b‖_M`. Without convergence
/// the iterate with the smallest residual is returned with
/// `converged = false`.
pub fn cg_solve(a: &SparseMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<CgSolution> {
    let n = a.n;
    if b.len() != n {
        return Err(Error::shape(format!("rhs length {} vs {n}", b.len())));
    }
    let diag = a.diagonal();
    if diag.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::invalid("CG needs a positive diagonal"));
    }
    let inv_diag: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let target = tol * rz.sqrt();
    let mut rnorm = rz.sqrt();
    let mut best = (rnorm, x.clone());
    let mut it = 0;
    while rnorm > target && it < max_iter {
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        it += 1;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        rnorm = rz_new.max(0.0).sqrt();
        if rnorm < best.0 {
            best = (rnorm, x.clone());
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let converged = rnorm <= target;
    let (residual_norm, x) = if converged { (rnorm, x) } else { best };
    Ok(CgSolution {
        x,
        iterations: it,
        residual_norm,
        converged,
    })
}

/// Connected components over 4-neighbor edges with positive weight.
fn components(n: usize, edges: &[(usize, usize, f64)]) -> Vec<usize> {
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for &(i, j, w) in edges {
        if w > 0.0 {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub disparity: DisparityMap,
    pub gcp: Vec<bool>,
    pub cg: CgSolution,
}

pub fn refine_detailed(
    d_final: &DisparityMap,
    q: &ConfidenceMap,
    img: &Image,
    cfg: &AgcpConfig,
) -> Result<Refinement> {
    let (a, b) = build_system(d_final, q, img, cfg)?;
    let cg = cg_solve(&a, &b, cfg.cg_tol, cfg.cg_max_iter)?;
    let gcp = gcp_mask(q, cfg.tau);
    let comp = components(d_final.data.len(), &edges(img, cfg));
    let mut anchored = vec![false; comp.len()];
    for (i, &g) in gcp.iter().enumerate() {
        if g {
            anchored[comp[i]] = true;
        }
    }
    let data = cg
        .x
        .iter()
        .zip(&d_final.data)
        .zip(&comp)
        .map(|((&x, &d), &c)| if anchored[c] { x } else { d })
        .collect();
    Ok(Refinement {
        disparity: DisparityMap::new(d_final.height, d_final.width, data)?,
        gcp,
        cg,
    })
}

/// Refined disparity; components without any GCP keep `d_final`.
pub fn refine(d_final: &DisparityMap, q: &ConfidenceMap, img: &Image, cfg: &AgcpConfig) -> Result<DisparityMap> {
    refine_detailed(d_final, q, img, cfg).map(|r| r.disparity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stereo::ConfidenceKind;

    fn unit_cfg() -> AgcpConfig {
        AgcpConfig {
            radius_m: 0,
            gamma: 1.0,
            // unit kernels: huge bandwidths on a constant image
            sigma_color: 1e6,
            sigma_space: 1e12,
            ..Default::default()
        }
    }

    fn two_pixels() -> (DisparityMap, ConfidenceMap, Image) {
        (
            DisparityMap::new(1, 2, vec![5.0, 0.0]).unwrap(),
            ConfidenceMap::new(1, 2, vec![1.0, 0.0], ConfidenceKind::Estimated).unwrap(),
            Image::filled(1, 2, 3, 0.5),
        )
    }

    #[test]
    fn two_pixel_hand_assembly() {
        let (d, q, img) = two_pixels();
        let (a, b) = build_system(&d, &q, &img, &unit_cfg()).unwrap();
        let dense = a.to_dense();
        // data 1 plus γ(w01 + w10) = 2 on the diagonal
        assert!((dense[0][0] - (3.0 + EPS_REG)).abs() < 1e-12);
        assert!((dense[0][1] + 2.0).abs() < 1e-12);
        assert!((dense[1][0] + 2.0).abs() < 1e-12);
        assert!((dense[1][1] - (2.0 + EPS_REG)).abs() < 1e-12);
        assert_eq!(b, vec![5.0 + 5.0 * EPS_REG, 0.0]);
        let sol = cg_solve(&a, &b, 1e-12, 100).unwrap();
        assert!(sol.converged);
        assert!((sol.x[0] - 5.0).abs() < 1e-6 && (sol.x[1] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn no_gcps_leaves_only_the_regularizer() {
        let (d, _, img) = two_pixels();
        let q = ConfidenceMap::constant(1, 2, 0.1);
        let (a, b) = build_system(&d, &q, &img, &AgcpConfig::default()).unwrap();
        assert_eq!(b, vec![5.0 * EPS_REG, 0.0]);
        let smooth = -a.get(0, 1);
        assert!((a.get(0, 0) - smooth - EPS_REG).abs() < 1e-15);
        // no GCP anywhere: the input is kept
        assert_eq!(refine(&d, &q, &img, &AgcpConfig::default()).unwrap(), d);
    }

    #[test]
    fn identity_system() {
        let b = vec![1.0, -2.0, 3.5];
        let sol = cg_solve(&SparseMatrix::identity(3), &b, 1e-12, 10).unwrap();
        assert_eq!(sol.x, b);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let a = SparseMatrix::from_dense(&[
            vec![4.0, 1.0, 0.0],
            vec![1.0, 3.0, 1.0],
            vec![0.0, 1.0, 2.0],
        ])
        .unwrap();
        let sol = cg_solve(&a, &[1.0, 2.0, 3.0], 1e-14, 1).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn all_gcps_pure_data_term() {
        let d = DisparityMap::new(2, 3, vec![1.0, 2.5, 3.0, 0.0, 7.0, 2.0]).unwrap();
        let q = ConfidenceMap::constant(2, 3, 1.0);
        let img = Image::filled(2, 3, 3, 0.2);
        let cfg = AgcpConfig {
            gamma: 1e-12,
            radius_m: 0,
            ..Default::default()
        };
        let out = refine(&d, &q, &img, &cfg).unwrap();
        for (a, b) in out.data.iter().zip(&d.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (d, q, _) = two_pixels();
        assert!(build_system(&d, &q, &Image::filled(2, 2, 3, 0.0), &AgcpConfig::default()).is_err());
        let bad = AgcpConfig {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
