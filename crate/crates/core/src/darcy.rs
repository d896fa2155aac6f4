//! Darcy flow benchmark on the unit square: log-normal diffusion field from a
//! truncated Karhunen-Loève expansion, a 5-point finite-difference solve of
//! `−∇·(a∇u) = 1` with `u = 0` on the boundary, and the limit state
//! `g(x) = ε − max u`.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_MODES: usize = 16;
pub const DEFAULT_THRESHOLD: f64 = 0.082;

/// Solver settings for the Darcy problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DarcyConfig {
    /// Interior nodes per axis.
    pub m: usize,
    /// Number of KL modes, i.e. the input dimension.
    pub d: usize,
    /// Pressure threshold ε.
    pub threshold: f64,
}

impl Default for DarcyConfig {
    fn default() -> Self {
        Self {
            m: 31,
            d: 4,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// One tensor-product Neumann mode `φ(ξ) = c_j(ξ₁)·c_k(ξ₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlMode {
    pub j: usize,
    pub k: usize,
    /// Covariance eigenvalue `(π²(j²+k²) + 9)^(−2)`.
    pub theta: f64,
}

fn axis_fn(j: usize, t: f64) -> f64 {
    if j == 0 {
        1.0
    } else {
        SQRT_2 * (j as f64 * PI * t).cos()
    }
}

impl KlMode {
    pub fn eval(&self, xi: [f64; 2]) -> f64 {
        axis_fn(self.j, xi[0]) * axis_fn(self.k, xi[1])
    }
}

/// The `d` leading modes, sorted by eigenvalue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlBasis {
    pub modes: Vec<KlMode>,
}

/// Eigenvalue of `(−Δ + 9I)^(−2)` for the Neumann mode `(j, k)`.
pub fn kl_eigenvalue(j: usize, k: usize) -> f64 {
    (PI * PI * (j * j + k * k) as f64 + 9.0).powi(-2)
}

pub fn kl_basis(d: usize) -> Result<KlBasis> {
    if d == 0 || d > MAX_MODES {
        return Err(Error::InvalidConfig(format!("KL mode count must be in 1..={MAX_MODES}, got {d}")));
    }
    let mut modes: Vec<KlMode> = (0..=MAX_MODES)
        .flat_map(|j| (0..=MAX_MODES).map(move |k| (j, k)))
        .map(|(j, k)| KlMode {
            j,
            k,
            theta: kl_eigenvalue(j, k),
        })
        .collect();
    modes.sort_by(|a, b| b.theta.total_cmp(&a.theta).then((a.j, a.k).cmp(&(b.j, b.k))));
    modes.truncate(d);
    Ok(KlBasis { modes })
}

impl KlBasis {
    pub fn dim(&self) -> usize {
        self.modes.len()
    }
}

/// Uniform node grid on `[0,1]²` with `m` interior nodes per axis and the
/// boundary nodes included, `(m+2)²` nodes in row-major `(i₁, i₂)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DarcyGrid {
    pub m: usize,
}

impl DarcyGrid {
    pub fn new(m: usize) -> Result<Self> {
        if m < 8 {
            return Err(Error::InvalidConfig(format!("grid needs m ≥ 8 interior nodes, got {m}")));
        }
        Ok(Self { m })
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.m + 1) as f64
    }

    /// Nodes per axis, boundary included.
    pub fn side(&self) -> usize {
        self.m + 2
    }

    pub fn len(&self) -> usize {
        self.side() * self.side()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, i1: usize, i2: usize) -> usize {
        i1 * self.side() + i2
    }

    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let h = self.h();
        [(idx / self.side()) as f64 * h, (idx % self.side()) as f64 * h]
    }

    /// Trapezoid weights of the nodes for `∫_{[0,1]²}`.
    pub fn quadrature_weight(&self, idx: usize) -> f64 {
        let edge = |i: usize| if i == 0 || i == self.m + 1 { 0.5 } else { 1.0 };
        let h = self.h();
        edge(idx / self.side()) * edge(idx % self.side()) * h * h
    }
}

/// `ln a = Σ √θ_i φ_i x_i` at every node.
pub fn kl_expand(x: &[f64], basis: &KlBasis, grid: &DarcyGrid) -> Result<Vec<f64>> {
    if x.len() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            got: x.len(),
        });
    }
    let side = grid.side();
    let h = grid.h();
    let mut out = vec![0.0; grid.len()];
    for (mode, &xi) in basis.modes.iter().zip(x) {
        let c = mode.theta.sqrt() * xi;
        let f1: Vec<f64> = (0..side).map(|i| axis_fn(mode.j, i as f64 * h)).collect();
        let f2: Vec<f64> = (0..side).map(|i| axis_fn(mode.k, i as f64 * h)).collect();
        for i1 in 0..side {
            let row = &mut out[i1 * side..(i1 + 1) * side];
            for (v, b) in row.iter_mut().zip(&f2) {
                *v += c * f1[i1] * b;
            }
        }
    }
    Ok(out)
}

/// Pressure field on all nodes plus solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DarcySolution {
    pub u: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

impl DarcySolution {
    pub fn max(&self) -> f64 {
        self.u.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

const CG_TOLERANCE: f64 = 1e-10;

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Solves `−∇·(a∇u) = 1`, `u|∂ = 0`, with the 5-point stencil and harmonic
/// face averages of `a`, by Jacobi-preconditioned conjugate gradients.
pub fn darcy_solve(a: &[f64], grid: &DarcyGrid) -> Result<DarcySolution> {
    if a.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: a.len(),
        });
    }
    if let Some(i) = a.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidField(format!("diffusion coefficient {} at node {i}", a[i])));
    }
    let m = grid.m;
    let side = grid.side();
    let n = m * m;
    // face coefficients scaled by h², so the right-hand side is h²·f
    let mut east = vec![0.0; n];
    let mut west = vec![0.0; n];
    let mut north = vec![0.0; n];
    let mut south = vec![0.0; n];
    let mut diag = vec![0.0; n];
    for p in 0..m {
        for q in 0..m {
            let k = p * m + q;
            let c = a[grid.index(p + 1, q + 1)];
            east[k] = harmonic(c, a[grid.index(p + 2, q + 1)]);
            west[k] = harmonic(c, a[grid.index(p, q + 1)]);
            north[k] = harmonic(c, a[grid.index(p + 1, q + 2)]);
            south[k] = harmonic(c, a[grid.index(p + 1, q)]);
            diag[k] = east[k] + west[k] + north[k] + south[k];
        }
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        for p in 0..m {
            for q in 0..m {
                let k = p * m + q;
                let mut v = diag[k] * x[k];
                if p + 1 < m {
                    v -= east[k] * x[k + m];
                }
                if p > 0 {
                    v -= west[k] * x[k - m];
                }
                if q + 1 < m {
                    v -= north[k] * x[k + 1];
                }
                if q > 0 {
                    v -= south[k] * x[k - 1];
                }
                out[k] = v;
            }
        }
    };
    let h2 = grid.h() * grid.h();
    let b = vec![h2; n];
    let b_norm = (n as f64).sqrt() * h2;
    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let max_iter = 20 * n;
    let mut residual = 1.0;
    let mut iterations = 0;
    while iterations < max_iter {
        residual = r.iter().map(|v| v * v).sum::<f64>().sqrt() / b_norm;
        if residual < CG_TOLERANCE {
            break;
        }
        apply(&p, &mut ap);
        let alpha = rz / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
            z[k] = r[k] / diag[k];
        }
        let rz_next: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
        iterations += 1;
    }
    if !(residual < CG_TOLERANCE) {
        return Err(Error::SolverDivergence { iterations, residual });
    }
    let mut u = vec![0.0; grid.len()];
    for pi in 0..m {
        u[(pi + 1) * side + 1..(pi + 1) * side + 1 + m].copy_from_slice(&x[pi * m..(pi + 1) * m]);
    }
    Ok(DarcySolution {
        u,
        iterations,
        relative_residual: residual,
    })
}

/// The Darcy limit state for a fixed basis and grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DarcyModel {
    pub config: DarcyConfig,
    pub basis: KlBasis,
    pub grid: DarcyGrid,
}

impl DarcyModel {
    pub fn new(config: &DarcyConfig) -> Result<Self> {
        if !config.threshold.is_finite() {
            return Err(Error::InvalidConfig("Darcy threshold must be finite".into()));
        }
        Ok(Self {
            basis: kl_basis(config.d)?,
            grid: DarcyGrid::new(config.m)?,
            config: config.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// Diffusion field `a = exp(ln a)` for input `x`.
    pub fn field(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut a = kl_expand(x, &self.basis, &self.grid)?;
        a.iter_mut().for_each(|v| *v = v.exp());
        Ok(a)
    }

    pub fn solve(&self, x: &[f64]) -> Result<DarcySolution> {
        darcy_solve(&self.field(x)?, &self.grid)
    }

    pub fn max_pressure(&self, x: &[f64]) -> Result<f64> {
        Ok(self.solve(x)?.max())
    }

    /// `g(x) = ε − max u`; failure when the peak pressure reaches ε.
    pub fn limit_state(&self, x: &[f64]) -> Result<f64> {
        Ok(self.config.threshold - self.max_pressure(x)?)
    }

    /// Writes `xi1,xi2,a,u` for every node of the solve at `x`.
    pub fn write_csv<W: Write>(&self, x: &[f64], out: W) -> Result<()> {
        let a = self.field(x)?;
        let sol = darcy_solve(&a, &self.grid)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["xi1", "xi2", "a", "u"]).map_err(csv_err)?;
        for (idx, (av, uv)) in a.iter().zip(&sol.u).enumerate() {
            let [s, t] = self.grid.coords(idx);
            w.write_record([s, t, *av, *uv].map(|v| v.to_string())).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
