//! Finite-dimensional transfer operators along an orbit of the environment.
//!
//! Circle fibers use Ulam collocation: row j of the matrix collects the
//! preimages of the midpoint of cell j, each weighted by e^{φ+zf} at the
//! midpoint of the source cell it falls in. Sft fibers act on depth-d
//! cylinders, where (𝓛g)(w) = Σ_a A(a,w₀)·e^{φ(aw)+zf(aw)}·g(aw).
//! Each row has at most D nonzero entries, so rows are stored sparsely.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::environment::EnvPath;
use crate::error::{arg, Error, Result};
use crate::geometry::{holder_norm_c, CellGeometry};
use crate::par;
use crate::systems::{fiber_geometry, CircleFiber, Family, FiberedSystem, FnSpec, RandomFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum Discretization {
    Ulam { cells: usize },
    Cylinder { depth: usize },
}

impl Discretization {
    pub fn validate(&self, system: &FiberedSystem) -> Result<()> {
        match (self, system.is_circle()) {
            (Discretization::Ulam { cells }, true) if *cells >= 2 => Ok(()),
            (Discretization::Cylinder { depth }, false) if *depth >= 1 => Ok(()),
            (Discretization::Ulam { .. }, true) => arg("Ulam resolution must be at least 2"),
            (Discretization::Cylinder { .. }, false) => arg("cylinder depth must be at least 1"),
            _ => Err(Error::Dimension("discretization does not match the system family".into())),
        }
    }

    /// Number of consecutive environment states an operator depends on.
    fn key_len(&self) -> usize {
        match self {
            Discretization::Ulam { .. } => 1,
            Discretization::Cylinder { depth } => *depth,
        }
    }
}

/// Where a source cell goes under T: fractions of the cell landing in each
/// target cell (circle), or the admissible continuations of a cylinder (sft).
#[derive(Debug, Clone, PartialEq)]
pub enum ImageKernel {
    Fractions(Vec<Vec<(usize, f64)>>),
    Continuations(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    pub fiber_index: i64,
    pub rows: usize,
    pub cols: usize,
    pub twist: Complex64,
    pub normalized: bool,
    /// Nonzero entries of each row (target cell) as (source cell, value).
    pub entries: Vec<Vec<(usize, Complex64)>>,
    pub image: Option<ImageKernel>,
}

impl OperatorMatrix {
    pub fn identity(fiber_index: i64, dim: usize) -> Self {
        OperatorMatrix {
            fiber_index,
            rows: dim,
            cols: dim,
            twist: Complex64::new(0.0, 0.0),
            normalized: true,
            entries: (0..dim).map(|i| vec![(i, Complex64::new(1.0, 0.0))]).collect(),
            image: None,
        }
    }

    pub fn from_dense(fiber_index: i64, m: &DMatrix<Complex64>, twist: Complex64, normalized: bool) -> Self {
        let entries = (0..m.nrows())
            .map(|r| {
                (0..m.ncols())
                    .filter(|&c| m[(r, c)] != Complex64::new(0.0, 0.0))
                    .map(|c| (c, m[(r, c)]))
                    .collect()
            })
            .collect();
        OperatorMatrix {
            fiber_index,
            rows: m.nrows(),
            cols: m.ncols(),
            twist,
            normalized,
            entries,
            image: None,
        }
    }

    pub fn dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, v) in row {
                m[(r, c)] += v;
            }
        }
        m
    }

    pub fn dense_re(&self) -> DMatrix<f64> {
        self.dense().map(|z| z.re)
    }

    pub fn apply(&self, g: &[Complex64]) -> Vec<Complex64> {
        self.entries
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * g[c]).sum())
            .collect()
    }

    /// Real part of the action; exact for untwisted operators.
    pub fn apply_re(&self, g: &[f64]) -> Vec<f64> {
        self.entries
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v.re * g[c]).sum())
            .collect()
    }

    /// ν ↦ ν∘𝓛 on real measures.
    pub fn apply_adjoint_re(&self, nu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, v) in row {
                out[c] += nu[r] * v.re;
            }
        }
        out
    }

    pub fn apply_adjoint(&self, nu: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.cols];
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, v) in row {
                out[c] += nu[r] * v;
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["row", "col", "re", "im"])?;
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, v) in row {
                wr.write_record([r.to_string(), c.to_string(), format!("{:e}", v.re), format!("{:e}", v.im)])?;
            }
        }
        wr.flush()
    }
}

fn check_twist(z: Complex64, observable: Option<&RandomFunction>) -> Result<()> {
    if z != Complex64::new(0.0, 0.0) && observable.is_none() {
        return arg("a nonzero twist needs an observable");
    }
    Ok(())
}

/// Cell geometry of the fiber at `index`.
pub fn cells_at(system: &FiberedSystem, path: &EnvPath, index: i64, disc: &Discretization) -> Result<CellGeometry> {
    match disc {
        Discretization::Ulam { cells } => Ok(CellGeometry::circle(*cells)),
        Discretization::Cylinder { depth } => Ok(CellGeometry::Words {
            words: system.cylinder_words(path, index, *depth)?,
        }),
    }
}

/// One transfer operator from the fiber at `index` to the fiber at `index+1`.
pub fn build_operator(
    system: &FiberedSystem,
    path: &EnvPath,
    index: i64,
    potential: &RandomFunction,
    disc: &Discretization,
    z: Complex64,
    observable: Option<&RandomFunction>,
) -> Result<OperatorMatrix> {
    disc.validate(system)?;
    check_twist(z, observable)?;
    let state = path.at(index)?;
    if state >= system.state_count() {
        return Err(Error::Dimension(format!("state {state} outside system")));
    }
    let phi = potential.spec(state);
    let f = observable.map(|o| o.spec(state));
    let weight = |p: f64, fv: f64| -> Complex64 {
        if f.is_none() {
            return Complex64::new(p.exp(), 0.0);
        }
        Complex64::new(p + z.re * fv, z.im * fv).exp()
    };
    match (&system.family, disc) {
        (Family::Circle(fibers), Discretization::Ulam { cells: n }) => {
            let n = *n;
            let fiber = &fibers[state];
            let geom = CellGeometry::circle(n);
            let src_w: Vec<Complex64> = (0..n)
                .map(|c| {
                    let y = geom.midpoint(c);
                    weight(phi.eval_circle(fiber, y), f.map_or(0.0, |s| s.eval_circle(fiber, y)))
                })
                .collect();
            let entries: Vec<Vec<(usize, Complex64)>> = par::map_range(n, |j| {
                let mut row: Vec<(usize, Complex64)> = Vec::with_capacity(fiber.k as usize);
                for y in fiber.preimages(geom.midpoint(j)) {
                    let c = ((y * n as f64).floor() as usize).min(n - 1);
                    match row.iter_mut().find(|(cc, _)| *cc == c) {
                        Some(e) => e.1 += src_w[c],
                        None => row.push((c, src_w[c])),
                    }
                }
                row.sort_by_key(|e| e.0);
                row
            });
            let image = par::map_range(n, |c| image_fractions(fiber, c, n));
            Ok(OperatorMatrix {
                fiber_index: index,
                rows: n,
                cols: n,
                twist: z,
                normalized: false,
                entries,
                image: Some(ImageKernel::Fractions(image)),
            })
        }
        (Family::Sft(fibers), Discretization::Cylinder { depth }) => {
            let m = &fibers[state].matrix;
            let src = system.cylinder_words(path, index, *depth)?;
            let tgt = system.cylinder_words(path, index + 1, *depth)?;
            let col: HashMap<&[u16], usize> = src.iter().enumerate().map(|(i, w)| (w.as_slice(), i)).collect();
            let mut entries = Vec::with_capacity(tgt.len());
            for w in &tgt {
                let mut row = Vec::new();
                for a in 0..m.len() {
                    if m[a][w[0] as usize] == 0 {
                        continue;
                    }
                    let mut full = Vec::with_capacity(w.len() + 1);
                    full.push(a as u16);
                    full.extend_from_slice(w);
                    let c = *col.get(&full[..*depth]).ok_or_else(|| {
                        Error::Dimension(format!("source cylinder {:?} missing", &full[..*depth]))
                    })?;
                    row.push((c, weight(phi.eval_word(&full), f.map_or(0.0, |s| s.eval_word(&full)))));
                }
                row.sort_by_key(|e| e.0);
                entries.push(row);
            }
            let image = src
                .iter()
                .map(|s| {
                    tgt.iter()
                        .enumerate()
                        .filter(|(_, t)| t[..depth - 1] == s[1..])
                        .filter(|(_, t)| *depth > 1 || m[s[0] as usize][t[0] as usize] == 1)
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect();
            Ok(OperatorMatrix {
                fiber_index: index,
                rows: tgt.len(),
                cols: src.len(),
                twist: z,
                normalized: false,
                entries,
                image: Some(ImageKernel::Continuations(image)),
            })
        }
        _ => Err(Error::Dimension("discretization does not match the system family".into())),
    }
}

/// g ↦ 𝓛(g·h_src)/(λ·h_tgt).
pub fn normalize(op: &OperatorMatrix, lambda: f64, h_src: &[f64], h_tgt: &[f64]) -> Result<OperatorMatrix> {
    if !(lambda > 0.0) || h_src.iter().chain(h_tgt).any(|&v| !(v > 0.0)) {
        return arg("normalization needs λ > 0 and strictly positive h");
    }
    if h_src.len() != op.cols || h_tgt.len() != op.rows {
        return Err(Error::Dimension("h vectors do not match the operator".into()));
    }
    let entries = op
        .entries
        .iter()
        .enumerate()
        .map(|(r, row)| row.iter().map(|&(c, v)| (c, v * h_src[c] / (lambda * h_tgt[r]))).collect())
        .collect();
    Ok(OperatorMatrix {
        entries,
        normalized: true,
        ..op.clone()
    })
}

/// Lebesgue fraction of cell c landing in each cell r, from the lift's
/// crossings of the grid.
fn image_fractions(fiber: &CircleFiber, c: usize, n: usize) -> Vec<(usize, f64)> {
    let nf = n as f64;
    let (a, b) = (c as f64 / nf, (c + 1) as f64 / nf);
    let (fa, fb) = (fiber.lift(a), fiber.lift(b));
    let mut out: Vec<(usize, f64)> = Vec::new();
    let mut x = a;
    let mut m = (fa * nf).floor();
    while x < b {
        let t = (m + 1.0) / nf;
        let next = if t >= fb { b } else { fiber.solve_lift(t).clamp(x, b) };
        let r = (m.rem_euclid(nf) as usize).min(n - 1);
        let w = (next - x) * nf;
        if w > 0.0 {
            match out.iter_mut().find(|e| e.0 == r) {
                Some(e) => e.1 += w,
                None => out.push((r, w)),
            }
        }
        x = next;
        m += 1.0;
    }
    out
}

/// |∫ g·(f∘T) dμ_src − ∫ (Lg)·f dμ_tgt| on the discretization.
pub fn duality_residual(op: &OperatorMatrix, mu_src: &[f64], mu_tgt: &[f64], g: &[f64], f: &[f64]) -> Result<f64> {
    for mu in [mu_src, mu_tgt] {
        if mu.iter().any(|&v| v < 0.0) || (mu.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return arg("measures must be nonnegative with unit mass");
        }
    }
    if mu_src.len() != op.cols || mu_tgt.len() != op.rows || g.len() != op.cols || f.len() != op.rows {
        return Err(Error::Dimension("vectors do not match the operator".into()));
    }
    let f_t: Vec<f64> = match &op.image {
        Some(ImageKernel::Fractions(k)) => k.iter().map(|row| row.iter().map(|&(r, w)| w * f[r]).sum()).collect(),
        Some(ImageKernel::Continuations(k)) => k
            .iter()
            .map(|row| {
                let mass: f64 = row.iter().map(|&r| mu_tgt[r]).sum();
                if mass > 0.0 {
                    row.iter().map(|&r| mu_tgt[r] * f[r]).sum::<f64>() / mass
                } else {
                    row.iter().map(|&r| f[r]).sum::<f64>() / row.len().max(1) as f64
                }
            })
            .collect(),
        None => return arg("operator carries no image kernel"),
    };
    let lhs: f64 = (0..op.cols).map(|c| mu_src[c] * g[c] * f_t[c]).sum();
    let lg = op.apply_re(g);
    let rhs: f64 = (0..op.rows).map(|r| mu_tgt[r] * lg[r] * f[r]).sum();
    Ok((lhs - rhs).abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    /// λ per operator.
    pub lambda: Vec<f64>,
    /// h per fiber, one more than the operators.
    pub h: Vec<Vec<f64>>,
}

/// Operators along a stretch of orbit. Operator i maps fiber
/// `start_offset + i` to fiber `start_offset + i + 1`.
#[derive(Debug, Clone)]
pub struct CocycleWindow {
    pub start_offset: i64,
    pub disc: Discretization,
    ops: Vec<Arc<OperatorMatrix>>,
    geoms: Vec<Arc<CellGeometry>>,
    pub normalization: Option<Normalization>,
}

impl CocycleWindow {
    /// Builds `len` operators from `from`, sharing matrices between indices
    /// whose relevant environment states agree.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        system: &FiberedSystem,
        path: &EnvPath,
        potential: &RandomFunction,
        disc: &Discretization,
        from: i64,
        len: usize,
        z: Complex64,
        observable: Option<&RandomFunction>,
    ) -> Result<Self> {
        disc.validate(system)?;
        potential.validate(system)?;
        if let Some(o) = observable {
            o.validate(system)?;
        }
        check_twist(z, observable)?;
        let kl = disc.key_len();
        let end = from + len as i64 + kl as i64 - 1;
        if from < path.offset || end > path.offset + path.len() as i64 {
            return Err(Error::RangeEscape { from, n: len, len: path.len() });
        }
        let key = |i: i64| -> Result<Vec<usize>> { (0..kl as i64).map(|t| path.at(i + t)).collect() };
        let mut distinct: Vec<(Vec<usize>, i64)> = Vec::new();
        let mut slot = Vec::with_capacity(len);
        for i in 0..len as i64 {
            let k = key(from + i)?;
            let pos = match distinct.iter().position(|(d, _)| *d == k) {
                Some(p) => p,
                None => {
                    distinct.push((k, from + i));
                    distinct.len() - 1
                }
            };
            slot.push(pos);
        }
        let built: Vec<Result<OperatorMatrix>> = par::map_slice(&distinct, |(_, i)| {
            build_operator(system, path, *i, potential, disc, z, observable)
        });
        let built: Vec<Arc<OperatorMatrix>> = built.into_iter().map(|r| r.map(Arc::new)).collect::<Result<_>>()?;
        let ops = slot.iter().map(|&p| built[p].clone()).collect();
        let geoms = match disc {
            Discretization::Ulam { cells } => {
                let g = Arc::new(CellGeometry::circle(*cells));
                (0..=len).map(|_| Arc::clone(&g)).collect()
            }
            Discretization::Cylinder { .. } => {
                let mut cache: HashMap<Vec<usize>, Arc<CellGeometry>> = HashMap::new();
                let mut out = Vec::with_capacity(len + 1);
                for i in 0..=len as i64 {
                    let ks: Vec<usize> = (0..kl as i64 - 1).map(|t| path.at(from + i + t)).collect::<Result<_>>()?;
                    if let Some(g) = cache.get(&ks) {
                        out.push(g.clone());
                    } else {
                        let g = Arc::new(cells_at(system, path, from + i, disc)?);
                        cache.insert(ks, g.clone());
                        out.push(g);
                    }
                }
                out
            }
        };
        Ok(CocycleWindow {
            start_offset: from,
            disc: *disc,
            ops,
            geoms,
            normalization: None,
        })
    }

    /// Assembles a window from explicit operators (dimensions must chain).
    pub fn from_operators(start_offset: i64, ops: Vec<OperatorMatrix>) -> Result<Self> {
        if ops.is_empty() {
            return arg("window needs at least one operator");
        }
        for w in ops.windows(2) {
            if w[1].cols != w[0].rows {
                return Err(Error::Dimension("adjacent operators do not chain".into()));
            }
        }
        let mut geoms: Vec<Arc<CellGeometry>> = ops.iter().map(|o| Arc::new(CellGeometry::circle(o.cols))).collect();
        geoms.push(Arc::new(CellGeometry::circle(ops.last().unwrap().rows)));
        Ok(CocycleWindow {
            start_offset,
            disc: Discretization::Ulam { cells: ops[0].cols },
            ops: ops.into_iter().map(Arc::new).collect(),
            geoms,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Absolute index one past the last operator.
    pub fn end(&self) -> i64 {
        self.start_offset + self.ops.len() as i64
    }

    fn rel(&self, index: i64) -> Result<usize> {
        let k = index - self.start_offset;
        if k < 0 || k as usize >= self.ops.len() {
            return Err(Error::RangeEscape { from: index, n: 1, len: self.ops.len() });
        }
        Ok(k as usize)
    }

    pub fn check_range(&self, from: i64, n: usize) -> Result<()> {
        if from < self.start_offset || from + n as i64 > self.end() {
            return Err(Error::RangeEscape { from, n, len: self.ops.len() });
        }
        Ok(())
    }

    /// Plain (unnormalized) operator at an absolute index.
    pub fn op(&self, index: i64) -> Result<&OperatorMatrix> {
        Ok(&self.ops[self.rel(index)?])
    }

    pub fn op_arc(&self, index: i64) -> Result<Arc<OperatorMatrix>> {
        Ok(self.ops[self.rel(index)?].clone())
    }

    /// Cell geometry of the fiber at an absolute index (window end included).
    pub fn geometry(&self, index: i64) -> Result<&CellGeometry> {
        let k = index - self.start_offset;
        if k < 0 || k as usize > self.ops.len() {
            return Err(Error::RangeEscape { from: index, n: 0, len: self.ops.len() });
        }
        Ok(&self.geoms[k as usize])
    }

    pub fn dim(&self, index: i64) -> Result<usize> {
        Ok(self.geometry(index)?.len())
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization.is_some()
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        if norm.lambda.len() != self.ops.len() || norm.h.len() != self.ops.len() + 1 {
            return Err(Error::Dimension("normalization does not cover the window".into()));
        }
        if norm.lambda.iter().any(|&l| !(l > 0.0)) || norm.h.iter().flatten().any(|&v| !(v > 0.0)) {
            return arg("normalization needs λ > 0 and strictly positive h");
        }
        self.normalization = Some(norm);
        Ok(self)
    }

    /// Sub-window [from, from+n) carrying the matching slice of normalization.
    pub fn slice(&self, from: i64, n: usize) -> Result<Self> {
        self.check_range(from, n)?;
        if n == 0 {
            return arg("empty slice");
        }
        let a = (from - self.start_offset) as usize;
        Ok(CocycleWindow {
            start_offset: from,
            disc: self.disc,
            ops: self.ops[a..a + n].to_vec(),
            geoms: self.geoms[a..=a + n].to_vec(),
            normalization: self.normalization.as_ref().map(|nm| Normalization {
                lambda: nm.lambda[a..a + n].to_vec(),
                h: nm.h[a..=a + n].to_vec(),
            }),
        })
    }

    /// One step at `index`, normalized if the window is.
    pub fn apply(&self, index: i64, g: &[Complex64]) -> Result<Vec<Complex64>> {
        let k = self.rel(index)?;
        let op = &self.ops[k];
        match &self.normalization {
            None => Ok(op.apply(g)),
            Some(nm) => {
                let hs = &nm.h[k];
                let gh: Vec<Complex64> = g.iter().zip(hs).map(|(a, b)| a * b).collect();
                let mut out = op.apply(&gh);
                let (lam, ht) = (nm.lambda[k], &nm.h[k + 1]);
                out.iter_mut().zip(ht).for_each(|(v, h)| *v /= lam * h);
                Ok(out)
            }
        }
    }

    pub fn apply_re(&self, index: i64, g: &[f64]) -> Result<Vec<f64>> {
        let k = self.rel(index)?;
        let op = &self.ops[k];
        match &self.normalization {
            None => Ok(op.apply_re(g)),
            Some(nm) => {
                let gh: Vec<f64> = g.iter().zip(&nm.h[k]).map(|(a, b)| a * b).collect();
                let mut out = op.apply_re(&gh);
                let lam = nm.lambda[k];
                out.iter_mut().zip(&nm.h[k + 1]).for_each(|(v, h)| *v /= lam * h);
                Ok(out)
            }
        }
    }

    /// Measure pullback ν ↦ ν∘L at `index`, normalized if the window is.
    pub fn apply_adjoint_re(&self, index: i64, nu: &[f64]) -> Result<Vec<f64>> {
        let k = self.rel(index)?;
        let op = &self.ops[k];
        match &self.normalization {
            None => Ok(op.apply_adjoint_re(nu)),
            Some(nm) => {
                let lam = nm.lambda[k];
                let scaled: Vec<f64> = nu.iter().zip(&nm.h[k + 1]).map(|(v, h)| v / (lam * h)).collect();
                let mut out = op.apply_adjoint_re(&scaled);
                out.iter_mut().zip(&nm.h[k]).for_each(|(v, h)| *v *= h);
                Ok(out)
            }
        }
    }

    /// L^n g from fiber `from` to fiber `from+n`.
    pub fn push(&self, from: i64, n: usize, g: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_range(from, n)?;
        let mut v = g.to_vec();
        for i in 0..n as i64 {
            v = self.apply(from + i, &v)?;
        }
        Ok(v)
    }

    pub fn push_re(&self, from: i64, n: usize, g: &[f64]) -> Result<Vec<f64>> {
        self.check_range(from, n)?;
        let mut v = g.to_vec();
        for i in 0..n as i64 {
            v = self.apply_re(from + i, &v)?;
        }
        Ok(v)
    }

    /// L^n = L_{from+n−1}∘⋯∘L_{from} as one matrix; n = 0 gives the identity.
    pub fn compose(&self, from: i64, n: usize) -> Result<OperatorMatrix> {
        self.check_range(from, n)?;
        let d0 = self.dim(from)?;
        if n == 0 {
            return Ok(OperatorMatrix::identity(from, d0));
        }
        let d1 = self.dim(from + n as i64)?;
        let cols: Vec<Vec<Complex64>> = par::map_range(d0, |c| {
            let mut e = vec![Complex64::new(0.0, 0.0); d0];
            e[c] = Complex64::new(1.0, 0.0);
            self.push(from, n, &e).expect("range checked")
        });
        let m = DMatrix::from_fn(d1, d0, |r, c| cols[c][r]);
        Ok(OperatorMatrix::from_dense(from, &m, self.ops[self.rel(from)?].twist, self.is_normalized()))
    }

    /// Same orbit and normalization with every operator twisted by z·f.
    pub fn twisted(
        &self,
        system: &FiberedSystem,
        path: &EnvPath,
        potential: &RandomFunction,
        observable: &RandomFunction,
        z: Complex64,
    ) -> Result<Self> {
        let mut w = CocycleWindow::build(system, path, potential, &self.disc, self.start_offset, self.len(), z, Some(observable))?;
        w.normalization = self.normalization.clone();
        Ok(w)
    }

    /// Values of a random function on the cells of the fiber at `index`.
    pub fn sample_function(
        &self,
        system: &FiberedSystem,
        path: &EnvPath,
        f: &RandomFunction,
        index: i64,
    ) -> Result<Vec<f64>> {
        let state = path.at(index)?;
        let spec = f.spec(state);
        match (self.geometry(index)?, &system.family) {
            (CellGeometry::Circle { n }, Family::Circle(fibers)) => {
                let g = CellGeometry::circle(*n);
                Ok((0..*n).map(|i| spec.eval_circle(&fibers[state], g.midpoint(i))).collect())
            }
            (CellGeometry::Words { words }, Family::Sft(_)) => {
                // Functions of two symbols need the next state for depth-1 cells;
                // use the first admissible continuation.
                let d = system.alphabet();
                let m = &system.sft(state).expect("sft").matrix;
                Ok(words
                    .iter()
                    .map(|w| {
                        if w.len() >= 2 {
                            spec.eval_word(w)
                        } else {
                            let b = (0..d).find(|&b| m[w[0] as usize][b] == 1).unwrap_or(0) as u16;
                            spec.eval_word(&[w[0], b])
                        }
                    })
                    .collect())
            }
            _ => Err(Error::Dimension("function does not match window geometry".into())),
        }
    }
}

/// Lhs and rhs of the twisted-operator perturbation inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// Γ_{j,n} = ∏γ⁻¹.
    pub gamma_product: f64,
    pub q_phi: f64,
    pub q_f: f64,
    pub sum_sup: f64,
}

impl PerturbationCheck {
    pub fn holds(&self, slack: f64) -> bool {
        self.lhs <= self.rhs * (1.0 + slack)
    }
}

/// Q_{j,n}(h) = Σ_{k<n} v(h_{j+k})·(γ_{j+k}⋯γ_{j+n−1})^{−α}.
pub fn q_series(seminorms: &[f64], gammas: &[f64], alpha: f64) -> f64 {
    let n = seminorms.len();
    (0..n)
        .map(|k| {
            let tail: f64 = gammas[k..n].iter().map(|g| 1.0 / g).product();
            seminorms[k] * tail.powf(alpha)
        })
        .sum()
}

fn probe_functions(geom: &CellGeometry) -> Vec<Vec<Complex64>> {
    let n = geom.len();
    let mut out = vec![vec![Complex64::new(1.0, 0.0); n]];
    match geom {
        CellGeometry::Circle { .. } => {
            for k in 1..=3 {
                let w = 2.0 * std::f64::consts::PI * k as f64;
                out.push((0..n).map(|i| Complex64::new((w * geom.midpoint(i)).cos(), 0.0)).collect());
                out.push((0..n).map(|i| Complex64::new((w * geom.midpoint(i)).sin(), 0.0)).collect());
                out.push((0..n).map(|i| Complex64::from_polar(1.0, w * geom.midpoint(i))).collect());
            }
            out.push((0..n).map(|i| Complex64::new(1.0 + (geom.midpoint(i) - 0.5).abs(), 0.0)).collect());
        }
        CellGeometry::Words { words } => {
            for pos in 0..words.first().map_or(0, |w| w.len()) {
                out.push(words.iter().map(|w| Complex64::new(1.0 / (w[pos] as f64 + 1.0), 0.0)).collect());
            }
            out.push((0..n).map(|i| Complex64::new(((i * 7919) % 13) as f64 / 13.0, 0.0)).collect());
        }
    }
    out
}

type Probe = Box<dyn Fn(f64) -> Complex64>;

fn circle_probes() -> Vec<Probe> {
    let mut out: Vec<Probe> = vec![Box::new(|_| Complex64::new(1.0, 0.0))];
    for k in 1..=3 {
        let w = 2.0 * std::f64::consts::PI * k as f64;
        out.push(Box::new(move |x| Complex64::new((w * x).cos(), 0.0)));
        out.push(Box::new(move |x| Complex64::new((w * x).sin(), 0.0)));
        out.push(Box::new(move |x| Complex64::from_polar(1.0, w * x)));
    }
    out.push(Box::new(|x| Complex64::new(1.0 + (x - 0.5).abs(), 0.0)));
    out
}

/// n-step preimages of x with their Birkhoff sums (y, S φ, S f).
fn backward_tree(fibers: &[&CircleFiber], specs: &[(&FnSpec, &FnSpec)], x: f64) -> Vec<(f64, f64, f64)> {
    let mut level = vec![(x, 0.0f64, 0.0f64)];
    for s in (0..fibers.len()).rev() {
        let (phi, f) = specs[s];
        level = level
            .into_iter()
            .flat_map(|(y, sp, sf)| {
                fibers[s]
                    .preimages(y)
                    .into_iter()
                    .map(move |w| (w, sp + phi.eval_circle(fibers[s], w), sf + f.eval_circle(fibers[s], w)))
            })
            .collect();
    }
    level
}

/// Evaluates both sides of the perturbation inequality for L_{j,z}^n − L_j^n
/// with probe functions of unit ‖·‖_{α,ξ_j} norm. Seminorms of φ and f on
/// the right side use the analytic per-state bounds, and ‖S_{j,n}f‖∞ is
/// bounded by Σ‖f_{j+k}‖∞.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_bound(
    system: &FiberedSystem,
    path: &EnvPath,
    marginal: &[f64],
    potential: &RandomFunction,
    observable: &RandomFunction,
    disc: &Discretization,
    from: i64,
    n: usize,
    z: Complex64,
) -> Result<PerturbationCheck> {
    let alpha = system.alpha;
    let plain = CocycleWindow::build(system, path, potential, disc, from, n.max(1), Complex64::new(0.0, 0.0), None)?;
    let twisted = CocycleWindow::build(system, path, potential, disc, from, n.max(1), z, Some(observable))?;
    let mut gammas = Vec::with_capacity(n);
    let mut v_phi = Vec::with_capacity(n);
    let mut v_f = Vec::with_capacity(n);
    let mut sum_sup = 0.0;
    for k in 0..n as i64 {
        let s = path.at(from + k)?;
        gammas.push(system.states[s].gamma);
        v_phi.push(potential.bounds(system, s).holder_seminorm);
        let fb = observable.bounds(system, s);
        v_f.push(fb.holder_seminorm);
        sum_sup += fb.sup_norm;
    }
    let xi_j = fiber_geometry(system, path, from, marginal)?.xi;
    let xi_n = fiber_geometry(system, path, from + n as i64, marginal)?.xi;
    let gamma_product: f64 = gammas.iter().map(|g| 1.0 / g).product();
    let q_phi = q_series(&v_phi, &gammas, alpha);
    let q_f = q_series(&v_f, &gammas, alpha);
    let g_src = plain.geometry(from)?;
    let g_tgt = plain.geometry(from + n as i64)?;
    let ones = vec![Complex64::new(1.0, 0.0); plain.dim(from)?];
    let mut ln1 = plain.push(from, n, &ones)?.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let lhs = match &system.family {
        // Cell lookup in the Ulam matrix does not contract at the cell scale,
        // so circle differences are summed over exact preimages instead.
        Family::Circle(fibers) => {
            let fibers: Vec<&CircleFiber> = (0..n as i64).map(|k| path.at(from + k).map(|s| &fibers[s])).collect::<Result<_>>()?;
            let specs: Vec<(&FnSpec, &FnSpec)> = (0..n as i64)
                .map(|k| path.at(from + k).map(|s| (potential.spec(s), observable.spec(s))))
                .collect::<Result<_>>()?;
            let trees: Vec<Vec<(f64, f64, f64)>> =
                par::map_range(g_tgt.len(), |i| backward_tree(&fibers, &specs, g_tgt.midpoint(i)));
            ln1 = trees.iter().map(|t| t.iter().map(|(_, sp, _)| sp.exp()).sum::<f64>()).fold(0.0, f64::max);
            circle_probes()
                .iter()
                .map(|g| {
                    let sampled: Vec<Complex64> = (0..g_src.len()).map(|i| g(g_src.midpoint(i))).collect();
                    let norm = holder_norm_c(&sampled, g_src, alpha, Some(xi_j));
                    let d: Vec<Complex64> = trees
                        .iter()
                        .map(|t| t.iter().map(|&(y, sp, sf)| sp.exp() * ((z * sf).exp() - 1.0) * g(y)).sum())
                        .collect();
                    holder_norm_c(&d, g_tgt, alpha, Some(xi_n)) / norm
                })
                .fold(0.0, f64::max)
        }
        Family::Sft(_) => probe_functions(g_src)
            .iter()
            .map(|g| {
                let norm = holder_norm_c(g, g_src, alpha, Some(xi_j));
                let a = twisted.push(from, n, g).expect("range");
                let b = plain.push(from, n, g).expect("range");
                let d: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                holder_norm_c(&d, g_tgt, alpha, Some(xi_n)) / norm
            })
            .fold(0.0, f64::max),
    };
    let rhs = z.norm()
        * (z.re.abs() * sum_sup).exp()
        * ln1
        * ((1.0 + gamma_product.powf(alpha) + 2.0 * q_phi) * sum_sup + q_f);
    Ok(PerturbationCheck {
        lhs,
        rhs,
        gamma_product,
        q_phi,
        q_f,
        sum_sup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{make_circle_family, make_sft_family, CircleFiber, FnSpec};
    use approx::assert_abs_diff_eq;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn doubling() -> (FiberedSystem, EnvPath) {
        (
            make_circle_family(vec![CircleFiber::linear(2)], 1.0).unwrap(),
            EnvPath { offset: -50, states: vec![0; 200] },
        )
    }

    #[test]
    fn full_shift_depth_one_is_all_ones() {
        let sys = make_sft_family(vec![vec![vec![1, 1], vec![1, 1]]], 1.0).unwrap();
        let path = EnvPath { offset: 0, states: vec![0; 4] };
        let op = build_operator(&sys, &path, 0, &RandomFunction::zero(), &Discretization::Cylinder { depth: 1 }, c(0.0), None).unwrap();
        assert_eq!(op.dense_re(), DMatrix::from_element(2, 2, 1.0));
        let n = normalize(&op, 2.0, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(n.dense_re(), DMatrix::from_element(2, 2, 0.5));
    }

    #[test]
    fn doubling_ulam_columns() {
        let (sys, path) = doubling();
        let phi = RandomFunction::uniform(FnSpec::Constant { value: -(2f64.ln()) });
        let op = build_operator(&sys, &path, 0, &phi, &Discretization::Ulam { cells: 16 }, c(0.0), None).unwrap();
        let m = op.dense_re();
        for col in 0..16 {
            let nz: Vec<f64> = m.column(col).iter().cloned().filter(|v| *v != 0.0).collect();
            assert_eq!(nz.len(), 2);
            nz.iter().for_each(|v| assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15));
        }
        let ones = op.apply_re(&[1.0; 16]);
        ones.iter().for_each(|v| assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-15));
        let n = normalize(&op, 1.0, &[1.0; 16], &[1.0; 16]).unwrap();
        assert_eq!(n.entries, op.entries);
        let off = normalize(&op, 1.1, &[1.0; 16], &[1.0; 16]).unwrap();
        let err = off.apply_re(&[1.0; 16]).iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        assert_abs_diff_eq!(err, 1.0 - 1.0 / 1.1, epsilon = 1e-12);
    }

    #[test]
    fn zero_twist_is_bitwise_plain() {
        let (sys, path) = doubling();
        let f = RandomFunction::uniform(FnSpec::cos(1));
        let disc = Discretization::Ulam { cells: 32 };
        let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
        let a = build_operator(&sys, &path, 0, &phi, &disc, c(0.0), Some(&f)).unwrap();
        let b = build_operator(&sys, &path, 0, &phi, &disc, c(0.0), None).unwrap();
        assert_eq!(a.entries, b.entries);
        assert!(build_operator(&sys, &path, 0, &phi, &disc, Complex64::new(0.0, 0.1), None).is_err());
    }

    #[test]
    fn compose_orders_later_fibers_left() {
        let a = DMatrix::from_row_slice(2, 2, &[c(1.0), c(1.0), c(0.0), c(1.0)]);
        let b = DMatrix::from_row_slice(2, 2, &[c(1.0), c(0.0), c(1.0), c(1.0)]);
        let w = CocycleWindow::from_operators(
            0,
            vec![
                OperatorMatrix::from_dense(0, &a, c(0.0), false),
                OperatorMatrix::from_dense(1, &b, c(0.0), false),
            ],
        )
        .unwrap();
        assert_eq!(w.compose(0, 2).unwrap().dense(), &b * &a);
        assert_ne!(&b * &a, &a * &b);
        assert_eq!(w.compose(1, 0).unwrap().dense(), DMatrix::identity(2, 2));
        assert!(matches!(w.compose(1, 2), Err(Error::RangeEscape { .. })));
    }

    #[test]
    fn doubling_duality() {
        let (sys, path) = doubling();
        let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
        let op = build_operator(&sys, &path, 0, &phi, &Discretization::Ulam { cells: 32 }, c(0.0), None).unwrap();
        let leb = vec![1.0 / 32.0; 32];
        let one = vec![1.0; 32];
        assert_eq!(duality_residual(&op, &leb, &leb, &one, &one).unwrap(), 0.0);
        for r in [0usize, 5, 31] {
            let mut f = vec![0.0; 32];
            f[r] = 1.0;
            assert!(duality_residual(&op, &leb, &leb, &one, &f).unwrap() <= 1e-10);
        }
        let mut point = vec![0.0; 32];
        point[3] = 1.0;
        let mut f = vec![0.0; 32];
        f[7] = 1.0;
        assert!(duality_residual(&op, &point, &point, &one, &f).unwrap() > 0.1);
    }

    #[test]
    fn q_series_example() {
        assert_abs_diff_eq!(q_series(&[1.0, 1.0], &[2.0, 2.0], 1.0), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn twisted_entries_are_dominated() {
        let (sys, path) = doubling();
        let f = RandomFunction::uniform(FnSpec::cos(1));
        let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
        let disc = Discretization::Ulam { cells: 64 };
        let z = Complex64::new(0.3, 0.7);
        let a = build_operator(&sys, &path, 0, &phi, &disc, z, Some(&f)).unwrap().dense();
        let b = build_operator(&sys, &path, 0, &phi, &disc, c(0.0), None).unwrap().dense();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(x.norm() <= (0.3f64).exp() * y.re + 1e-15);
        }
    }

    #[test]
    fn perturbation_examples() {
        let (sys, path) = doubling();
        let f = RandomFunction::uniform(FnSpec::cos(1));
        let phi = RandomFunction::uniform(FnSpec::NegLogDerivative);
        let disc = Discretization::Ulam { cells: 128 };
        let zero = perturbation_bound(&sys, &path, &[1.0], &phi, &f, &disc, 0, 3, c(0.0)).unwrap();
        assert_eq!((zero.lhs, zero.rhs), (0.0, 0.0));
        let r = perturbation_bound(&sys, &path, &[1.0], &phi, &f, &disc, 0, 3, Complex64::new(0.0, 0.01)).unwrap();
        assert!(r.lhs > 0.0 && r.holds(0.0), "{r:?}");
    }
}
