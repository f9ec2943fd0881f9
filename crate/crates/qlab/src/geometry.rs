//! Cell representatives of a discretized fiber and discrete Hölder norms.
//!
//! The circle carries the intrinsic metric rescaled to diameter one,
//! d(x, y) = 2·dist_{ℝ/ℤ}(x, y). Cylinder words over alphabets {0, …, d−1}
//! use d(w, w′) = Σ_i e^{−i}·|1/(w_i+1) − 1/(w′_i+1)|, the distance between
//! representatives that agree beyond the word.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Resolution up to which every pair of cells is used in seminorms.
pub const ALL_PAIRS_MAX: usize = 64;
/// Half-width of the index band always included above [`ALL_PAIRS_MAX`].
pub const PAIR_BAND: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellGeometry {
    Circle { n: usize },
    Words { words: Vec<Vec<u16>> },
}

impl CellGeometry {
    pub fn circle(n: usize) -> Self {
        CellGeometry::Circle { n }
    }

    pub fn len(&self) -> usize {
        match self {
            CellGeometry::Circle { n } => *n,
            CellGeometry::Words { words } => words.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Midpoint of circle cell `i` in [0, 1).
    pub fn midpoint(&self, i: usize) -> f64 {
        match self {
            CellGeometry::Circle { n } => (i as f64 + 0.5) / *n as f64,
            CellGeometry::Words { .. } => panic!("midpoint is defined for circle cells only"),
        }
    }

    pub fn cell_width(&self) -> f64 {
        match self {
            CellGeometry::Circle { n } => 1.0 / *n as f64,
            CellGeometry::Words { .. } => 0.0,
        }
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        match self {
            CellGeometry::Circle { n } => {
                let k = i.abs_diff(j);
                2.0 * k.min(n - k) as f64 / *n as f64
            }
            CellGeometry::Words { words } => word_dist(&words[i], &words[j]),
        }
    }

    /// Pairs (i, j), i < j, over which seminorms are evaluated: all pairs up
    /// to [`ALL_PAIRS_MAX`] cells, above that a band of ±[`PAIR_BAND`]
    /// indices (cyclic on the circle) plus every (len/32)-th index.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        if n <= ALL_PAIRS_MAX {
            for i in 0..n {
                for j in i + 1..n {
                    out.push((i, j));
                }
            }
            return out;
        }
        let stride = n / 32;
        let cyclic = matches!(self, CellGeometry::Circle { .. });
        for i in 0..n {
            for k in 1..=PAIR_BAND {
                let j = i + k;
                if j < n {
                    out.push((i, j));
                } else if cyclic {
                    out.push(((j - n).min(i), (j - n).max(i)));
                }
            }
            let mut j = i + stride;
            while j < n {
                if j - i > PAIR_BAND {
                    out.push((i, j));
                }
                j += stride;
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn diameter(&self) -> f64 {
        match self {
            CellGeometry::Circle { n } => 2.0 * (n / 2) as f64 / *n as f64,
            CellGeometry::Words { .. } => self
                .pairs()
                .iter()
                .map(|&(i, j)| self.dist(i, j))
                .fold(0.0, f64::max),
        }
    }
}

pub fn word_dist(a: &[u16], b: &[u16]) -> f64 {
    let mut w = 1.0;
    let mut d = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x != y {
            d += w * (1.0 / (*x as f64 + 1.0) - 1.0 / (*y as f64 + 1.0)).abs();
        }
        w *= (-1.0f64).exp();
    }
    d
}

fn seminorm_by(
    geom: &CellGeometry,
    alpha: f64,
    xi: Option<f64>,
    diff: impl Fn(usize, usize) -> f64,
) -> f64 {
    let mut v: f64 = 0.0;
    for (i, j) in geom.pairs() {
        let d = geom.dist(i, j);
        if d <= 0.0 || xi.is_some_and(|x| d > x) {
            continue;
        }
        v = v.max(diff(i, j) / d.powf(alpha));
    }
    v
}

/// v_α(g), or v_{α,ξ}(g) when `xi` restricts to pairs with d ≤ ξ.
pub fn seminorm(g: &[f64], geom: &CellGeometry, alpha: f64, xi: Option<f64>) -> f64 {
    seminorm_by(geom, alpha, xi, |i, j| (g[i] - g[j]).abs())
}

pub fn seminorm_c(g: &[Complex64], geom: &CellGeometry, alpha: f64, xi: Option<f64>) -> f64 {
    seminorm_by(geom, alpha, xi, |i, j| (g[i] - g[j]).norm())
}

pub fn sup_norm(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sup_norm_c(g: &[Complex64]) -> f64 {
    g.iter().fold(0.0, |m, x| m.max(x.norm()))
}

/// ‖g‖_α = ‖g‖∞ + v_α(g) (with ξ restriction if given).
pub fn holder_norm(g: &[f64], geom: &CellGeometry, alpha: f64, xi: Option<f64>) -> f64 {
    sup_norm(g) + seminorm(g, geom, alpha, xi)
}

pub fn holder_norm_c(g: &[Complex64], geom: &CellGeometry, alpha: f64, xi: Option<f64>) -> f64 {
    sup_norm_c(g) + seminorm_c(g, geom, alpha, xi)
}

/// Greedy ξ-cover: every cell lies within distance ξ of a returned center.
pub fn xi_cover(geom: &CellGeometry, xi: f64) -> Vec<usize> {
    let n = geom.len();
    let mut covered = vec![false; n];
    let mut centers = Vec::new();
    for i in 0..n {
        if covered[i] {
            continue;
        }
        let c = match geom {
            CellGeometry::Circle { n } => {
                let reach = (xi * *n as f64 / 2.0).floor() as usize;
                (i + reach).min(n - 1)
            }
            CellGeometry::Words { .. } => i,
        };
        centers.push(c);
        for (j, cov) in covered.iter_mut().enumerate() {
            if geom.dist(c, j) <= xi {
                *cov = true;
            }
        }
        if !covered[i] {
            centers.pop();
            centers.push(i);
            for (j, cov) in covered.iter_mut().enumerate() {
                if geom.dist(i, j) <= xi {
                    *cov = true;
                }
            }
        }
    }
    centers
}
