//! Autoregressive path orderings over an L×L square lattice.
//!
//! A path assigns every lattice site a position in a 1D sequence. Four
//! orderings are provided: the row-major zigzag (raster), the boustrophedon
//! snake, the Hilbert curve, and the Morton (Z-order) curve. Sides are
//! restricted to powers of two, which is the regime where the Hilbert and
//! Morton recursions are defined.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A lattice site, `x` column and `y` row, both in `[0, L)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SiteCoord {
    pub x: usize,
    pub y: usize,
}

impl SiteCoord {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    /// Manhattan distance on the open grid (no periodic wrap).
    pub fn manhattan(&self, other: &SiteCoord) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

/// The four path families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Zigzag,
    Snake,
    Hilbert,
    Morton,
}

impl PathKind {
    pub const ALL: [PathKind; 4] = [
        PathKind::Zigzag,
        PathKind::Snake,
        PathKind::Hilbert,
        PathKind::Morton,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PathKind::Zigzag => "zigzag",
            PathKind::Snake => "snake",
            PathKind::Hilbert => "hilbert",
            PathKind::Morton => "morton",
        }
    }
}

impl std::str::FromStr for PathKind {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, PathError> {
        match s.to_ascii_lowercase().as_str() {
            "zigzag" => Ok(PathKind::Zigzag),
            "snake" => Ok(PathKind::Snake),
            "hilbert" => Ok(PathKind::Hilbert),
            "morton" => Ok(PathKind::Morton),
            other => Err(PathError::UnknownKind(other.to_string())),
        }
    }
}

impl std::fmt::Display for PathKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("lattice side must be a power of two and at least 2, got {0}")]
    InvalidSide(usize),
    #[error("site ({x}, {y}) outside lattice of side {side}")]
    SiteOutOfRange { x: usize, y: usize, side: usize },
    #[error("unknown path kind `{0}`")]
    UnknownKind(String),
}

/// A bijection between the `L*L` lattice sites and sequence positions.
///
/// `order[t]` is the site visited at sequence position `t`; the inverse map
/// is precomputed so both directions are O(1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathOrdering {
    side: usize,
    kind: PathKind,
    order: Vec<SiteCoord>,
    inverse: Vec<usize>,
}

fn check_side(side: usize) -> Result<(), PathError> {
    if side < 2 || !side.is_power_of_two() {
        return Err(PathError::InvalidSide(side));
    }
    Ok(())
}

impl PathOrdering {
    pub fn new(kind: PathKind, side: usize) -> Result<Self, PathError> {
        match kind {
            PathKind::Zigzag => zigzag_path(side),
            PathKind::Snake => snake_path(side),
            PathKind::Hilbert => hilbert_path(side),
            PathKind::Morton => morton_path(side),
        }
    }

    fn from_order(kind: PathKind, side: usize, order: Vec<SiteCoord>) -> Self {
        debug_assert_eq!(order.len(), side * side);
        let mut inverse = vec![usize::MAX; side * side];
        for (t, site) in order.iter().enumerate() {
            inverse[site.y * side + site.x] = t;
        }
        debug_assert!(inverse.iter().all(|&t| t != usize::MAX));
        Self {
            side,
            kind,
            order,
            inverse,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Site visited at sequence position `t`.
    pub fn site(&self, t: usize) -> SiteCoord {
        self.order[t]
    }

    pub fn order(&self) -> &[SiteCoord] {
        &self.order
    }

    /// Sequence position of site `s`; `order[inverse_map(s)] == s`.
    pub fn inverse_map(&self, s: SiteCoord) -> Result<usize, PathError> {
        if s.x >= self.side || s.y >= self.side {
            return Err(PathError::SiteOutOfRange {
                x: s.x,
                y: s.y,
                side: self.side,
            });
        }
        Ok(self.inverse[s.y * self.side + s.x])
    }

    /// Manhattan-distance statistics over consecutive path steps.
    pub fn locality_metrics(&self) -> LocalityMetrics {
        let mut histogram = BTreeMap::new();
        let mut sum = 0usize;
        let mut max = 0usize;
        for pair in self.order.windows(2) {
            let d = pair[0].manhattan(&pair[1]);
            *histogram.entry(d).or_insert(0usize) += 1;
            sum += d;
            max = max.max(d);
        }
        let steps = self.order.len() - 1;
        LocalityMetrics {
            mean_step: sum as f64 / steps as f64,
            max_step: max,
            histogram,
        }
    }
}

/// Step-length statistics of a path: mean and max Manhattan distance between
/// consecutive sites, plus the full distance histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityMetrics {
    pub mean_step: f64,
    pub max_step: usize,
    pub histogram: BTreeMap<usize, usize>,
}

/// Row-major raster order: position `t` maps to `(t mod L, t div L)`.
pub fn zigzag_path(side: usize) -> Result<PathOrdering, PathError> {
    check_side(side)?;
    let order = (0..side * side)
        .map(|t| SiteCoord::new(t % side, t / side))
        .collect();
    Ok(PathOrdering::from_order(PathKind::Zigzag, side, order))
}

/// Boustrophedon order: row-major with every odd row reversed.
pub fn snake_path(side: usize) -> Result<PathOrdering, PathError> {
    check_side(side)?;
    let order = (0..side * side)
        .map(|t| {
            let y = t / side;
            let x = if y % 2 == 0 {
                t % side
            } else {
                side - 1 - t % side
            };
            SiteCoord::new(x, y)
        })
        .collect();
    Ok(PathOrdering::from_order(PathKind::Snake, side, order))
}

/// Hilbert curve order, starting at `(0, 0)`.
///
/// Uses the standard rotate-and-reflect recursion; at `L = 2` the visit
/// order is `(0,0), (0,1), (1,1), (1,0)`.
pub fn hilbert_path(side: usize) -> Result<PathOrdering, PathError> {
    check_side(side)?;
    let order = (0..side * side)
        .map(|t| hilbert_site(side, t))
        .collect();
    Ok(PathOrdering::from_order(PathKind::Hilbert, side, order))
}

fn hilbert_site(side: usize, t: usize) -> SiteCoord {
    let mut rem = t;
    let (mut x, mut y) = (0usize, 0usize);
    let mut s = 1usize;
    while s < side {
        let rx = 1 & (rem / 2);
        let ry = 1 & (rem ^ rx);
        if ry == 0 {
            if rx == 1 {
                x = s - 1 - x;
                y = s - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        x += s * rx;
        y += s * ry;
        rem /= 4;
        s *= 2;
    }
    SiteCoord::new(x, y)
}

/// Morton (Z-order) curve: position `t` de-interleaves into coordinates
/// with `x` taking the even (least-significant) bit positions.
pub fn morton_path(side: usize) -> Result<PathOrdering, PathError> {
    check_side(side)?;
    let order = (0..side * side)
        .map(|t| {
            let (x, y) = deinterleave(t);
            SiteCoord::new(x, y)
        })
        .collect();
    Ok(PathOrdering::from_order(PathKind::Morton, side, order))
}

fn deinterleave(t: usize) -> (usize, usize) {
    let mut x = 0usize;
    let mut y = 0usize;
    let mut bit = 0;
    let mut rem = t;
    while rem != 0 {
        x |= (rem & 1) << bit;
        rem >>= 1;
        y |= (rem & 1) << bit;
        rem >>= 1;
        bit += 1;
    }
    (x, y)
}
