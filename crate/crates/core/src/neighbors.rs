//! Masked semantic neighboring: for each masked patch, rank the patches in
//! its spatial window by cosine similarity of target-encoder features and
//! keep the top `k`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{cosine, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Odd side length of a square window centered on the query.
    Size(usize),
    /// Every patch in the grid.
    All,
}

#[cfg(feature = "serde")]
mod window_serde {
    use super::Window;
    use alloc::string::String;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Size(usize),
        Name(String),
    }

    impl Serialize for Window {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            match self {
                Window::Size(n) => Repr::Size(*n),
                Window::All => Repr::Name("all".into()),
            }
            .serialize(s)
        }
    }

    impl<'de> Deserialize<'de> for Window {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            match Repr::deserialize(d)? {
                Repr::Size(n) => Ok(Window::Size(n)),
                Repr::Name(s) if s == "all" => Ok(Window::All),
                Repr::Name(s) => Err(serde::de::Error::custom(alloc::format!(
                    "window must be an odd integer or \"all\", got {s:?}"
                ))),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct NeighborhoodSpec {
    pub window: Window,
    pub include_self: bool,
    pub k: usize,
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        Self {
            window: Window::Size(3),
            include_self: false,
            k: 4,
        }
    }
}

impl NeighborhoodSpec {
    pub fn validate(&self) -> Result<()> {
        if let Window::Size(n) = self.window {
            if n < 3 || n % 2 == 0 {
                return Err(Error::Config(format!("window {n} must be odd and at least 3")));
            }
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Patch indices in the window around `i`, clipped at the borders, ascending.
pub fn neighborhood(i: usize, rows: usize, cols: usize, spec: &NeighborhoodSpec) -> Vec<usize> {
    let (r, c) = (i / cols, i % cols);
    let (r0, r1, c0, c1) = match spec.window {
        Window::All => (0, rows - 1, 0, cols - 1),
        Window::Size(n) => {
            let half = n / 2;
            (
                r.saturating_sub(half),
                (r + half).min(rows - 1),
                c.saturating_sub(half),
                (c + half).min(cols - 1),
            )
        }
    };
    let mut out = Vec::new();
    for rr in r0..=r1 {
        for cc in c0..=c1 {
            let j = rr * cols + cc;
            if j != i || spec.include_self {
                out.push(j);
            }
        }
    }
    out
}

/// Cosine similarity between rows `i` and `j` of the target features.
pub fn dense_similarity(i: usize, j: usize, feats: &Tensor) -> Result<f64> {
    let (n, _) = feats.dims2()?;
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::OutOfRange {
                what: "features",
                index: idx,
                len: n,
            });
        }
    }
    cosine(feats.row(i), feats.row(j))
}

/// Selected neighbors of one query patch, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEntry {
    pub query: usize,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// `(score desc, index asc)`: true when `a` ranks before `b`.
fn ranks_before(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Top-`k` neighbors of `i`. When the clipped neighborhood holds fewer than
/// `k` patches, all of them are returned.
pub fn select_topk(i: usize, feats: &Tensor, rows: usize, cols: usize, spec: &NeighborhoodSpec) -> Result<NeighborEntry> {
    let (n, _) = feats.dims2()?;
    if n != rows * cols || i >= n {
        return Err(Error::OutOfRange {
            what: "patch grid",
            index: i,
            len: n,
        });
    }
    let hood = neighborhood(i, rows, cols, spec);
    if hood.is_empty() {
        return Err(Error::Empty("neighborhood"));
    }
    // Bounded insertion keeps the best `k` seen so far in rank order.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(spec.k + 1);
    for j in hood {
        let cand = (dense_similarity(i, j, feats)?, j);
        let pos = best.iter().position(|&b| ranks_before(cand, b)).unwrap_or(best.len());
        if pos < spec.k {
            best.insert(pos, cand);
            best.truncate(spec.k);
        }
    }
    Ok(NeighborEntry {
        query: i,
        scores: best.iter().map(|b| b.0).collect(),
        indices: best.iter().map(|b| b.1).collect(),
    })
}

/// Neighbor selections for a set of masked patches, keyed by patch index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSelection {
    pub entries: BTreeMap<usize, NeighborEntry>,
}

impl NeighborSelection {
    pub fn get(&self, i: usize) -> Option<&NeighborEntry> {
        self.entries.get(&i)
    }
}

pub fn select_for(masked: &[usize], feats: &Tensor, rows: usize, cols: usize, spec: &NeighborhoodSpec) -> Result<NeighborSelection> {
    spec.validate()?;
    let mut entries = BTreeMap::new();
    for &i in masked {
        entries.insert(i, select_topk(i, feats, rows, cols, spec)?);
    }
    Ok(NeighborSelection { entries })
}
