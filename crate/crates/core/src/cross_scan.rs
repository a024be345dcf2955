//! Cross-scan (SS2D): a 2-D feature map is read as four 1-D token sequences
//! (row-major and column-major, each forwards and backwards), each sequence
//! is scanned independently, and the results are written back to their
//! spatial positions and summed.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamLayout;
use crate::ssm::selective::{selective_scan, SsmProjection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl Direction {
    /// Canonical order, also used for parameter naming.
    pub const ALL: [Direction; 4] = [
        Direction::RowForward,
        Direction::RowBackward,
        Direction::ColForward,
        Direction::ColBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::RowForward => "row_fwd",
            Direction::RowBackward => "row_bwd",
            Direction::ColForward => "col_fwd",
            Direction::ColBackward => "col_bwd",
        }
    }
}

/// Traversal order of an `h × w` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionalLayout {
    pub direction: Direction,
    /// `forward_index[p]` is the row-major spatial index visited at sequence
    /// position `p`.
    pub forward_index: Vec<usize>,
    /// `inverse_index[s]` is the sequence position of spatial index `s`.
    pub inverse_index: Vec<usize>,
}

impl DirectionalLayout {
    pub fn new(direction: Direction, h: usize, w: usize) -> Self {
        let row_major: Vec<usize> = (0..h * w).collect();
        let col_major: Vec<usize> = (0..w).flat_map(|j| (0..h).map(move |i| i * w + j)).collect();
        let forward_index = match direction {
            Direction::RowForward => row_major,
            Direction::RowBackward => row_major.into_iter().rev().collect(),
            Direction::ColForward => col_major,
            Direction::ColBackward => col_major.into_iter().rev().collect(),
        };
        let mut inverse_index = vec![0; h * w];
        for (p, &s) in forward_index.iter().enumerate() {
            inverse_index[s] = p;
        }
        Self {
            direction,
            forward_index,
            inverse_index,
        }
    }

    /// Element-level gather indices over a channel-minor layout.
    fn expand_channels(order: &[usize], c: usize) -> Arc<[usize]> {
        order
            .iter()
            .flat_map(|&s| (0..c).map(move |ch| s * c + ch))
            .collect()
    }
}

fn hwc<G: Graph>(g: &G, x: &G::Value) -> Result<(usize, usize, usize)> {
    match g.value(x).shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::shape("cross_scan", format!("expected H x W x C, got {s:?}"))),
    }
}

/// Unfolds `[H, W, C]` into four `[H·W, C]` sequences in [`Direction::ALL`]
/// order.
pub fn expand<G: Graph>(g: &mut G, feature: &G::Value) -> Result<Vec<G::Value>> {
    let (h, w, c) = hwc(g, feature)?;
    Direction::ALL
        .iter()
        .map(|&d| {
            let layout = DirectionalLayout::new(d, h, w);
            let index = DirectionalLayout::expand_channels(&layout.forward_index, c);
            g.gather(feature, &[h * w, c], index)
        })
        .collect()
}

/// Returns each sequence to spatial order and sums the four maps.
pub fn merge<G: Graph>(g: &mut G, seqs: &[G::Value], h: usize, w: usize) -> Result<G::Value> {
    if seqs.len() != Direction::ALL.len() {
        return Err(Error::shape("merge", format!("need 4 sequences, got {}", seqs.len())));
    }
    let mut acc: Option<G::Value> = None;
    for (seq, &d) in seqs.iter().zip(&Direction::ALL) {
        let (len, c) = match g.value(seq).shape() {
            &[l, c] => (l, c),
            s => return Err(Error::shape("merge", format!("sequence must be L x C, got {s:?}"))),
        };
        if len != h * w {
            return Err(Error::shape("merge", format!("sequence length {len} for {h}x{w} grid")));
        }
        let layout = DirectionalLayout::new(d, h, w);
        let index = DirectionalLayout::expand_channels(&layout.inverse_index, c);
        let spatial = g.gather(seq, &[h, w, c], index)?;
        acc = Some(match acc {
            None => spatial,
            Some(prev) => g.add(&prev, &spatial)?,
        });
    }
    Ok(acc.expect("four sequences"))
}

/// Selective-scan parameters for the four directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Ss2dParams {
    /// Four entries in [`Direction::ALL`] order, or a single shared one.
    pub directions: Vec<SsmProjection>,
}

impl Ss2dParams {
    pub fn register(
        layout: &mut ParamLayout,
        prefix: &str,
        channels: usize,
        state: usize,
        dt_rank: usize,
        shared: bool,
    ) -> Self {
        let directions = if shared {
            vec![SsmProjection::register(layout, &format!("{prefix}.shared"), channels, state, dt_rank)]
        } else {
            Direction::ALL
                .iter()
                .map(|d| {
                    SsmProjection::register(layout, &format!("{prefix}.{}", d.name()), channels, state, dt_rank)
                })
                .collect()
        };
        Self { directions }
    }

    pub fn for_direction(&self, index: usize) -> &SsmProjection {
        &self.directions[index.min(self.directions.len() - 1)]
    }
}

/// Expand, scan each direction, merge. Shape-preserving on `[H, W, C]`.
pub fn ss2d<G: Graph>(
    g: &mut G,
    p: &[G::Value],
    params: &Ss2dParams,
    feature: &G::Value,
) -> Result<G::Value> {
    let (h, w, _) = hwc(g, feature)?;
    let seqs = expand(g, feature)?;
    let mut scanned = Vec::with_capacity(4);
    for (i, seq) in seqs.iter().enumerate() {
        scanned.push(selective_scan(g, p, params.for_direction(i), seq)?);
    }
    merge(g, &scanned, h, w)
}
