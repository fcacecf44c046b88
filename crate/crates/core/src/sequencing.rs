//! Anchor enumeration and training/target index sequences over a patch grid.
//!
//! A Forward anchor (i,j) owns the k×k training block at (i,j) and targets
//! the L-shaped remainder of the (k+2)-block anchored at the same corner.
//! Backward mirrors this: the (k+2)-block is anchored at (i−2, j−2), so the
//! L lies along the top and left.

use serde::{Deserialize, Serialize};

use crate::imaging::PatchGrid;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Forward, Direction::Backward];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorSpec {
    pub anchor: (usize, usize),
    pub k: usize,
    pub direction: Direction,
    pub grid_side: usize,
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        let (i, j, k, s) = (self.anchor.0, self.anchor.1, self.k, self.grid_side);
        if k == 0 {
            return Err(Error::Config("perception k must be >= 1".to_string()));
        }
        let ok = match self.direction {
            Direction::Forward => (i + k + 2).max(j + k + 2) <= s,
            Direction::Backward => i.min(j) >= 2 && i + k <= s && j + k <= s,
        };
        if !ok {
            return Err(Error::GridSpec(format!(
                "anchor ({i},{j}) invalid for k={k}, s={s}, {:?}",
                self.direction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSequence {
    pub coords: Vec<(usize, usize)>,
    pub role: Role,
    /// Index of the grid (0 = original image) the coordinates read from.
    pub texture_id: u32,
}

/// One (anchor, direction, texture-variant) training instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveSample {
    pub anchor: AnchorSpec,
    pub train: IndexSequence,
    pub target: IndexSequence,
}

/// All valid anchors for one direction, row-major. Empty when s < k+2.
pub fn enumerate_anchors(s: usize, k: usize, direction: Direction) -> Result<Vec<AnchorSpec>> {
    if k == 0 {
        return Err(Error::Config("perception k must be >= 1".to_string()));
    }
    if s < k {
        return Err(Error::Config(format!("grid side {s} smaller than perception {k}")));
    }
    let mut anchors = Vec::new();
    for i in 0..s {
        for j in 0..s {
            let a = AnchorSpec { anchor: (i, j), k, direction, grid_side: s };
            if a.validate().is_ok() {
                anchors.push(a);
            }
        }
    }
    Ok(anchors)
}

/// Training block and L-shaped target sequence for one anchor, row-major.
pub fn build_sequences(a: &AnchorSpec) -> Result<(IndexSequence, IndexSequence)> {
    a.validate()?;
    let (i, j, k) = (a.anchor.0, a.anchor.1, a.k);
    let mut train = Vec::with_capacity(k * k);
    for r in i..i + k {
        for c in j..j + k {
            train.push((r, c));
        }
    }
    // The (k+2)-block shares the anchor corner Forward, or is shifted back
    // two rows and columns Backward; target is block minus training block.
    let (bi, bj) = match a.direction {
        Direction::Forward => (i, j),
        Direction::Backward => (i - 2, j - 2),
    };
    let mut target = Vec::with_capacity(4 * k + 4);
    for r in bi..bi + k + 2 {
        for c in bj..bj + k + 2 {
            let in_train = (i..i + k).contains(&r) && (j..j + k).contains(&c);
            if !in_train {
                target.push((r, c));
            }
        }
    }
    Ok((
        IndexSequence { coords: train, role: Role::Train, texture_id: 0 },
        IndexSequence { coords: target, role: Role::Target, texture_id: 0 },
    ))
}

/// Cartesian product of directions × anchors × texture variants. Training
/// indices always read grid 0 (the original); target indices read grid t.
pub fn make_samples(
    grids: &[PatchGrid],
    k: usize,
    directions: &[Direction],
) -> Result<Vec<ContrastiveSample>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::GridSpec("make_samples needs at least one grid".to_string()))?;
    if let Some(bad) = grids.iter().find(|g| g.spec() != first.spec()) {
        return Err(Error::GridSpec(format!(
            "grid specs differ: {:?} vs {:?}",
            bad.spec(),
            first.spec()
        )));
    }
    let s = first.grid_side();
    let mut samples = Vec::new();
    for &direction in directions {
        for anchor in enumerate_anchors(s, k, direction)? {
            for (t, _grid) in grids.iter().enumerate() {
                let (train, mut target) = build_sequences(&anchor)?;
                target.texture_id = t as u32;
                samples.push(ContrastiveSample { anchor, train, target });
            }
        }
    }
    Ok(samples)
}
