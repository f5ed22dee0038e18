//! Similar-patch grouping: exemplar grid, exhaustive in-window k-nearest
//! patch search, group gather and the overlap-normalized scatter back onto
//! the image.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{check_patch_bounds, Plane, Pos};
use crate::linalg::DenseMatrix;

/// Exemplar origins on a `stride` grid, with an extra final row/column of
/// origins flush against the bottom/right border so every pixel is covered.
pub fn build_exemplar_grid(height: usize, width: usize, side: usize, stride: usize) -> Result<Vec<Pos>> {
    if side == 0 || side > height || side > width {
        return Err(Error::ImageTooSmall {
            height,
            width,
            side,
        });
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let axis = |len: usize| {
        let last = len - side;
        let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
        if *v.last().unwrap() != last {
            v.push(last);
        }
        v
    };
    let rows = axis(height);
    let cols = axis(width);
    Ok(rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| Pos::new(r, c)))
        .collect())
}

/// K most similar patches to one exemplar, closest first.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroup {
    pub exemplar: Pos,
    pub members: Vec<Pos>,
    /// Squared Euclidean distance of each member to the exemplar patch.
    pub distances: Vec<f64>,
}

/// The similar-patch operator for a whole image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroupIndex {
    pub height: usize,
    pub width: usize,
    pub side: usize,
    pub k: usize,
    pub groups: Vec<PatchGroup>,
}

#[inline]
fn patch_distance(plane: &Plane, a: Pos, b: Pos, side: usize, bound: f64) -> f64 {
    let w = plane.width();
    let data = plane.data();
    let mut acc = 0.0;
    for r in 0..side {
        let ra = &data[(a.row + r) * w + a.col..][..side];
        let rb = &data[(b.row + r) * w + b.col..][..side];
        acc += ra
            .iter()
            .zip(rb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
        if acc > bound {
            return acc;
        }
    }
    acc
}

fn search_range(center: usize, half: usize, last: usize) -> std::ops::RangeInclusive<usize> {
    center.saturating_sub(half)..=(center + half).min(last)
}

/// The `k` candidates in the `window x window` region centered on
/// `exemplar` whose patches are closest to the exemplar patch.
///
/// The exemplar itself is always member 0. The remaining members are ordered
/// by (distance, row, column) ascending.
pub fn group_similar(reference: &Plane, exemplar: Pos, side: usize, k: usize, window: usize) -> Result<PatchGroup> {
    check_patch_bounds(reference, exemplar, side)?;
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if window % 2 == 0 {
        return Err(Error::Config(format!("search window {window} must be odd")));
    }
    let half = window / 2;
    let rows = search_range(exemplar.row, half, reference.height() - side);
    let cols = search_range(exemplar.col, half, reference.width() - side);
    let available = rows.clone().count() * cols.clone().count();
    if available < k {
        return Err(Error::WindowTooSmall {
            window,
            available,
            needed: k,
        });
    }

    // Bounded insertion list of the best k-1 non-exemplar candidates.
    let keep = k - 1;
    let mut best: Vec<(f64, Pos)> = Vec::with_capacity(keep + 1);
    let mut bound = f64::INFINITY;
    for r in rows {
        for c in cols.clone() {
            let pos = Pos::new(r, c);
            if pos == exemplar || keep == 0 {
                continue;
            }
            let d = patch_distance(reference, exemplar, pos, side, bound);
            if best.len() == keep && d > bound {
                continue;
            }
            // candidates arrive in row-major order, so among equal distances
            // the earlier one stays ahead
            let at = best.partition_point(|&(bd, _)| bd <= d);
            if at < keep {
                best.insert(at, (d, pos));
                best.truncate(keep);
                if best.len() == keep {
                    bound = best[keep - 1].0;
                }
            }
        }
    }

    let mut members = Vec::with_capacity(k);
    let mut distances = Vec::with_capacity(k);
    members.push(exemplar);
    distances.push(0.0);
    for (d, p) in best {
        members.push(p);
        distances.push(d);
    }
    Ok(PatchGroup {
        exemplar,
        members,
        distances,
    })
}

impl PatchGroupIndex {
    /// Group every exemplar of the stride grid against `reference`.
    pub fn build(reference: &Plane, side: usize, stride: usize, k: usize, window: usize) -> Result<Self> {
        let exemplars = build_exemplar_grid(reference.height(), reference.width(), side, stride)?;
        let groups = exemplars
            .par_iter()
            .map(|&e| group_similar(reference, e, side, k, window))
            .collect::<Result<Vec<_>>>()?;
        Ok(PatchGroupIndex {
            height: reference.height(),
            width: reference.width(),
            side,
            k,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Patch dimension `side * side`.
    pub fn patch_len(&self) -> usize {
        self.side * self.side
    }

    /// Number of deposits landing on each pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.height * self.width];
        for g in &self.groups {
            for m in &g.members {
                for r in 0..self.side {
                    let row = &mut counts[(m.row + r) * self.width + m.col..][..self.side];
                    row.iter_mut().for_each(|c| *c += 1);
                }
            }
        }
        counts
    }

    /// Long-format CSV: one row per group member.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "group,exemplar_row,exemplar_col,member,row,col,distance")?;
        for (gi, g) in self.groups.iter().enumerate() {
            for (mi, (m, d)) in g.members.iter().zip(&g.distances).enumerate() {
                writeln!(
                    out,
                    "{gi},{},{},{mi},{},{},{d:e}",
                    g.exemplar.row, g.exemplar.col, m.row, m.col
                )?;
            }
        }
        Ok(())
    }
}

/// `m x K` matrix of one group's patches. Column `j` (the j-th member,
/// vectorized column-major within the patch) is stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl GroupMatrix {
    pub fn from_columns(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(GroupMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    /// Column-contiguous storage, equivalently the row-major transpose.
    pub fn as_columns(&self) -> &[f64] {
        &self.data
    }

    pub fn as_columns_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j))
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut data = Vec::with_capacity(m.rows() * m.cols());
        for j in 0..m.cols() {
            for i in 0..m.rows() {
                data.push(m.get(i, j));
            }
        }
        GroupMatrix {
            rows: m.rows(),
            cols: m.cols(),
            data,
        }
    }
}

/// Stack the group's member patches of `plane` as columns.
pub fn gather(plane: &Plane, group: &PatchGroup, side: usize) -> Result<GroupMatrix> {
    let mut data = Vec::with_capacity(side * side * group.members.len());
    for &m in &group.members {
        check_patch_bounds(plane, m, side)?;
        gather_into(plane, m, side, &mut data);
    }
    Ok(GroupMatrix {
        rows: side * side,
        cols: group.members.len(),
        data,
    })
}

#[inline]
pub(crate) fn gather_into(plane: &Plane, origin: Pos, side: usize, out: &mut Vec<f64>) {
    let w = plane.width();
    let data = plane.data();
    for c in 0..side {
        for r in 0..side {
            out.push(data[(origin.row + r) * w + origin.col + c]);
        }
    }
}

/// Deposit every column at its member footprint and divide by the number of
/// deposits per pixel.
pub fn scatter_normalize(index: &PatchGroupIndex, matrices: &[GroupMatrix]) -> Result<Plane> {
    if matrices.len() != index.groups.len() {
        return Err(Error::Shape(format!(
            "{} matrices for {} groups",
            matrices.len(),
            index.groups.len()
        )));
    }
    let m = index.patch_len();
    let (h, w, side) = (index.height, index.width, index.side);
    let mut sums = vec![0.0; h * w];
    let mut counts = vec![0u32; h * w];
    for (g, mat) in index.groups.iter().zip(matrices) {
        if mat.rows != m || mat.cols != g.members.len() {
            return Err(Error::Shape(format!(
                "group matrix {}x{} for {} members of {m} pixels",
                mat.rows,
                mat.cols,
                g.members.len()
            )));
        }
        for (j, origin) in g.members.iter().enumerate() {
            deposit(&mut sums, w, *origin, side, mat.column(j));
            for r in 0..side {
                let row = &mut counts[(origin.row + r) * w + origin.col..][..side];
                row.iter_mut().for_each(|c| *c += 1);
            }
        }
    }
    normalize(sums, &counts, h, w)
}

#[inline]
pub(crate) fn deposit(sums: &mut [f64], width: usize, origin: Pos, side: usize, column: &[f64]) {
    for c in 0..side {
        let col = &column[c * side..(c + 1) * side];
        for (r, &v) in col.iter().enumerate() {
            sums[(origin.row + r) * width + origin.col + c] += v;
        }
    }
}

pub(crate) fn normalize(mut sums: Vec<f64>, counts: &[u32], height: usize, width: usize) -> Result<Plane> {
    for (i, (s, &n)) in sums.iter_mut().zip(counts).enumerate() {
        if n == 0 {
            return Err(Error::Uncovered {
                row: i / width,
                col: i % width,
            });
        }
        *s /= f64::from(n);
    }
    Plane::new(height, width, sums)
}
