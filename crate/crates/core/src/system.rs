//! Block-structured normal equations `H y = g`.
//!
//! Variables are grouped per robot; each robot block is further split into
//! vertex slots of `var_dim` entries. Diagonal robot blocks are stored dense,
//! off-diagonal blocks only as the vertex-level entries created by separator
//! edges, so a robot can tell exactly which neighbor values it needs.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::graph::{RobotId, VertexId};

/// Layout of one robot's block.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotBlock {
    pub robot: RobotId,
    pub offset: usize,
    pub vertices: Vec<VertexId>,
}

/// Nonzero `var_dim × var_dim` entry `H[(α, row), (β, col)]` of an
/// off-diagonal robot block.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingEntry {
    /// Local slot inside the row robot's block.
    pub row: usize,
    /// Local slot inside the column robot's block.
    pub col: usize,
    pub col_vertex: VertexId,
    pub block: DMatrix<f64>,
}

/// What one separator edge set adds to a robot's own rows: the part of
/// `H_αα` and `g_α` contributed by its measurements to one neighbor robot.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorShare {
    pub slot: usize,
    pub hessian: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

/// Per vertex and neighbor robot, the `(H, g)` diagonal contributions of
/// separator measurements.
pub(crate) type ShareMap = BTreeMap<(VertexId, usize), (DMatrix<f64>, DVector<f64>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLinearSystem {
    var_dim: usize,
    blocks: Vec<RobotBlock>,
    diagonal: Vec<DMatrix<f64>>,
    coupling: BTreeMap<(usize, usize), Vec<CouplingEntry>>,
    rhs: DVector<f64>,
    /// `bᵀb` of the underlying least-squares problem `‖A y − b‖²`.
    rhs_norm_sq: f64,
    slots: BTreeMap<VertexId, (usize, usize)>,
    shares: BTreeMap<(usize, usize), Vec<SeparatorShare>>,
}

impl BlockLinearSystem {
    pub(crate) fn from_parts(
        var_dim: usize,
        robot_vertices: Vec<Vec<VertexId>>,
        pair_blocks: BTreeMap<(VertexId, VertexId), DMatrix<f64>>,
        vertex_rhs: BTreeMap<VertexId, DVector<f64>>,
        rhs_norm_sq: f64,
        separator_shares: ShareMap,
    ) -> Self {
        let mut blocks = Vec::with_capacity(robot_vertices.len());
        let mut slots = BTreeMap::new();
        let mut offset = 0;
        for (r, vertices) in robot_vertices.into_iter().enumerate() {
            for (i, v) in vertices.iter().enumerate() {
                slots.insert(*v, (r, i));
            }
            let n = vertices.len();
            blocks.push(RobotBlock {
                robot: RobotId(r),
                offset,
                vertices,
            });
            offset += n * var_dim;
        }
        let mut diagonal: Vec<DMatrix<f64>> = blocks
            .iter()
            .map(|b| DMatrix::zeros(b.vertices.len() * var_dim, b.vertices.len() * var_dim))
            .collect();
        let mut coupling: BTreeMap<(usize, usize), Vec<CouplingEntry>> = BTreeMap::new();
        for ((vi, vj), block) in pair_blocks {
            let (ri, si) = slots[&vi];
            let (rj, sj) = slots[&vj];
            if ri == rj {
                diagonal[ri]
                    .view_mut((si * var_dim, sj * var_dim), (var_dim, var_dim))
                    .copy_from(&block);
            } else {
                coupling.entry((ri, rj)).or_default().push(CouplingEntry {
                    row: si,
                    col: sj,
                    col_vertex: vj,
                    block,
                });
            }
        }
        let mut rhs = DVector::zeros(offset);
        for (v, g) in vertex_rhs {
            let (r, s) = slots[&v];
            rhs.rows_mut(blocks[r].offset + s * var_dim, var_dim)
                .copy_from(&g);
        }
        let mut shares: BTreeMap<(usize, usize), Vec<SeparatorShare>> = BTreeMap::new();
        for ((v, neighbor), (hessian, rhs)) in separator_shares {
            let (r, slot) = slots[&v];
            shares
                .entry((r, neighbor))
                .or_default()
                .push(SeparatorShare { slot, hessian, rhs });
        }
        BlockLinearSystem {
            var_dim,
            blocks,
            diagonal,
            coupling,
            rhs,
            rhs_norm_sq,
            slots,
            shares,
        }
    }

    /// Wraps a dense system. Robot `α` owns `vertices_per_robot[α]` slots of
    /// `var_dim` variables; vertex-level blocks that are exactly zero are dropped.
    pub fn from_dense(
        var_dim: usize,
        vertices_per_robot: &[usize],
        h: &DMatrix<f64>,
        g: &DVector<f64>,
        rhs_norm_sq: f64,
    ) -> Result<Self> {
        let n: usize = vertices_per_robot.iter().sum::<usize>() * var_dim;
        if h.nrows() != n || h.ncols() != n || g.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: h.nrows(),
            });
        }
        let robot_vertices: Vec<Vec<VertexId>> = vertices_per_robot
            .iter()
            .enumerate()
            .map(|(r, &k)| (0..k).map(|i| VertexId::pose(r, i)).collect())
            .collect();
        let flat: Vec<VertexId> = robot_vertices.iter().flatten().copied().collect();
        let mut pairs = BTreeMap::new();
        let mut rhs = BTreeMap::new();
        for (i, vi) in flat.iter().enumerate() {
            rhs.insert(*vi, g.rows(i * var_dim, var_dim).into_owned());
            for (j, vj) in flat.iter().enumerate() {
                let block = h
                    .view((i * var_dim, j * var_dim), (var_dim, var_dim))
                    .into_owned();
                if vi.robot == vj.robot || block.iter().any(|x| *x != 0.0) {
                    pairs.insert((*vi, *vj), block);
                }
            }
        }
        Ok(Self::from_parts(
            var_dim,
            robot_vertices,
            pairs,
            rhs,
            rhs_norm_sq,
            ShareMap::new(),
        ))
    }

    pub fn var_dim(&self) -> usize {
        self.var_dim
    }

    pub fn dim(&self) -> usize {
        self.rhs.len()
    }

    pub fn robot_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[RobotBlock] {
        &self.blocks
    }

    pub fn robot_range(&self, robot: usize) -> Range<usize> {
        let b = &self.blocks[robot];
        b.offset..b.offset + b.vertices.len() * self.var_dim
    }

    /// `(robot, local slot)` of a variable vertex; `None` for eliminated vertices.
    pub fn slot(&self, v: &VertexId) -> Option<(usize, usize)> {
        self.slots.get(v).copied()
    }

    /// Global index range of a vertex's variables.
    pub fn vertex_range(&self, v: &VertexId) -> Option<Range<usize>> {
        self.slot(v).map(|(r, s)| {
            let start = self.blocks[r].offset + s * self.var_dim;
            start..start + self.var_dim
        })
    }

    pub fn diagonal_block(&self, robot: usize) -> &DMatrix<f64> {
        &self.diagonal[robot]
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    pub fn block_rhs(&self, robot: usize) -> DVector<f64> {
        self.rhs.rows_range(self.robot_range(robot)).into_owned()
    }

    pub fn rhs_norm_sq(&self) -> f64 {
        self.rhs_norm_sq
    }

    /// Off-diagonal entries of row block `robot`, grouped by column robot.
    pub fn couplings(&self, robot: usize) -> impl Iterator<Item = (usize, &[CouplingEntry])> {
        self.coupling
            .range((robot, 0)..(robot + 1, 0))
            .map(|((_, col), entries)| (*col, entries.as_slice()))
    }

    /// Diagonal contributions of the measurements between `robot` and
    /// `neighbor`; empty for systems built from dense matrices.
    pub fn separator_shares(&self, robot: usize, neighbor: usize) -> &[SeparatorShare] {
        self.shares
            .get(&(robot, neighbor))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Robots whose blocks couple with `robot`.
    pub fn neighbors(&self, robot: usize) -> Vec<usize> {
        self.couplings(robot).map(|(c, _)| c).collect()
    }

    /// Pairs `(α, β)` with a nonzero off-diagonal block.
    pub fn coupled_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.coupling.keys().copied()
    }

    /// Block-sparse `H y`.
    pub fn multiply(&self, y: &DVector<f64>) -> DVector<f64> {
        let d = self.var_dim;
        let mut out = DVector::zeros(self.dim());
        for (r, block) in self.blocks.iter().enumerate() {
            let range = self.robot_range(r);
            let yr = y.rows_range(range.clone());
            let mut acc = &self.diagonal[r] * yr;
            for (c, entries) in self.couplings(r) {
                let off = self.blocks[c].offset;
                for e in entries {
                    let mut rows = acc.rows_mut(e.row * d, d);
                    rows += &e.block * y.rows(off + e.col * d, d);
                }
            }
            out.rows_mut(block.offset, range.len()).copy_from(&acc);
        }
        out
    }

    /// `(H − D) y`, only the off-diagonal robot blocks.
    pub fn multiply_coupling(&self, y: &DVector<f64>) -> DVector<f64> {
        let d = self.var_dim;
        let mut out = DVector::zeros(self.dim());
        for r in 0..self.robot_count() {
            let row_off = self.blocks[r].offset;
            for (c, entries) in self.couplings(r) {
                let off = self.blocks[c].offset;
                for e in entries {
                    let mut rows = out.rows_mut(row_off + e.row * d, d);
                    rows += &e.block * y.rows(off + e.col * d, d);
                }
            }
        }
        out
    }

    /// `‖A y − b‖² = yᵀHy − 2gᵀy + bᵀb`.
    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        y.dot(&self.multiply(y)) - 2.0 * self.rhs.dot(y) + self.rhs_norm_sq
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.var_dim;
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for r in 0..self.robot_count() {
            let range = self.robot_range(r);
            h.view_mut((range.start, range.start), (range.len(), range.len()))
                .copy_from(&self.diagonal[r]);
            for (c, entries) in self.couplings(r) {
                let col_off = self.blocks[c].offset;
                for e in entries {
                    h.view_mut((range.start + e.row * d, col_off + e.col * d), (d, d))
                        .copy_from(&e.block);
                }
            }
        }
        h
    }

    /// Dense Cholesky solve, the centralized reference.
    pub fn solve_dense(&self) -> Result<DVector<f64>> {
        if self.dim() == 0 {
            return Ok(DVector::zeros(0));
        }
        let chol = Cholesky::new(self.to_dense()).ok_or_else(|| {
            Error::Singular(format!(
                "{}x{} normal equations not positive definite",
                self.dim(),
                self.dim()
            ))
        })?;
        Ok(chol.solve(&self.rhs))
    }

    /// Minimum of `‖A y − b‖²`, i.e. the objective at the direct solution.
    pub fn minimum(&self) -> Result<f64> {
        let y = self.solve_dense()?;
        Ok(self.objective(&y))
    }

    /// Cholesky factors of every diagonal block.
    pub fn factor_diagonal(&self) -> Result<Vec<Option<Cholesky<f64, Dyn>>>> {
        self.diagonal
            .iter()
            .enumerate()
            .map(|(r, block)| {
                if block.nrows() == 0 {
                    return Ok(None);
                }
                Cholesky::new(block.clone()).map(Some).ok_or_else(|| {
                    Error::Singular(format!(
                        "diagonal block of robot {r} is not positive definite"
                    ))
                })
            })
            .collect()
    }

    /// `‖H − Hᵀ‖_max`.
    pub fn asymmetry(&self) -> f64 {
        let h = self.to_dense();
        (&h - h.transpose()).amax()
    }
}
