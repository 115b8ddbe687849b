//! Assembly of the two linear systems of the chordal pipeline.
//!
//! * rotation relaxation: 9 unknowns per vertex, `r_v = vec(R_vᵀ)` (rows of
//!   `R_v` stacked); each edge contributes `ω_R² ‖r_b − (I₃ ⊗ R̄ᵀ) r_a‖²`.
//! * pose correction: 6 unknowns per vertex `(t, θ)`, linearized around a
//!   rotation estimate `R̂` with `R = R̂ Exp(θ) ≈ R̂ (I + S(θ))`.
//!
//! The anchor vertex is eliminated; its known value is folded into `g`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{exp_map, skew, Pose, Rotation};
use crate::graph::{Estimate, MultiRobotGraph, VertexId};
use crate::system::{BlockLinearSystem, ShareMap};

pub const ROTATION_DIM: usize = 9;
pub const POSE_DIM: usize = 6;

/// Rows of `m` stacked into a 9-vector (`vec(mᵀ)`).
pub fn rotation_to_vec(m: &Matrix3<f64>) -> SVector<f64, 9> {
    SVector::<f64, 9>::from_iterator(m.transpose().iter().copied())
}

/// Inverse of [`rotation_to_vec`].
pub fn vec_to_rotation_matrix(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&v[..9])
}

/// `I₃ ⊗ R̄ᵀ`: maps `vec(R_aᵀ)` to `vec((R_a R̄)ᵀ)`.
pub fn kron_identity_transpose(r: &Matrix3<f64>) -> SMatrix<f64, 9, 9> {
    let mut q = SMatrix::<f64, 9, 9>::zeros();
    let rt = r.transpose();
    for k in 0..3 {
        q.fixed_view_mut::<3, 3>(3 * k, 3 * k).copy_from(&rt);
    }
    q
}

/// Accumulates `Σ ‖Σ_v J_v y_v + c‖²` into normal-equation blocks.
struct NormalEquations {
    dim: usize,
    pairs: BTreeMap<(VertexId, VertexId), DMatrix<f64>>,
    rhs: BTreeMap<VertexId, DVector<f64>>,
    rhs_norm_sq: f64,
    shares: ShareMap,
}

impl NormalEquations {
    fn new(dim: usize) -> Self {
        NormalEquations {
            dim,
            pairs: BTreeMap::new(),
            rhs: BTreeMap::new(),
            rhs_norm_sq: 0.0,
            shares: ShareMap::new(),
        }
    }

    /// Adds the residual rows `scale · (Σ J_v y_v + c)`; `terms` lists only free vertices.
    fn add(&mut self, terms: &[(VertexId, DMatrix<f64>)], c: &DVector<f64>, scale: f64) {
        let s2 = scale * scale;
        for (vi, ji) in terms {
            let g = self
                .rhs
                .entry(*vi)
                .or_insert_with(|| DVector::zeros(self.dim));
            *g -= ji.tr_mul(c) * s2;
            for (vj, jj) in terms {
                let block = self
                    .pairs
                    .entry((*vi, *vj))
                    .or_insert_with(|| DMatrix::zeros(self.dim, self.dim));
                *block += ji.tr_mul(jj) * s2;
            }
        }
        self.rhs_norm_sq += c.norm_squared() * s2;
        if let [(va, ja), (vb, jb)] = terms {
            if va.robot != vb.robot {
                for (v, j, other) in [(va, ja, vb), (vb, jb, va)] {
                    let entry = self.shares.entry((*v, other.robot.0)).or_insert_with(|| {
                        (DMatrix::zeros(self.dim, self.dim), DVector::zeros(self.dim))
                    });
                    entry.0 += j.tr_mul(j) * s2;
                    entry.1 -= j.tr_mul(c) * s2;
                }
            }
        }
    }

    fn finish(mut self, graph: &MultiRobotGraph) -> BlockLinearSystem {
        let anchor = graph.anchor();
        let robot_vertices: Vec<Vec<VertexId>> = graph
            .robots()
            .map(|r| {
                graph
                    .robot_vertices(r)
                    .filter(|v| **v != anchor)
                    .copied()
                    .collect()
            })
            .collect();
        // every free vertex gets a diagonal block, even if untouched
        for v in robot_vertices.iter().flatten() {
            self.pairs
                .entry((*v, *v))
                .or_insert_with(|| DMatrix::zeros(self.dim, self.dim));
        }
        BlockLinearSystem::from_parts(
            self.dim,
            robot_vertices,
            self.pairs,
            self.rhs,
            self.rhs_norm_sq,
            self.shares,
        )
    }
}

/// Normal equations of the relaxed rotation problem
/// `min Σ ω_R² ‖R_b − R_a R̄‖_F²` with the anchor rotation fixed to `I₃`.
pub fn build_rotation_system(graph: &MultiRobotGraph) -> Result<BlockLinearSystem> {
    graph.validate()?;
    let anchor = graph.anchor();
    let anchor_vec = DVector::from_column_slice(rotation_to_vec(&Matrix3::identity()).as_slice());
    let identity = DMatrix::<f64>::identity(ROTATION_DIM, ROTATION_DIM);
    let mut ne = NormalEquations::new(ROTATION_DIM);
    for e in graph.edges() {
        let q = kron_identity_transpose(e.rotation.matrix());
        let q = DMatrix::from_column_slice(9, 9, q.as_slice());
        let mut terms = Vec::with_capacity(2);
        let mut c = DVector::zeros(ROTATION_DIM);
        if e.from == anchor {
            c -= &q * &anchor_vec;
        } else {
            terms.push((e.from, -q));
        }
        if e.to == anchor {
            c += &anchor_vec;
        } else {
            terms.push((e.to, identity.clone()));
        }
        ne.add(&terms, &c, e.weights.omega_r_sq.sqrt());
    }
    Ok(ne.finish(graph))
}

/// Reshapes a rotation-system solution into (unprojected) matrices, anchor included.
pub fn relaxed_rotations(
    graph: &MultiRobotGraph,
    system: &BlockLinearSystem,
    r: &DVector<f64>,
) -> Result<BTreeMap<VertexId, Matrix3<f64>>> {
    if r.len() != system.dim() {
        return Err(Error::DimensionMismatch {
            expected: system.dim(),
            actual: r.len(),
        });
    }
    let mut out = BTreeMap::new();
    for v in graph.vertices() {
        let m = match system.vertex_range(v) {
            Some(range) => vec_to_rotation_matrix(r.rows_range(range).as_slice()),
            None => Matrix3::identity(),
        };
        out.insert(*v, m);
    }
    Ok(out)
}

/// Normal equations of the pose problem linearized at `rotations`
/// (unknowns `(t, θ)` per vertex, `R = R̂ Exp(θ)`). Translation rows carry
/// weight `ω_t`, rotation rows `ω_R/√2`.
pub fn build_pose_system(
    graph: &MultiRobotGraph,
    rotations: &BTreeMap<VertexId, Rotation>,
) -> Result<BlockLinearSystem> {
    graph.validate()?;
    for v in graph.vertices() {
        if !rotations.contains_key(v) {
            return Err(Error::MissingEstimate(*v));
        }
    }
    let anchor = graph.anchor();
    let mut ne = NormalEquations::new(POSE_DIM);
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    for e in graph.edges() {
        let ra = rotations[&e.from].matrix();
        let rb = rotations[&e.to].matrix();
        let rbar = e.rotation.matrix();
        let tbar = &e.translation;

        // t_b − t_a + R̂_a S(t̄) θ_a − R̂_a t̄
        let mut ja = DMatrix::zeros(3, POSE_DIM);
        let mut jb = DMatrix::zeros(3, POSE_DIM);
        ja.view_mut((0, 0), (3, 3))
            .copy_from(&(-Matrix3::identity()));
        ja.view_mut((0, 3), (3, 3)).copy_from(&(ra * skew(tbar)));
        jb.view_mut((0, 0), (3, 3)).copy_from(&Matrix3::identity());
        let c = DVector::from_column_slice((-(ra * tbar)).as_slice());
        add_edge_rows(
            &mut ne,
            anchor,
            e.from,
            e.to,
            ja,
            jb,
            &c,
            e.weights.omega_t_sq.sqrt(),
        );

        // column j: (R̂_b − R̂_a R̄) e_j − R̂_b S(e_j) θ_b + R̂_a S(r̄_j) θ_a
        let mut ja = DMatrix::zeros(9, POSE_DIM);
        let mut jb = DMatrix::zeros(9, POSE_DIM);
        let residual = rb - ra * rbar;
        let mut c = DVector::zeros(9);
        for j in 0..3 {
            let rbar_j: Vector3<f64> = rbar.column(j).into_owned();
            ja.view_mut((3 * j, 3), (3, 3))
                .copy_from(&(ra * skew(&rbar_j)));
            jb.view_mut((3 * j, 3), (3, 3))
                .copy_from(&(-(rb * skew(&basis[j]))));
            c.rows_mut(3 * j, 3).copy_from(&residual.column(j));
        }
        add_edge_rows(
            &mut ne,
            anchor,
            e.from,
            e.to,
            ja,
            jb,
            &c,
            (0.5 * e.weights.omega_r_sq).sqrt(),
        );
    }
    Ok(ne.finish(graph))
}

#[allow(clippy::too_many_arguments)]
fn add_edge_rows(
    ne: &mut NormalEquations,
    anchor: VertexId,
    from: VertexId,
    to: VertexId,
    ja: DMatrix<f64>,
    jb: DMatrix<f64>,
    c: &DVector<f64>,
    scale: f64,
) {
    // anchored (t, θ) are zero, so their columns simply drop out
    let mut terms = Vec::with_capacity(2);
    if from != anchor {
        terms.push((from, ja));
    }
    if to != anchor {
        terms.push((to, jb));
    }
    ne.add(&terms, c, scale);
}

/// Rebuilds poses from a pose-system solution `p`: `(R̂ Exp(θ), t)` per
/// variable vertex. Vertices of `rotations` without a slot (the anchor) keep
/// `R̂` and a zero translation.
pub fn apply_correction(
    system: &BlockLinearSystem,
    rotations: &BTreeMap<VertexId, Rotation>,
    p: &DVector<f64>,
) -> Result<Estimate> {
    if p.len() != system.dim() || system.var_dim() != POSE_DIM {
        return Err(Error::DimensionMismatch {
            expected: system.dim(),
            actual: p.len(),
        });
    }
    let mut estimate = Estimate::new();
    for (v, r_hat) in rotations {
        let pose = match system.vertex_range(v) {
            Some(range) => {
                let block = p.rows_range(range);
                let t = Vector3::new(block[0], block[1], block[2]);
                let theta = Vector3::new(block[3], block[4], block[5]);
                Pose::new(r_hat.compose(&exp_map(&theta)), t)
            }
            None => Pose::new(*r_hat, Vector3::zeros()),
        };
        estimate.insert(*v, pose);
    }
    Ok(estimate)
}
