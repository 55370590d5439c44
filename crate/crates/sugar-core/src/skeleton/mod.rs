//! Skeleton graph and sequence types, binary storage, and the synthetic
//! action generator.

mod io;
mod synthetic;

pub use io::{read_skeleton_file, write_skeleton_file};
pub use synthetic::{
    generate_synthetic_dataset, generate_synthetic_dataset_with, validate_specs,
    GeneratorOptions, JointTrajectory, SyntheticActionSpec,
};

use ndarray::{Array2, Array3};

use crate::error::{Result, SugarError};

/// Undirected joint graph with self-loops baked into the adjacency matrix.
#[derive(Debug, Clone)]
pub struct SkeletonGraph {
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Array2<f64>,
    degree: Array2<f64>,
}

impl SkeletonGraph {
    pub fn new(num_joints: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if num_joints == 0 {
            return Err(SugarError::InvalidGraph("graph has no joints".into()));
        }
        let mut normalized = Vec::with_capacity(edges.len());
        let mut adjacency = Array2::<f64>::eye(num_joints);
        for &(a, b) in edges {
            if a >= num_joints || b >= num_joints {
                return Err(SugarError::InvalidGraph(format!(
                    "edge ({a}, {b}) out of range for {num_joints} joints"
                )));
            }
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if !normalized.contains(&(lo, hi)) {
                normalized.push((lo, hi));
            }
            adjacency[[a, b]] = 1.0;
            adjacency[[b, a]] = 1.0;
        }
        normalized.sort_unstable();
        let mut degree = Array2::<f64>::zeros((num_joints, num_joints));
        for i in 0..num_joints {
            degree[[i, i]] = adjacency.row(i).sum();
        }
        Ok(Self {
            num_joints,
            edges: normalized,
            adjacency,
            degree,
        })
    }

    /// 8-joint tree: hip-spine-chest-head torso chain, two hand leaves on the
    /// chest, two foot leaves on the hip.
    pub fn toy() -> Self {
        Self::new(8, &TOY_EDGES).expect("toy graph is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn degree(&self) -> &Array2<f64> {
        &self.degree
    }

    /// Symmetric normalization D^{-1/2} A D^{-1/2}. Self-loops guarantee
    /// every degree is positive.
    pub fn normalized_adjacency(&self) -> Array2<f64> {
        let mut out = self.adjacency.clone();
        let inv_sqrt: Vec<f64> = (0..self.num_joints)
            .map(|i| 1.0 / self.degree[[i, i]].sqrt())
            .collect();
        for ((i, j), v) in out.indexed_iter_mut() {
            *v *= inv_sqrt[i] * inv_sqrt[j];
        }
        out
    }
}

pub const TOY_ROOT_JOINT: usize = 0;

const TOY_EDGES: [(usize, usize); 7] =
    [(0, 1), (1, 2), (2, 3), (2, 4), (2, 5), (0, 6), (0, 7)];

/// Joint names of the toy graph, index-aligned.
pub const TOY_JOINT_NAMES: [&str; 8] = [
    "hip",
    "spine",
    "chest",
    "head",
    "left_hand",
    "right_hand",
    "left_foot",
    "right_foot",
];

/// Rest pose of the toy graph in meters.
pub fn toy_rest_pose() -> Array2<f64> {
    ndarray::arr2(&[
        [0.0, 0.0, 1.0],
        [0.0, 0.0, 1.25],
        [0.0, 0.0, 1.5],
        [0.0, 0.0, 1.75],
        [-0.4, 0.0, 1.5],
        [0.4, 0.0, 1.5],
        [-0.15, 0.0, 0.0],
        [0.15, 0.0, 0.0],
    ])
}

/// Per-frame joint coordinates over a fixed joint graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    frames: Array3<f64>,
    label: Option<i32>,
    subject_id: Option<i32>,
}

impl SkeletonSequence {
    pub fn new(frames: Array3<f64>, label: Option<i32>, subject_id: Option<i32>) -> Result<Self> {
        if frames.shape()[0] == 0 {
            return Err(SugarError::Precondition(
                "sequence must have at least one frame".into(),
            ));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(SugarError::Precondition(
                "sequence contains non-finite coordinates".into(),
            ));
        }
        Ok(Self {
            frames,
            label,
            subject_id,
        })
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_joints(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn num_channels(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn label(&self) -> Option<i32> {
        self.label
    }

    pub fn subject_id(&self) -> Option<i32> {
        self.subject_id
    }

    /// Translate so the given joint of frame 0 sits at the origin.
    pub fn root_centered(&self, root_joint: usize) -> SkeletonSequence {
        let mut frames = self.frames.clone();
        let origin: Vec<f64> = (0..self.num_channels())
            .map(|c| self.frames[[0, root_joint, c]])
            .collect();
        for mut frame in frames.outer_iter_mut() {
            for mut joint in frame.outer_iter_mut() {
                for (c, v) in joint.iter_mut().enumerate() {
                    *v -= origin[c];
                }
            }
        }
        SkeletonSequence {
            frames,
            label: self.label,
            subject_id: self.subject_id,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn single_node_normalized_adjacency_is_identity() {
        let g = SkeletonGraph::new(1, &[]).unwrap();
        assert_eq!(g.adjacency(), &arr2(&[[1.0]]));
        assert_eq!(g.degree(), &arr2(&[[1.0]]));
        assert_eq!(g.normalized_adjacency(), arr2(&[[1.0]]));
    }

    #[test]
    fn two_node_normalized_adjacency() {
        let g = SkeletonGraph::new(2, &[(0, 1)]).unwrap();
        assert_eq!(g.adjacency(), &arr2(&[[1.0, 1.0], [1.0, 1.0]]));
        assert_eq!(g.degree(), &arr2(&[[2.0, 0.0], [0.0, 2.0]]));
        let norm = g.normalized_adjacency();
        for v in norm.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn path_graph_matches_direct_matrix_product() {
        // Independent route: build D^{-1/2} as a matrix and multiply.
        let g = SkeletonGraph::new(3, &[(0, 1), (1, 2)]).unwrap();
        let mut d_inv_sqrt = Array2::<f64>::zeros((3, 3));
        for i in 0..3 {
            d_inv_sqrt[[i, i]] = 1.0 / g.degree()[[i, i]].sqrt();
        }
        let expected = d_inv_sqrt.dot(g.adjacency()).dot(&d_inv_sqrt);
        let got = g.normalized_adjacency();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
        // Symmetry.
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(got[[i, j]], got[[j, i]], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn empty_graph_is_rejected() {
        assert!(matches!(
            SkeletonGraph::new(0, &[]),
            Err(SugarError::InvalidGraph(_))
        ));
    }

    #[test]
    fn out_of_range_edge_is_rejected() {
        assert!(SkeletonGraph::new(2, &[(0, 2)]).is_err());
    }

    #[test]
    fn spectral_radius_at_most_one() {
        // Power iteration on the toy graph's normalized adjacency.
        let g = SkeletonGraph::toy();
        let a = g.normalized_adjacency();
        let n = g.num_joints();
        let mut v = ndarray::Array1::<f64>::from_elem(n, 1.0 / (n as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..200 {
            let w = a.dot(&v);
            lambda = w.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm < 1e-12 {
                break;
            }
            v = w / norm;
        }
        assert!(lambda.abs() <= 1.0 + 1e-9, "spectral radius {lambda}");
    }

    #[test]
    fn root_centering_moves_frame0_root_to_origin() {
        let rest = toy_rest_pose();
        let mut frames = Array3::<f64>::zeros((2, 8, 3));
        for t in 0..2 {
            for j in 0..8 {
                for c in 0..3 {
                    frames[[t, j, c]] = rest[[j, c]] + t as f64;
                }
            }
        }
        let seq = SkeletonSequence::new(frames, Some(1), None).unwrap();
        let centered = seq.root_centered(TOY_ROOT_JOINT);
        for c in 0..3 {
            assert_eq!(centered.frames()[[0, TOY_ROOT_JOINT, c]], 0.0);
        }
        // Relative geometry preserved.
        assert_eq!(
            centered.frames()[[1, 2, 2]] - centered.frames()[[1, 0, 2]],
            seq.frames()[[1, 2, 2]] - seq.frames()[[1, 0, 2]]
        );
    }

    #[test]
    fn non_finite_coordinates_rejected() {
        let mut frames = Array3::<f64>::zeros((1, 2, 3));
        frames[[0, 0, 0]] = f64::NAN;
        assert!(SkeletonSequence::new(frames, None, None).is_err());
    }
}
