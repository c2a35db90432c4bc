//! Checkerboard geometry: the interior-corner grid, its world coordinates
//! and the neighbor structure used by the 3D square-size objective.

use nalgebra::{Vector2, Vector3};

/// Interior-corner grid of a planar checkerboard. Corner `(i, j)` (row `i`,
/// column `j`, row-major) sits at world coordinates
/// `(j * square_size, i * square_size, 0)` in millimetres.
///
/// `white_parity` declares which checker cells are white: cell `(i, j)`
/// (bounded by corners `(i, j)..(i+1, j+1)`) is white iff
/// `(i + j) % 2 == white_parity`. Intensity images are not inputs anywhere,
/// so the parity has to be declared rather than detected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoardGeometry {
    pub rows: usize,
    pub cols: usize,
    /// Edge length of one checker square, mm.
    pub square_size: f64,
    pub white_parity: u8,
}

impl BoardGeometry {
    pub fn new(rows: usize, cols: usize, square_size: f64, white_parity: u8) -> Self {
        Self {
            rows,
            cols,
            square_size,
            white_parity,
        }
    }

    pub fn corner_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn world_corner(&self, i: usize, j: usize) -> Vector3<f64> {
        Vector3::new(
            j as f64 * self.square_size,
            i as f64 * self.square_size,
            0.0,
        )
    }

    /// All corners on the z = 0 plane, row-major.
    pub fn world_corners(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.corner_count());
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(self.world_corner(i, j));
            }
        }
        out
    }

    /// Board-plane coordinates (X, Y) of all corners, row-major.
    pub fn plane_corners(&self) -> Vec<Vector2<f64>> {
        self.world_corners()
            .iter()
            .map(|p| Vector2::new(p.x, p.y))
            .collect()
    }

    /// Index pairs of 4-connected grid neighbors (right and down), each pair
    /// once. Diagonal pairs are excluded: their groundtruth separation is
    /// sqrt(2) times the square size.
    pub fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                let idx = i * self.cols + j;
                if j + 1 < self.cols {
                    pairs.push((idx, idx + 1));
                }
                if i + 1 < self.rows {
                    pairs.push((idx, idx + self.cols));
                }
            }
        }
        pairs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_board_corners() {
        let b = BoardGeometry::new(2, 2, 50.0, 0);
        let corners = b.world_corners();
        assert_eq!(
            corners,
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(50.0, 0.0, 0.0),
                Vector3::new(0.0, 50.0, 0.0),
                Vector3::new(50.0, 50.0, 0.0),
            ]
        );
    }

    #[test]
    fn corner_position_formula() {
        let b = BoardGeometry::new(11, 11, 50.0, 0);
        assert_eq!(b.world_corner(3, 7), Vector3::new(350.0, 150.0, 0.0));
        assert_eq!(b.corner_count(), 121);
    }

    #[test]
    fn neighbor_pairs_count() {
        // rows*(cols-1) horizontal + (rows-1)*cols vertical
        let b = BoardGeometry::new(3, 4, 50.0, 0);
        assert_eq!(b.neighbor_pairs().len(), 3 * 3 + 2 * 4);
        let b2 = BoardGeometry::new(2, 2, 50.0, 0);
        assert_eq!(b2.neighbor_pairs().len(), 4);
    }
}
