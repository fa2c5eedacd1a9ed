//! Rasterization of 68-point facial landmarks into binary posture images.

use crate::error::{FraError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const NUM_LANDMARKS: usize = 68;
pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_STAMP_RADIUS: usize = 1;

/// Exactly 68 `(x, y)` points normalized to the aligned face crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(FraError::input(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        for (i, &(x, y)) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(FraError::input(format!(
                    "landmark {i} at ({x}, {y}) lies outside [0,1]"
                )));
            }
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Reflects every point about the vertical midline (`x → 1 − x`).
    pub fn mirrored(&self) -> Self {
        LandmarkSet {
            points: self.points.iter().map(|&(x, y)| (1.0 - x, y)).collect(),
        }
    }
}

/// `height × width` grid over {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryLandmarkImage {
    height: usize,
    width: usize,
    grid: Vec<u8>,
}

impl BinaryLandmarkImage {
    /// Wraps an explicit 0/1 grid (row-major).
    pub fn from_cells(height: usize, width: usize, grid: Vec<u8>) -> Result<Self> {
        if grid.len() != height * width {
            return Err(FraError::input(format!(
                "grid has {} cells, expected {height}×{width}",
                grid.len()
            )));
        }
        if let Some(i) = grid.iter().position(|&c| c > 1) {
            return Err(FraError::input(format!("cell {i} is {}, not 0 or 1", grid[i])));
        }
        Ok(BinaryLandmarkImage { height, width, grid })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.grid[row * self.width + col]
    }

    pub fn cells(&self) -> &[u8] {
        &self.grid
    }

    pub fn count_set(&self) -> usize {
        self.grid.iter().filter(|&&c| c == 1).count()
    }

    pub fn mirrored(&self) -> Self {
        let mut grid = vec![0u8; self.grid.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                grid[r * self.width + c] = self.get(r, self.width - 1 - c);
            }
        }
        BinaryLandmarkImage { grid, ..*self }
    }

    /// `[1, H, W]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.grid.iter().map(|&c| f64::from(c)).collect(),
        )
        .expect("grid matches extents")
    }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Stamps a Chebyshev square of `radius` around each landmark, clipped at the borders.
pub fn rasterize(
    landmarks: &LandmarkSet,
    height: usize,
    width: usize,
    radius: usize,
) -> Result<BinaryLandmarkImage> {
    if height < 8 || width < 8 {
        return Err(FraError::config(format!(
            "landmark image must be at least 8×8, got {height}×{width}"
        )));
    }
    let mut grid = vec![0u8; height * width];
    for &(x, y) in landmarks.points() {
        let row = round_half_up(y * (height - 1) as f64);
        let col = round_half_up(x * (width - 1) as f64);
        let (r0, r1) = (row.saturating_sub(radius), (row + radius).min(height - 1));
        let (c0, c1) = (col.saturating_sub(radius), (col + radius).min(width - 1));
        for r in r0..=r1 {
            grid[r * width + c0..=r * width + c1].fill(1);
        }
    }
    Ok(BinaryLandmarkImage {
        height,
        width,
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn uniform(x: f64, y: f64) -> LandmarkSet {
        LandmarkSet::new(vec![(x, y); NUM_LANDMARKS]).unwrap()
    }

    /// Independent oracle: set of stamped cells, computed per point with signed arithmetic.
    fn stamp_oracle(l: &LandmarkSet, h: usize, w: usize, r: usize) -> HashSet<(i64, i64)> {
        let mut set = HashSet::new();
        for &(x, y) in l.points() {
            let cy = (y * (h - 1) as f64 + 0.5).floor() as i64;
            let cx = (x * (w - 1) as f64 + 0.5).floor() as i64;
            let r = r as i64;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (py, px) = (cy + dy, cx + dx);
                    if py >= 0 && px >= 0 && py < h as i64 && px < w as i64 {
                        set.insert((py, px));
                    }
                }
            }
        }
        set
    }

    #[test]
    fn coincident_points_set_one_cell() {
        let img = rasterize(&uniform(0.5, 0.5), 64, 64, 0).unwrap();
        assert_eq!(img.count_set(), 1);
        assert_eq!(img.get(32, 32), 1);
    }

    #[test]
    fn corner_is_clipped() {
        let img = rasterize(&uniform(0.0, 0.0), 64, 64, 1).unwrap();
        assert_eq!(img.count_set(), 4);
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(img.get(r, c), 1);
        }
    }

    #[test]
    fn wrong_count_and_range_are_input_errors() {
        assert!(matches!(
            LandmarkSet::new(vec![(0.1, 0.1); 67]),
            Err(FraError::Input(_))
        ));
        let mut pts = vec![(0.5, 0.5); NUM_LANDMARKS];
        pts[41] = (0.5, 1.2);
        let msg = LandmarkSet::new(pts).unwrap_err().to_string();
        assert!(msg.contains("landmark 41"), "{msg}");
    }

    #[test]
    fn too_small_image_is_rejected() {
        assert!(rasterize(&uniform(0.5, 0.5), 7, 64, 1).is_err());
    }

    fn landmarks() -> impl Strategy<Value = LandmarkSet> {
        prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), NUM_LANDMARKS)
            .prop_map(|p| LandmarkSet::new(p).unwrap())
    }

    fn away_from_ties(l: &LandmarkSet, w: usize) -> bool {
        l.points().iter().all(|&(x, _)| {
            let f = (x * (w - 1) as f64).fract();
            (f - 0.5).abs() > 1e-9
        })
    }

    proptest! {
        #[test]
        fn matches_stamping_oracle(l in landmarks(), r in 0usize..3, h in 8usize..40, w in 8usize..40) {
            let img = rasterize(&l, h, w, r).unwrap();
            let oracle = stamp_oracle(&l, h, w, r);
            prop_assert_eq!(img.count_set(), oracle.len());
            for &(py, px) in &oracle {
                prop_assert_eq!(img.get(py as usize, px as usize), 1);
            }
            prop_assert!(img.cells().iter().all(|&c| c <= 1));
            prop_assert!(img.count_set() >= 1 && img.count_set() <= NUM_LANDMARKS * (2 * r + 1).pow(2));
        }

        #[test]
        fn idempotent(l in landmarks()) {
            prop_assert_eq!(rasterize(&l, 64, 64, 1).unwrap(), rasterize(&l, 64, 64, 1).unwrap());
        }

        #[test]
        fn mirror_equivariant(l in landmarks(), r in 0usize..3) {
            prop_assume!(away_from_ties(&l, 64));
            let a = rasterize(&l.mirrored(), 64, 64, r).unwrap();
            let b = rasterize(&l, 64, 64, r).unwrap().mirrored();
            prop_assert_eq!(a, b);
        }
    }
}
