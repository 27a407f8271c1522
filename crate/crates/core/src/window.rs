//! Planning-window tensors and the observation mask.
//!
//! A window holds H consecutive frames; each frame stacks the control field
//! w and the state field u on the same spatial grid. Channel order is fixed
//! crate-wide: channel 0 = w, channel 1 = u.

pub const CH_W: usize = 0;
pub const CH_U: usize = 1;
pub const CHANNELS: usize = 2;

/// H x 2 x d_x tensor, frame-major, x contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub horizon: usize,
    pub grid: usize,
    pub data: Vec<f64>,
}

impl Window {
    pub fn zeros(horizon: usize, grid: usize) -> Self {
        Window { horizon, grid, data: vec![0.0; horizon * CHANNELS * grid] }
    }

    #[inline]
    pub fn idx(&self, frame: usize, channel: usize, x: usize) -> usize {
        debug_assert!(frame < self.horizon && channel < CHANNELS && x < self.grid);
        (frame * CHANNELS + channel) * self.grid + x
    }

    #[inline]
    pub fn frame(&self, frame: usize, channel: usize) -> &[f64] {
        let start = (frame * CHANNELS + channel) * self.grid;
        &self.data[start..start + self.grid]
    }

    #[inline]
    pub fn frame_mut(&mut self, frame: usize, channel: usize) -> &mut [f64] {
        let start = (frame * CHANNELS + channel) * self.grid;
        &mut self.data[start..start + self.grid]
    }
}

/// Per-cell observation indicator, shared by both channels and the
/// conditioning state. 1.0 = observed/controlled, 0.0 = hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsMask {
    pub cells: Vec<f64>,
}

impl ObsMask {
    pub fn full(grid: usize) -> Self {
        ObsMask { cells: vec![1.0; grid] }
    }

    /// Hide the interior band [lo, hi) of the unit interval. Cell i sits at
    /// x = i/(grid-1); cells 0 and grid-1 are the domain boundary.
    pub fn hide_band(grid: usize, lo: f64, hi: f64) -> Self {
        let cells = (0..grid)
            .map(|i| {
                let x = i as f64 / (grid - 1) as f64;
                if x >= lo && x < hi {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        ObsMask { cells }
    }

    #[inline]
    pub fn grid(&self) -> usize {
        self.cells.len()
    }

    pub fn observed_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0.0).count()
    }

    pub fn apply(&self, field: &mut [f64]) {
        for (v, m) in field.iter_mut().zip(&self.cells) {
            *v *= m;
        }
    }

    pub fn masked_copy(&self, field: &[f64]) -> Vec<f64> {
        field.iter().zip(&self.cells).map(|(v, m)| v * m).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_frame_major_x_contiguous() {
        let mut w = Window::zeros(3, 4);
        let i = w.idx(2, CH_U, 1);
        w.data[i] = 5.0;
        assert_eq!(w.frame(2, CH_U)[1], 5.0);
        assert_eq!(i, (2 * 2 + 1) * 4 + 1);
        w.frame_mut(0, CH_W)[3] = -1.0;
        assert_eq!(w.data[3], -1.0);
    }

    #[test]
    fn hidden_band_matches_grid_coordinates() {
        // 64 interior cells: x = i/65; hidden [0.25, 0.75) is i in 16..48.
        let m = ObsMask::hide_band(64, 0.25, 0.75);
        for i in 0..64 {
            let hidden = (16..=47).contains(&i);
            assert_eq!(m.cells[i] == 0.0, hidden, "cell {i}");
        }
        assert_eq!(m.observed_count(), 32);
        assert_eq!(m.observed_count(), 64 - m.cells.iter().filter(|&&c| c == 0.0).count());
    }

    #[test]
    fn full_mask_is_identity() {
        let m = ObsMask::full(5);
        let mut v = vec![1.0, -2.0, 3.0, -4.0, 5.0];
        let orig = v.clone();
        m.apply(&mut v);
        assert_eq!(v, orig);
    }
}
