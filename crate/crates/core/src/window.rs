//! Window geometry for local spatio-temporal attention.
//!
//! A grid `T'×H'×W'` is zero-padded up to multiples of the window, cyclically
//! shifted by `shift` (shifted blocks only) and cut into non-overlapping
//! windows. Within a window, attention is blocked between tokens that came
//! from different regions of the shifted grid, and wherever padding is involved.

use std::sync::Arc;

/// Shifted/padded window partition of a token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowLayout {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
    /// Source token (row-major in the unpadded grid) for each
    /// `(window, position)` slot; `None` marks padding.
    pub source: Vec<Option<usize>>,
    /// `[num_windows, N, N]`, `true` where attention is blocked.
    pub mask: Vec<bool>,
}

fn region(pos: usize, padded: usize, window: usize, shift: usize) -> usize {
    if shift == 0 || pos < padded - window {
        0
    } else if pos < padded - shift {
        1
    } else {
        2
    }
}

impl WindowLayout {
    /// Layout with the standard shift: half a window on every axis whose
    /// padded extent spans more than one window, when `shifted` is set.
    pub fn new(grid: [usize; 3], window: [usize; 3], shifted: bool) -> Self {
        let padded: [usize; 3] = std::array::from_fn(|a| grid[a].div_ceil(window[a]) * window[a]);
        let shift = std::array::from_fn(|a| {
            if shifted && padded[a] > window[a] {
                window[a] / 2
            } else {
                0
            }
        });
        Self::with_shift(grid, window, shift)
    }

    pub fn with_shift(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Self {
        assert!(window.iter().all(|&w| w >= 1), "window extents must be >= 1");
        assert!((0..3).all(|a| shift[a] < window[a]), "shift must be smaller than the window");
        let padded: [usize; 3] = std::array::from_fn(|a| grid[a].div_ceil(window[a]) * window[a]);
        let nw: [usize; 3] = std::array::from_fn(|a| padded[a] / window[a]);
        let n = window.iter().product::<usize>();
        let num_windows = nw.iter().product::<usize>();
        let mut source = Vec::with_capacity(num_windows * n);
        let mut labels = Vec::with_capacity(num_windows * n);
        for wt in 0..nw[0] {
            for wh in 0..nw[1] {
                for ww in 0..nw[2] {
                    for it in 0..window[0] {
                        for ih in 0..window[1] {
                            for iw in 0..window[2] {
                                // coordinates in the shifted, padded grid
                                let s = [wt * window[0] + it, wh * window[1] + ih, ww * window[2] + iw];
                                let orig: [usize; 3] = std::array::from_fn(|a| (s[a] + shift[a]) % padded[a]);
                                let real = (0..3).all(|a| orig[a] < grid[a]);
                                source.push(real.then(|| (orig[0] * grid[1] + orig[1]) * grid[2] + orig[2]));
                                let r: [usize; 3] = std::array::from_fn(|a| region(s[a], padded[a], window[a], shift[a]));
                                labels.push((r[0] * 3 + r[1]) * 3 + r[2]);
                            }
                        }
                    }
                }
            }
        }
        let mut mask = vec![false; num_windows * n * n];
        for w in 0..num_windows {
            for i in 0..n {
                for j in 0..n {
                    let (p, q) = (w * n + i, w * n + j);
                    mask[(w * n + i) * n + j] =
                        labels[p] != labels[q] || source[p].is_none() || source[q].is_none();
                }
            }
        }
        WindowLayout {
            grid,
            window,
            shift,
            padded,
            source,
            mask,
        }
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    pub fn num_windows(&self) -> usize {
        self.source.len() / self.tokens_per_window()
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn has_mask(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    /// Gather index from `[batch * tokens]` rows to `[batch * windows * N]` rows.
    pub fn partition_index(&self, batch: usize) -> Arc<[Option<usize>]> {
        let l = self.tokens();
        (0..batch)
            .flat_map(|b| self.source.iter().map(move |s| s.map(|t| b * l + t)))
            .collect()
    }

    /// Gather index from window rows back to `[batch * tokens]` rows.
    pub fn reverse_index(&self, batch: usize) -> Arc<[Option<usize>]> {
        let l = self.tokens();
        let slots = self.source.len();
        let mut inv = vec![0usize; l];
        for (slot, s) in self.source.iter().enumerate() {
            if let Some(t) = s {
                inv[*t] = slot;
            }
        }
        (0..batch)
            .flat_map(|b| inv.iter().map(move |&slot| Some(b * slots + slot)))
            .collect()
    }

    /// Plain-data partition of `[tokens, d]` values into `[windows * N, d]`.
    pub fn partition<T: Copy + Default>(&self, x: &[T], d: usize) -> Vec<T> {
        let mut out = vec![T::default(); self.source.len() * d];
        for (slot, s) in self.source.iter().enumerate() {
            if let Some(t) = s {
                out[slot * d..(slot + 1) * d].copy_from_slice(&x[t * d..(t + 1) * d]);
            }
        }
        out
    }

    /// Inverse of [`WindowLayout::partition`].
    pub fn reverse<T: Copy + Default>(&self, windows: &[T], d: usize) -> Vec<T> {
        let mut out = vec![T::default(); self.tokens() * d];
        for (slot, s) in self.source.iter().enumerate() {
            if let Some(t) = s {
                out[t * d..(t + 1) * d].copy_from_slice(&windows[slot * d..(slot + 1) * d]);
            }
        }
        out
    }
}

/// Relative-position table rows for every ordered token pair of a window.
///
/// Returns `(spatial, temporal)` maps of length `N²`, indexed `p * N + q`,
/// with `spatial = (Δh + Wh − 1)(2Ww − 1) + (Δw + Ww − 1)` and
/// `temporal = Δt + Wt − 1` where `Δ = pos(p) − pos(q)`.
pub fn rel_pos_index(window: [usize; 3]) -> (Vec<usize>, Vec<usize>) {
    let [wt, wh, ww] = window;
    let coords: Vec<[usize; 3]> = (0..wt)
        .flat_map(|t| (0..wh).flat_map(move |h| (0..ww).map(move |w| [t, h, w])))
        .collect();
    let n = coords.len();
    let mut spatial = Vec::with_capacity(n * n);
    let mut temporal = Vec::with_capacity(n * n);
    for p in &coords {
        for q in &coords {
            let dt = p[0] + wt - 1 - q[0];
            let dh = p[1] + wh - 1 - q[1];
            let dw = p[2] + ww - 1 - q[2];
            spatial.push(dh * (2 * ww - 1) + dw);
            temporal.push(dt);
        }
    }
    (spatial, temporal)
}

pub fn spatial_table_rows(window: [usize; 3]) -> usize {
    (2 * window[1] - 1) * (2 * window[2] - 1)
}

pub fn temporal_table_rows(window: [usize; 3]) -> usize {
    2 * window[0] - 1
}
