//! Small helpers for padding and cropping `frames × bins` grids.

use ndarray::{Array2, ArrayView2};

/// Mirror an out-of-range index back into `[0, n)` without repeating the edge
/// sample (`reflect` mode). Handles overshoot larger than `n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Reflect-pad a grid on the bottom/right to `rows × cols`, flattened row-major.
pub fn reflect_pad_to(x: ArrayView2<f32>, rows: usize, cols: usize) -> Vec<f32> {
    let (r0, c0) = x.dim();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let rr = reflect_index(r as isize, r0);
        for c in 0..cols {
            out.push(x[[rr, reflect_index(c as isize, c0)]]);
        }
    }
    out
}

/// Top-left `rows × cols` window of a row-major `h × w` buffer.
pub fn crop_top_left(data: &[f32], h: usize, w: usize, rows: usize, cols: usize) -> Array2<f32> {
    debug_assert!(rows <= h && cols <= w && data.len() == h * w);
    Array2::from_shape_fn((rows, cols), |(r, c)| data[r * w + c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = Array2::from_shape_fn((3, 5), |(r, c)| (r * 10 + c) as f32);
        let padded = reflect_pad_to(x.view(), 4, 8);
        assert_eq!(padded[3 * 8], 10.0);
        assert_eq!(crop_top_left(&padded, 4, 8, 3, 5), x);
    }
}
