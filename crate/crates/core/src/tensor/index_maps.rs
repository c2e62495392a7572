//! Index-map builders for the structural tensor rearrangements used by the
//! backbone: window partition/reverse (with optional cyclic shift folded in),
//! pixel shuffle, replicate padding, cropping, and im2col.
//!
//! Every rearrangement is expressed as a flat gather (`out[i] = src[idx[i]]`),
//! which makes the backward pass a scatter-add over the same map. A sentinel
//! index of `usize::MAX` reads as zero, which is how zero-padding is encoded.

use ndarray::{ArrayD, IxDyn};

use crate::tensor::Element;

pub const ZERO_SRC: usize = usize::MAX;

/// Padding behavior at spatial borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Clamp source coordinates to the valid range (edge replication).
    Replicate,
    /// Out-of-range taps read zero.
    Zero,
}

/// A flat gather: `out.flat[i] = src.flat[idx[i]]` with `ZERO_SRC` reading 0.
#[derive(Debug, Clone)]
pub struct IndexMap {
    pub out_shape: Vec<usize>,
    pub idx: Vec<usize>,
}

impl IndexMap {
    pub fn apply<E: Element>(&self, src: &ArrayD<E>) -> ArrayD<E> {
        let flat = src
            .as_slice()
            .expect("IndexMap::apply expects standard-layout input");
        let mut out = Vec::with_capacity(self.idx.len());
        for &i in &self.idx {
            out.push(if i == ZERO_SRC { E::zero() } else { flat[i] });
        }
        ArrayD::from_shape_vec(IxDyn(&self.out_shape), out).expect("index map shape")
    }

    /// Scatter-add of an upstream gradient back through the gather.
    pub fn scatter_add<E: Element>(&self, grad_out: &ArrayD<E>, src_shape: &[usize]) -> ArrayD<E> {
        let flat = grad_out
            .as_slice()
            .expect("IndexMap::scatter_add expects standard-layout gradient");
        let mut acc = vec![E::zero(); src_shape.iter().product()];
        for (&i, &g) in self.idx.iter().zip(flat.iter()) {
            if i != ZERO_SRC {
                acc[i] += g;
            }
        }
        ArrayD::from_shape_vec(IxDyn(src_shape), acc).expect("scatter shape")
    }
}

/// Row gather over a `(rows, cols)` matrix: `out.row(r) = src.row(idx[r])`.
/// Used for token-space permutations where whole channel vectors move.
#[derive(Debug, Clone)]
pub struct RowMap {
    pub idx: Vec<usize>,
}

impl RowMap {
    pub fn apply<E: Element>(&self, src: &ArrayD<E>, cols: usize) -> ArrayD<E> {
        let flat = src.as_slice().expect("RowMap::apply standard layout");
        let mut out = Vec::with_capacity(self.idx.len() * cols);
        for &r in &self.idx {
            out.extend_from_slice(&flat[r * cols..(r + 1) * cols]);
        }
        ArrayD::from_shape_vec(IxDyn(&[self.idx.len(), cols]), out).expect("row map shape")
    }

    pub fn scatter_add<E: Element>(
        &self,
        grad_out: &ArrayD<E>,
        src_rows: usize,
        cols: usize,
    ) -> ArrayD<E> {
        let flat = grad_out.as_slice().expect("RowMap::scatter standard layout");
        let mut acc = vec![E::zero(); src_rows * cols];
        for (out_r, &src_r) in self.idx.iter().enumerate() {
            let src = &mut acc[src_r * cols..(src_r + 1) * cols];
            let g = &flat[out_r * cols..(out_r + 1) * cols];
            for (a, &b) in src.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[src_rows, cols]), acc).expect("row scatter shape")
    }
}

/// Token row index for sample `n`, position `(y, x)` on an `h x w` grid.
#[inline]
fn token_row(n: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    (n * h + y) * w + x
}

/// Rows of windows gathered from a token matrix `(n*h*w, c)`, cyclically
/// shifted up-left by `shift` before partitioning into `m x m` windows.
/// Output row order: sample-major, then window row, window column, then
/// row-major pixels inside each window.
pub fn window_partition_rows(n: usize, h: usize, w: usize, m: usize, shift: usize) -> RowMap {
    assert!(h % m == 0 && w % m == 0, "window partition needs padded input");
    let (wh, ww) = (h / m, w / m);
    let mut idx = Vec::with_capacity(n * h * w);
    for s in 0..n {
        for wy in 0..wh {
            for wx in 0..ww {
                for iy in 0..m {
                    for ix in 0..m {
                        let y = (wy * m + iy + shift) % h;
                        let x = (wx * m + ix + shift) % w;
                        idx.push(token_row(s, y, x, h, w));
                    }
                }
            }
        }
    }
    RowMap { idx }
}

/// Inverse of [`window_partition_rows`]: windows back to tokens, undoing the
/// cyclic shift.
pub fn window_reverse_rows(n: usize, h: usize, w: usize, m: usize, shift: usize) -> RowMap {
    assert!(h % m == 0 && w % m == 0);
    let ww = w / m;
    let win_area = m * m;
    let wins_per_sample = (h / m) * ww;
    let mut idx = Vec::with_capacity(n * h * w);
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let yr = (y + h - shift % h) % h;
                let xr = (x + w - shift % w) % w;
                let win = (s * wins_per_sample) + (yr / m) * ww + xr / m;
                idx.push(win * win_area + (yr % m) * m + (xr % m));
            }
        }
    }
    RowMap { idx }
}

/// `(n, c, h, w)` to token matrix `(n*h*w, c)`.
pub fn nchw_to_tokens_map(n: usize, c: usize, h: usize, w: usize) -> IndexMap {
    let mut idx = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    idx.push(((s * c + ch) * h + y) * w + x);
                }
            }
        }
    }
    IndexMap {
        out_shape: vec![n * h * w, c],
        idx,
    }
}

/// Token matrix `(n*h*w, c)` back to `(n, c, h, w)`.
pub fn tokens_to_nchw_map(n: usize, c: usize, h: usize, w: usize) -> IndexMap {
    let mut idx = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    idx.push(token_row(s, y, x, h, w) * c + ch);
                }
            }
        }
    }
    IndexMap {
        out_shape: vec![n, c, h, w],
        idx,
    }
}

/// Sub-pixel rearrangement `(n, c*r^2, h, w)` -> `(n, c, r*h, r*w)`:
/// `out[n][c][r*y+dy][r*x+dx] = in[n][c*r^2 + dy*r + dx][y][x]`.
pub fn pixel_shuffle_map(n: usize, c_out: usize, h: usize, w: usize, r: usize) -> IndexMap {
    let c_in = c_out * r * r;
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(n * c_out * oh * ow);
    for s in 0..n {
        for ch in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, dy) = (oy / r, oy % r);
                    let (x, dx) = (ox / r, ox % r);
                    let ci = ch * r * r + dy * r + dx;
                    idx.push(((s * c_in + ci) * h + y) * w + x);
                }
            }
        }
    }
    IndexMap {
        out_shape: vec![n, c_out, oh, ow],
        idx,
    }
}

/// Exact inverse of [`pixel_shuffle_map`].
pub fn pixel_unshuffle_map(n: usize, c_out: usize, h: usize, w: usize, r: usize) -> IndexMap {
    let c_in = c_out * r * r;
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(n * c_in * h * w);
    for s in 0..n {
        for ci in 0..c_in {
            let ch = ci / (r * r);
            let dy = (ci % (r * r)) / r;
            let dx = ci % r;
            for y in 0..h {
                for x in 0..w {
                    let (oy, ox) = (y * r + dy, x * r + dx);
                    idx.push(((s * c_out + ch) * oh + oy) * ow + ox);
                }
            }
        }
    }
    IndexMap {
        out_shape: vec![n, c_in, h, w],
        idx,
    }
}

/// Replicate-pad the bottom/right edges of `(n, c, h, w)` to `(n, c, nh, nw)`.
pub fn pad_replicate_map(n: usize, c: usize, h: usize, w: usize, nh: usize, nw: usize) -> IndexMap {
    assert!(nh >= h && nw >= w);
    let mut idx = Vec::with_capacity(n * c * nh * nw);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..nh {
                let sy = y.min(h - 1);
                for x in 0..nw {
                    let sx = x.min(w - 1);
                    idx.push(((s * c + ch) * h + sy) * w + sx);
                }
            }
        }
    }
    IndexMap {
        out_shape: vec![n, c, nh, nw],
        idx,
    }
}

/// Crop `(n, c, h, w)` down to its top-left `(n, c, th, tw)` corner.
pub fn crop_map(n: usize, c: usize, h: usize, w: usize, th: usize, tw: usize) -> IndexMap {
    assert!(th <= h && tw <= w);
    let mut idx = Vec::with_capacity(n * c * th * tw);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..th {
                for x in 0..tw {
                    idx.push(((s * c + ch) * h + y) * w + x);
                }
            }
        }
    }
    IndexMap {
        out_shape: vec![n, c, th, tw],
        idx,
    }
}

/// Cyclic shift of the spatial axes: `out[y][x] = in[(y+dy) mod h][(x+dx) mod w]`.
pub fn roll_map(n: usize, c: usize, h: usize, w: usize, dy: isize, dx: isize) -> IndexMap {
    let dy = dy.rem_euclid(h as isize) as usize;
    let dx = dx.rem_euclid(w as isize) as usize;
    let mut idx = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let sy = (y + dy) % h;
                for x in 0..w {
                    let sx = (x + dx) % w;
                    idx.push(((s * c + ch) * h + sy) * w + sx);
                }
            }
        }
    }
    IndexMap {
        out_shape: vec![n, c, h, w],
        idx,
    }
}

/// im2col for a `k x k`, stride-1, same-size convolution over one `(c, h, w)`
/// sample. Output shape `(c*k*k, h*w)`.
pub fn im2col_map(c: usize, h: usize, w: usize, k: usize, pad: PadMode) -> IndexMap {
    assert!(k % 2 == 1, "odd kernel only");
    let half = (k / 2) as isize;
    let mut idx = Vec::with_capacity(c * k * k * h * w);
    for ch in 0..c {
        for ky in 0..k as isize {
            for kx in 0..k as isize {
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let (sy, sx) = (y + ky - half, x + kx - half);
                        let entry = match pad {
                            PadMode::Replicate => {
                                let sy = sy.clamp(0, h as isize - 1) as usize;
                                let sx = sx.clamp(0, w as isize - 1) as usize;
                                (ch * h + sy) * w + sx
                            }
                            PadMode::Zero => {
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    ZERO_SRC
                                } else {
                                    (ch * h + sy as usize) * w + sx as usize
                                }
                            }
                        };
                        idx.push(entry);
                    }
                }
            }
        }
    }
    IndexMap {
        out_shape: vec![c * k * k, h * w],
        idx,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use proptest::prelude::*;

    fn seq(shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn pixel_shuffle_defined_interleaving() {
        // 4x2x2 with values 0..15 -> 1x4x4 in the documented layout.
        let x = seq(&[1, 4, 2, 2]);
        let map = pixel_shuffle_map(1, 1, 2, 2, 2);
        let y = map.apply(&x);
        let expect = vec![
            0., 4., 1., 5., //
            8., 12., 9., 13., //
            2., 6., 3., 7., //
            10., 14., 11., 15.,
        ];
        assert_eq!(y.as_slice().unwrap(), &expect[..]);
        let back = pixel_unshuffle_map(1, 1, 2, 2, 2).apply(&y);
        assert_eq!(back, x);
    }

    #[test]
    fn window_partition_defined_layout() {
        // 1-channel 4x4 map, m=2: window 0 holds pixels (0,0),(0,1),(1,0),(1,1).
        let tokens = seq(&[16, 1]); // value == token row index
        let map = window_partition_rows(1, 4, 4, 2, 0);
        let wins = map.apply(&tokens, 1);
        let flat = wins.as_slice().unwrap();
        assert_eq!(&flat[0..4], &[0., 1., 4., 5.]);
        assert_eq!(&flat[4..8], &[2., 3., 6., 7.]);
        assert_eq!(&flat[8..12], &[8., 9., 12., 13.]);
    }

    #[test]
    fn single_window_covers_whole_map() {
        let tokens = seq(&[9, 3]);
        let map = window_partition_rows(1, 3, 3, 3, 0);
        let wins = map.apply(&tokens, 3);
        assert_eq!(wins.shape(), &[9, 3]);
        assert_eq!(wins, tokens);
    }

    #[test]
    fn roll_roundtrip_is_bit_exact() {
        let x = seq(&[2, 3, 4, 4]);
        let fwd = roll_map(2, 3, 4, 4, -2, -2).apply(&x);
        let back = roll_map(2, 3, 4, 4, 2, 2).apply(&fwd);
        assert_eq!(back, x);
    }

    #[test]
    fn im2col_zero_vs_replicate_corner() {
        let x = seq(&[1, 2, 2]);
        let rep = im2col_map(1, 2, 2, 3, PadMode::Replicate).apply(&x);
        let zer = im2col_map(1, 2, 2, 3, PadMode::Zero).apply(&x);
        // top-left tap of output pixel (0,0): replicate reads (0,0), zero reads 0
        assert_eq!(rep[[0, 0]], 0.0);
        assert_eq!(zer[[0, 0]], 0.0);
        // tap (ky=0,kx=1) of pixel (0,0) reads row -1 clamped to row 0 / zero
        let row = 1 * 4; // ky=0,kx=1 block
        assert_eq!(rep[[row, 0]], x[[0, 0, 0]]);
        assert_eq!(zer[[row, 0]], 0.0);
    }

    proptest! {
        #[test]
        fn window_roundtrip(n in 1usize..3, wh in 1usize..4, ww in 1usize..4,
                            m in prop::sample::select(vec![2usize, 3, 4]),
                            c in 1usize..5, shift in 0usize..3) {
            let (h, w) = (wh * m, ww * m);
            let x = seq(&[n * h * w, c]);
            let part = window_partition_rows(n, h, w, m, shift);
            let rev = window_reverse_rows(n, h, w, m, shift);
            let back = rev.apply(&part.apply(&x, c), c);
            prop_assert_eq!(back, x);
        }

        #[test]
        fn pixel_shuffle_bijection(n in 1usize..3, c in 1usize..4,
                                   h in 1usize..5, w in 1usize..5,
                                   r in prop::sample::select(vec![2usize, 3])) {
            let x = seq(&[n, c * r * r, h, w]);
            let shuf = pixel_shuffle_map(n, c, h, w, r).apply(&x);
            prop_assert_eq!(shuf.iter().map(|v| *v as usize).sum::<usize>(),
                            x.iter().map(|v| *v as usize).sum::<usize>());
            let back = pixel_unshuffle_map(n, c, h, w, r).apply(&shuf);
            prop_assert_eq!(back, x);
        }

        #[test]
        fn pad_then_crop_is_identity(n in 1usize..3, c in 1usize..4,
                                     h in 1usize..6, w in 1usize..6,
                                     dh in 0usize..4, dw in 0usize..4) {
            let x = seq(&[n, c, h, w]);
            let padded = pad_replicate_map(n, c, h, w, h + dh, w + dw).apply(&x);
            let back = crop_map(n, c, h + dh, w + dw, h, w).apply(&padded);
            prop_assert_eq!(back, x);
        }

        #[test]
        fn token_layout_roundtrip(n in 1usize..3, c in 1usize..5,
                                  h in 1usize..5, w in 1usize..5) {
            let x = seq(&[n, c, h, w]);
            let t = nchw_to_tokens_map(n, c, h, w).apply(&x);
            let back = tokens_to_nchw_map(n, c, h, w).apply(&t);
            prop_assert_eq!(back, x);
        }
    }
}
