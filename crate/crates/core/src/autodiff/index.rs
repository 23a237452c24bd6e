//! Data-movement operations expressed as gathers: permutation, slicing,
//! broadcasting and the window partition used by windowed attention.

use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, KeyMask, Var, GATHER_ZERO};
use crate::{Error, Real, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Real> Graph<T> {
    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", "not a permutation of the axes"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..n {
            let src: usize = coord.iter().zip(perm).map(|(&c, &p)| c * in_strides[p]).sum();
            index.push(src as u32);
            for d in (0..coord.len()).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(x, index, &out_shape)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid("narrow", "slice out of range"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                index.extend((base..base + inner).map(|i| i as u32));
            }
        }
        let mut out = shape.clone();
        out[axis] = len;
        self.gather(x, index, &out)
    }

    /// Repeats `x` along a new leading axis of size `n`.
    pub fn repeat_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let m: usize = shape.iter().product();
        let index: Vec<u32> = (0..n).flat_map(|_| 0..m as u32).collect();
        let mut out = vec![n];
        out.extend_from_slice(&shape);
        self.gather(x, index, &out)
    }

    /// Channel-to-space rearrangement `[N, r*r*C, H, W] -> [N, C, r*H, r*W]`:
    /// output pixel `(h*r + i, w*r + j)` of channel `c` reads input channel
    /// `c*r*r + i*r + j` at `(h, w)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || !s[1].is_multiple_of(r * r) {
            return Err(Error::invalid("pixel_shuffle", "channels must be divisible by r^2"));
        }
        let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let c = cin / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut index = Vec::with_capacity(n * cin * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let src_c = ch * r * r + (y % r) * r + xx % r;
                        index.push((((b * cin + src_c) * h + y / r) * w + xx / r) as u32);
                    }
                }
            }
        }
        self.gather(x, index, &[n, c, oh, ow])
    }

    /// Inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || r == 0 || !s[2].is_multiple_of(r) || !s[3].is_multiple_of(r) {
            return Err(Error::invalid("pixel_unshuffle", "spatial dims must be divisible by r"));
        }
        let (n, c, oh, ow) = (s[0], s[1], s[2], s[3]);
        let (h, w) = (oh / r, ow / r);
        let cin = c * r * r;
        let mut index = Vec::with_capacity(n * cin * h * w);
        for b in 0..n {
            for ci in 0..cin {
                let (ch, i, j) = (ci / (r * r), (ci % (r * r)) / r, ci % r);
                for y in 0..h {
                    for xx in 0..w {
                        index.push((((b * c + ch) * oh + y * r + i) * ow + xx * r + j) as u32);
                    }
                }
            }
        }
        self.gather(x, index, &[n, cin, h, w])
    }

    /// Cyclic roll of a token grid `[N, h*w, C]` by `(dy, dx)` positions:
    /// output `(y, x)` reads input `((y - dy) mod h, (x - dx) mod w)`.
    pub fn roll_grid(&mut self, x: Var, (h, w): (usize, usize), (dy, dx): (isize, isize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::shape("roll_grid", &s, &[h, w]));
        }
        let (n, c) = (s[0], s[2]);
        let mut index = Vec::with_capacity(n * h * w * c);
        for b in 0..n {
            for y in 0..h {
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                for xx in 0..w {
                    let sx = (xx as isize - dx).rem_euclid(w as isize) as usize;
                    let base = ((b * h + sy) * w + sx) * c;
                    index.extend((base..base + c).map(|i| i as u32));
                }
            }
        }
        self.gather(x, index, &s)
    }

    /// Rows of a `[R, C]` matrix, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::invalid("select_rows", "row out of range"));
        }
        let c = s[1];
        let index: Vec<u32> = rows
            .iter()
            .flat_map(|&r| (r * c..(r + 1) * c).map(|i| i as u32))
            .collect();
        self.gather(x, index, &[rows.len(), c])
    }

    /// Splits a token grid `[N, h*w, C]` into windows `[N*nW, wh*ww, C]`.
    pub fn window_partition(&mut self, x: Var, layout: &WindowLayout) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != layout.batch || s[1] != layout.h * layout.w {
            return Err(Error::shape("window_partition", &s, &[layout.batch, layout.h * layout.w]));
        }
        let c = s[2];
        let index: Vec<u32> = layout
            .source
            .iter()
            .flat_map(|src| match src {
                Some(t) => (t * c..(t + 1) * c).map(|i| i as u32).collect::<Vec<_>>(),
                None => vec![GATHER_ZERO; c],
            })
            .collect();
        self.gather(x, index, &[layout.num_windows_total(), layout.window_tokens(), c])
    }

    /// Inverse of [`Graph::window_partition`]; padding positions are dropped.
    pub fn window_merge(&mut self, x: Var, layout: &WindowLayout) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != layout.num_windows_total() || s[1] != layout.window_tokens() {
            return Err(Error::shape("window_merge", &s, &[layout.num_windows_total(), layout.window_tokens()]));
        }
        let c = s[2];
        let mut slot = vec![0usize; layout.batch * layout.h * layout.w];
        for (pos, src) in layout.source.iter().enumerate() {
            if let Some(t) = src {
                slot[*t] = pos;
            }
        }
        let index: Vec<u32> = slot
            .iter()
            .flat_map(|&p| (p * c..(p + 1) * c).map(|i| i as u32))
            .collect();
        self.gather(x, index, &[layout.batch, layout.h * layout.w, c])
    }
}

/// How a token grid is padded, optionally rolled, and cut into windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowLayout {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub window: (usize, usize),
    pub padded: (usize, usize),
    pub shift: (usize, usize),
    /// For each window slot (`[N*nW, wh*ww]` flattened) the source token
    /// index in `[N, h*w]`, or `None` for padding.
    pub source: Vec<Option<usize>>,
}

impl WindowLayout {
    /// Pads `(h, w)` up to multiples of `window`. With `shift`, the padded
    /// grid is rolled by half a window before partitioning so that window
    /// slot `(py, px)` holds padded position `((py + sy) mod hp, (px + sx)
    /// mod wp)`.
    pub fn new(batch: usize, (h, w): (usize, usize), window: (usize, usize), shift: bool) -> Result<Self> {
        let (wh, ww) = window;
        if wh == 0 || ww == 0 {
            return Err(Error::invalid("window_layout", "window must be non-empty"));
        }
        let hp = h.div_ceil(wh) * wh;
        let wp = w.div_ceil(ww) * ww;
        let shift = if shift { (wh / 2, ww / 2) } else { (0, 0) };
        let (nwy, nwx) = (hp / wh, wp / ww);
        let nw = nwy * nwx;
        let mut source = Vec::with_capacity(batch * nw * wh * ww);
        for n in 0..batch {
            for wi in 0..nw {
                let (wy, wx) = (wi / nwx, wi % nwx);
                for t in 0..wh * ww {
                    let py = wy * wh + t / ww;
                    let px = wx * ww + t % ww;
                    let oy = (py + shift.0) % hp;
                    let ox = (px + shift.1) % wp;
                    source.push(if oy < h && ox < w { Some(n * h * w + oy * w + ox) } else { None });
                }
            }
        }
        Ok(WindowLayout {
            batch,
            h,
            w,
            window,
            padded: (hp, wp),
            shift,
            source,
        })
    }

    pub fn windows_per_image(&self) -> usize {
        (self.padded.0 / self.window.0) * (self.padded.1 / self.window.1)
    }

    pub fn num_windows_total(&self) -> usize {
        self.batch * self.windows_per_image()
    }

    pub fn window_tokens(&self) -> usize {
        self.window.0 * self.window.1
    }

    pub fn has_padding(&self) -> bool {
        self.source.iter().any(Option::is_none)
    }

    /// Key validity per window, for [`Graph::softmax`].
    pub fn key_valid(&self) -> Vec<bool> {
        self.source.iter().map(Option::is_some).collect()
    }

    /// Valid rows of each window in the flattened `[N*nW*wh*ww, C]` layout.
    pub fn window_segments(&self) -> Vec<Vec<usize>> {
        let t = self.window_tokens();
        (0..self.num_windows_total())
            .map(|b| (b * t..(b + 1) * t).filter(|&i| self.source[i].is_some()).collect())
            .collect()
    }

    pub fn key_mask(&self, heads: usize, queries: usize, extra_keys: usize) -> KeyMask {
        let t = self.window_tokens();
        let mut valid = Vec::with_capacity(self.num_windows_total() * heads * (t + extra_keys));
        for b in 0..self.num_windows_total() {
            for _ in 0..heads {
                valid.extend(self.source[b * t..(b + 1) * t].iter().map(Option::is_some));
                valid.extend(core::iter::repeat_n(true, extra_keys));
            }
        }
        KeyMask {
            valid,
            rows_per_group: queries,
        }
    }
}
