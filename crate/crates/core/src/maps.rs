//! Constructors for the fixed sparse maps used by the models: im2col, pooling,
//! patch (un)folding, crops and bilinear resampling.
//!
//! Maps that depend only on the image size are memoized; they are immutable
//! once built.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::graph::SparseMap;
use crate::types::CHANNELS;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Key {
    Im2col(usize, usize),
    Pool(usize, usize, usize),
    Patchify(usize, usize, usize),
    Unpatchify(usize, usize, usize),
}

fn cached(key: Key, build: impl FnOnce() -> SparseMap) -> Arc<SparseMap> {
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<SparseMap>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.lock().expect("map cache poisoned").get(&key) {
        return m.clone();
    }
    let built = Arc::new(build());
    cache.lock().expect("map cache poisoned").entry(key).or_insert(built).clone()
}

/// `[h, w, 3]` image to `[h*w, 27]` 3x3 neighbourhoods, zero padded.
/// Column order is `(dy, dx, channel)`.
pub fn im2col3x3(h: usize, w: usize) -> Arc<SparseMap> {
    cached(Key::Im2col(h, w), || {
        let mut idx = Vec::with_capacity(h * w * 9 * CHANNELS);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (sy, sx) = (y + dy, x + dx);
                        for c in 0..CHANNELS {
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                idx.push(None);
                            } else {
                                idx.push(Some((sy as usize * w + sx as usize) * CHANNELS + c));
                            }
                        }
                    }
                }
            }
        }
        SparseMap::gather(vec![h * w, 9 * CHANNELS], h * w * CHANNELS, idx)
    })
}

/// Average pooling of a `[h, w, 3]` image onto a `grid x grid` layout,
/// producing `[grid * grid * 3]`. `h` and `w` must be multiples of `grid`.
pub fn avg_pool(h: usize, w: usize, grid: usize) -> Arc<SparseMap> {
    cached(Key::Pool(h, w, grid), || {
        let (ch, cw) = (h / grid, w / grid);
        let norm = 1.0 / (ch * cw) as f64;
        let mut rows = Vec::with_capacity(grid * grid * CHANNELS);
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..CHANNELS {
                    let mut row = Vec::with_capacity(ch * cw);
                    for y in gy * ch..(gy + 1) * ch {
                        for x in gx * cw..(gx + 1) * cw {
                            row.push(((y * w + x) * CHANNELS + c, norm));
                        }
                    }
                    rows.push(row);
                }
            }
        }
        SparseMap::from_rows(vec![grid * grid * CHANNELS], h * w * CHANNELS, rows)
    })
}

/// `[h, w, 3]` image to `[(h/p)*(w/p), p*p*3]` non-overlapping patches.
pub fn patchify(h: usize, w: usize, p: usize) -> Arc<SparseMap> {
    cached(Key::Patchify(h, w, p), || {
        let (gh, gw) = (h / p, w / p);
        let mut idx = Vec::with_capacity(h * w * CHANNELS);
        for ty in 0..gh {
            for tx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..CHANNELS {
                            let (y, x) = (ty * p + py, tx * p + px);
                            idx.push(Some((y * w + x) * CHANNELS + c));
                        }
                    }
                }
            }
        }
        SparseMap::gather(vec![gh * gw, p * p * CHANNELS], h * w * CHANNELS, idx)
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(h: usize, w: usize, p: usize) -> Arc<SparseMap> {
    cached(Key::Unpatchify(h, w, p), || {
        let gw = w / p;
        let mut idx = Vec::with_capacity(h * w * CHANNELS);
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let token = (y / p) * gw + x / p;
                    let within = ((y % p) * p + x % p) * CHANNELS + c;
                    idx.push(Some(token * p * p * CHANNELS + within));
                }
            }
        }
        SparseMap::gather(vec![h, w, CHANNELS], h * w * CHANNELS, idx)
    })
}

/// Bilinear resampling of the window `[top, top+crop_h) x [left, left+crop_w)`
/// (fractional bounds allowed) of an `[h, w, 3]` image onto `[out_h, out_w, 3]`.
///
/// Sample centres are aligned so that a full-size window at the same output
/// size reproduces the input exactly.
#[allow(clippy::too_many_arguments)]
pub fn crop_resize(h: usize, w: usize, top: f64, left: f64, crop_h: f64, crop_w: f64, out_h: usize, out_w: usize) -> SparseMap {
    let axis = |n: usize, start: f64, len: f64, out: usize| -> Vec<[(usize, f64); 2]> {
        (0..out)
            .map(|i| {
                let pos = (start + (i as f64 + 0.5) * len / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                let f = pos - i0 as f64;
                [(i0, 1.0 - f), (i1, f)]
            })
            .collect()
    };
    let ys = axis(h, top, crop_h, out_h);
    let xs = axis(w, left, crop_w, out_w);
    let mut rows = Vec::with_capacity(out_h * out_w * CHANNELS);
    for yw in &ys {
        for xw in &xs {
            for c in 0..CHANNELS {
                let mut row = Vec::with_capacity(4);
                for &(y, wy) in yw {
                    for &(x, wx) in xw {
                        let wgt = wy * wx;
                        if wgt != 0.0 {
                            row.push(((y * w + x) * CHANNELS + c, wgt));
                        }
                    }
                }
                rows.push(row);
            }
        }
    }
    SparseMap::from_rows(vec![out_h, out_w, CHANNELS], h * w * CHANNELS, rows)
}
