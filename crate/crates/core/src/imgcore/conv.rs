use super::{Filter, Image};

/// How samples outside the image are defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Half-sample symmetric reflection, `x[-1] = x[0]`.
    #[default]
    Reflect,
    /// Samples outside the image are zero.
    Zero,
}

const OUTSIDE: usize = usize::MAX;

impl Boundary {
    #[inline]
    fn map(self, idx: isize, n: usize) -> usize {
        let n_i = n as isize;
        if (0..n_i).contains(&idx) {
            return idx as usize;
        }
        match self {
            Boundary::Zero => OUTSIDE,
            Boundary::Reflect => {
                let period = 2 * n_i;
                let m = idx.rem_euclid(period);
                if m < n_i {
                    m as usize
                } else {
                    (period - 1 - m) as usize
                }
            }
        }
    }
}

/// Source index of every padded coordinate along one axis, `n + 2r` entries.
fn pad_table(n: usize, r: usize, boundary: Boundary) -> Vec<usize> {
    (0..n + 2 * r)
        .map(|p| boundary.map(p as isize - r as isize, n))
        .collect()
}

/// Input extended by `r` samples on every side according to the boundary rule.
struct Padded {
    data: Vec<f64>,
    stride: usize,
}

fn pad(img: &Image, r: usize, boundary: Boundary) -> Padded {
    let (w, h) = img.dims();
    let rows = pad_table(h, r, boundary);
    let cols = pad_table(w, r, boundary);
    let src = img.data();
    let stride = w + 2 * r;
    let mut data = vec![0.0; stride * (h + 2 * r)];
    for (py, &sy) in rows.iter().enumerate() {
        if sy == OUTSIDE {
            continue;
        }
        let line = &src[sy * w..(sy + 1) * w];
        let out = &mut data[py * stride..(py + 1) * stride];
        for (o, &sx) in out.iter_mut().zip(&cols) {
            if sx != OUTSIDE {
                *o = line[sx];
            }
        }
    }
    Padded { data, stride }
}

/// Same-size correlation `out(y, x) = sum_ij f(i, j) img(y + i - r, x + j - r)`.
///
/// This is the matrix `K` acting on the row-major data vector.
pub fn conv2d(img: &Image, f: &Filter, boundary: Boundary) -> Image {
    let (w, h) = img.dims();
    let size = f.size();
    let p = pad(img, f.radius(), boundary);
    let mut out = Image::zeros(w, h);
    let dst = out.data_mut();
    for (i, trow) in f.taps().chunks_exact(size).enumerate() {
        for (j, &t) in trow.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            for y in 0..h {
                let start = (y + i) * p.stride + j;
                let src = &p.data[start..start + w];
                for (d, &s) in dst[y * w..(y + 1) * w].iter_mut().zip(src) {
                    *d += t * s;
                }
            }
        }
    }
    out
}

/// Exact adjoint `K^T` of [`conv2d`]: scatter into the padded domain, then
/// fold every padded sample back onto its source pixel.
pub fn conv2d_adjoint(resp: &Image, f: &Filter, boundary: Boundary) -> Image {
    let (w, h) = resp.dims();
    let size = f.size();
    let r = f.radius();
    let stride = w + 2 * r;
    let mut q = vec![0.0; stride * (h + 2 * r)];
    let src = resp.data();
    for (i, trow) in f.taps().chunks_exact(size).enumerate() {
        for (j, &t) in trow.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            for y in 0..h {
                let start = (y + i) * stride + j;
                for (d, &s) in q[start..start + w].iter_mut().zip(&src[y * w..(y + 1) * w]) {
                    *d += t * s;
                }
            }
        }
    }
    let rows = pad_table(h, r, boundary);
    let cols = pad_table(w, r, boundary);
    let mut out = Image::zeros(w, h);
    let dst = out.data_mut();
    for (py, &sy) in rows.iter().enumerate() {
        if sy == OUTSIDE {
            continue;
        }
        let line = &q[py * stride..(py + 1) * stride];
        let target = &mut dst[sy * w..(sy + 1) * w];
        if sy + r == py {
            // interior columns map one-to-one
            for (d, &s) in target.iter_mut().zip(&line[r..r + w]) {
                *d += s;
            }
            for (px, &sx) in cols.iter().enumerate() {
                if (px < r || px >= r + w) && sx != OUTSIDE {
                    target[sx] += line[px];
                }
            }
        } else {
            for (&v, &sx) in line.iter().zip(&cols) {
                if sx != OUTSIDE {
                    target[sx] += v;
                }
            }
        }
    }
    out
}

/// Gradient of `<weights, conv2d(img, f)>` with respect to the taps of `f`:
/// `g(i, j) = sum_p weights(p) img(src(p, i, j))`. Returned row-major,
/// `size * size` entries.
pub fn filter_gradient(weights: &Image, img: &Image, size: usize, boundary: Boundary) -> Vec<f64> {
    debug_assert!(weights.same_dims(img));
    let (w, h) = img.dims();
    let p = pad(img, size / 2, boundary);
    let wt = weights.data();
    let mut grad = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            let mut acc = 0.0;
            for y in 0..h {
                let start = (y + i) * p.stride + j;
                acc += wt[y * w..(y + 1) * w]
                    .iter()
                    .zip(&p.data[start..start + w])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            grad[i * size + j] = acc;
        }
    }
    grad
}
