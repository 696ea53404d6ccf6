//! Windowed SSIM with box pooling and reflection padding, plus its gradient
//! with respect to the second (reconstructed) image.

use crate::geometry::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    // one reflection suffices for windows narrower than the image
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Window member offsets (as flat pixel indices) for every pixel.
pub(crate) struct Windows {
    pub xs: Vec<Vec<usize>>,
    pub ys: Vec<Vec<usize>>,
}

impl Windows {
    pub fn new(width: usize, height: usize, window: usize) -> Self {
        let half = window / 2;
        let table = |n: usize| {
            (0..n).map(|i| (-(half as isize)..=half as isize).map(|d| reflect(i as isize + d, n)).collect()).collect()
        };
        Self { xs: table(width), ys: table(height) }
    }
}

/// Per-pixel SSIM, averaged over channels and clamped to `[0, 1]`.
pub fn ssim_map(a: &Image, b: &Image, p: &SsimParams) -> Vec<f64> {
    let (w, h, c) = a.dims();
    let win = Windows::new(w, h, p.window);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                let m = moments(a, b, &win, x, y, ch);
                acc += ssim_from_moments(&m, p).0.clamp(0.0, 1.0);
            }
            out[y * w + x] = acc / c as f64;
        }
    }
    out
}

/// Per pixel and channel: 0 when SSIM lies strictly inside `(0, 1)`, 1 when
/// clamped at 0, 2 when clamped at 1.
pub(crate) fn clamp_states(a: &Image, b: &Image, p: &SsimParams) -> Vec<u8> {
    let (w, h, c) = a.dims();
    let win = Windows::new(w, h, p.window);
    let mut out = Vec::with_capacity(w * h * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let s = ssim_from_moments(&moments(a, b, &win, x, y, ch), p).0;
                out.push(if s <= 0.0 {
                    1
                } else if s >= 1.0 {
                    2
                } else {
                    0
                });
            }
        }
    }
    out
}

pub(crate) struct Moments {
    pub mx: f64,
    pub my: f64,
    pub exx: f64,
    pub eyy: f64,
    pub exy: f64,
}

#[inline]
pub(crate) fn moments(a: &Image, b: &Image, win: &Windows, x: usize, y: usize, ch: usize) -> Moments {
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &yy in &win.ys[y] {
        for &xx in &win.xs[x] {
            let va = a.get(xx, yy, ch);
            let vb = b.get(xx, yy, ch);
            sx += va;
            sy += vb;
            sxx += va * va;
            syy += vb * vb;
            sxy += va * vb;
        }
    }
    let n = (win.xs[x].len() * win.ys[y].len()) as f64;
    Moments { mx: sx / n, my: sy / n, exx: sxx / n, eyy: syy / n, exy: sxy / n }
}

/// Returns SSIM and its partials with respect to `(E[y], E[y^2], E[xy])`.
#[inline]
pub(crate) fn ssim_from_moments(m: &Moments, p: &SsimParams) -> (f64, [f64; 3]) {
    let vx = m.exx - m.mx * m.mx;
    let vy = m.eyy - m.my * m.my;
    let cxy = m.exy - m.mx * m.my;
    let num_l = 2.0 * m.mx * m.my + p.c1;
    let num_c = 2.0 * cxy + p.c2;
    let den_l = m.mx * m.mx + m.my * m.my + p.c1;
    let den_c = vx + vy + p.c2;
    let s = num_l * num_c / (den_l * den_c);
    let d_my = 2.0 * m.mx * num_c / (den_l * den_c) - s * 2.0 * m.my / den_l;
    let d_vy = -s / den_c;
    let d_cxy = 2.0 * num_l / (den_l * den_c);
    (s, [d_my - 2.0 * m.my * d_vy - m.mx * d_cxy, d_vy, d_cxy])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_score_one() {
        let a = Image::from_fn(7, 5, 3, |x, y, c| ((x * 3 + y * 5 + c) % 7) as f64 / 7.0);
        let p = SsimParams { window: 3, c1: 1e-4, c2: 9e-4 };
        assert!(ssim_map(&a, &a, &p).iter().all(|&s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
        assert_eq!(reflect(-1, 1), 0);
        let w = Windows::new(4, 1, 3);
        assert_eq!(w.xs[0], vec![1, 0, 1]);
        assert_eq!(w.xs[3], vec![2, 3, 2]);
    }

    #[test]
    fn moment_partials_match_finite_differences() {
        let p = SsimParams { window: 3, c1: 1e-4, c2: 9e-4 };
        let base = Moments { mx: 0.4, my: 0.3, exx: 0.2, eyy: 0.12, exy: 0.13 };
        let (_, g) = ssim_from_moments(&base, &p);
        let h = 1e-7;
        let eval = |dmy: f64, deyy: f64, dexy: f64| {
            let m = Moments { my: base.my + dmy, eyy: base.eyy + deyy, exy: base.exy + dexy, ..base };
            ssim_from_moments(&m, &p).0
        };
        let fd = [
            (eval(h, 0.0, 0.0) - eval(-h, 0.0, 0.0)) / (2.0 * h),
            (eval(0.0, h, 0.0) - eval(0.0, -h, 0.0)) / (2.0 * h),
            (eval(0.0, 0.0, h) - eval(0.0, 0.0, -h)) / (2.0 * h),
        ];
        for i in 0..3 {
            assert!((fd[i] - g[i]).abs() < 1e-5 * g[i].abs().max(1.0), "{i}: {} vs {}", fd[i], g[i]);
        }
    }
}
