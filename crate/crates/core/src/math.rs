// Thin wrappers over libm so the crate builds without std.

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub(crate) fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Round to the nearest `f32` so stored parameters survive a 32-bit file
/// round-trip unchanged.
#[inline]
pub(crate) fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

/// Index into `[0, n)` with half-sample symmetric reflection
/// (`c b a | a b c | c b a`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n {
        (period - 1 - m) as usize
    } else {
        m as usize
    }
}

/// Normalized 1-D Gaussian taps of length `2 * radius + 1`.
pub(crate) fn gaussian_taps(sigma: f64, radius: usize) -> alloc::vec::Vec<f64> {
    let mut taps: alloc::vec::Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            exp(-(d * d) / (2.0 * sigma * sigma))
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable blur of one `h x w` plane with reflect padding.
pub(crate) fn blur_plane(src: &[f64], h: usize, w: usize, taps: &[f64], dst: &mut [f64]) {
    let r = (taps.len() / 2) as isize;
    let mut tmp = alloc::vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * row[reflect(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            dst[y * w + x] = 0.0;
        }
        for (k, t) in taps.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - r, h);
            let src_row = &tmp[sy * w..(sy + 1) * w];
            let dst_row = &mut dst[y * w..(y + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += t * s;
            }
        }
    }
}

/// Adjoint of [`blur_plane`]: scatters each output gradient back onto the
/// source pixels it was gathered from.
pub(crate) fn blur_plane_adjoint(grad: &[f64], h: usize, w: usize, taps: &[f64], dst: &mut [f64]) {
    let r = (taps.len() / 2) as isize;
    let mut tmp = alloc::vec![0.0; h * w];
    for y in 0..h {
        for (k, t) in taps.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - r, h);
            for x in 0..w {
                tmp[sy * w + x] += t * grad[y * w + x];
            }
        }
    }
    dst.iter_mut().for_each(|d| *d = 0.0);
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            for (k, t) in taps.iter().enumerate() {
                dst[y * w + reflect(x as isize + k as isize - r, w)] += t * g;
            }
        }
    }
}
