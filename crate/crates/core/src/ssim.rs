//! Structural similarity over RGB images with an analytic backward pass.
//!
//! Statistics use an 11x11 Gaussian window (sigma 1.5) and valid-region
//! convolution, so images must be at least 11 pixels on each side. Scores are
//! averaged over channels and valid pixels.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // float methods without std
use num_traits::Float;

use crate::img::ColorImage;

const WINDOW: usize = 11;
const C1: f64 = 1e-4; // (0.01 * dynamic range)^2
const C2: f64 = 9e-4; // (0.03 * dynamic range)^2

fn gaussian_window() -> [f64; WINDOW] {
    let sigma = 1.5;
    let mut w = [0.0; WINDOW];
    let mut sum = 0.0;
    for (k, slot) in w.iter_mut().enumerate() {
        let d = k as f64 - (WINDOW as f64 - 1.0) / 2.0;
        *slot = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *slot;
    }
    for slot in w.iter_mut() {
        *slot /= sum;
    }
    w
}

/// Row-major single-channel plane.
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Self {
        Plane {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }
}

fn conv_rows_valid(p: &Plane, w: &[f64; WINDOW]) -> Plane {
    let ow = p.w - (WINDOW - 1);
    let mut out = Plane::zeros(ow, p.h);
    for y in 0..p.h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * p.data[y * p.w + x + k];
            }
            out.data[y * ow + x] = acc;
        }
    }
    out
}

fn conv_cols_valid(p: &Plane, w: &[f64; WINDOW]) -> Plane {
    let oh = p.h - (WINDOW - 1);
    let mut out = Plane::zeros(p.w, oh);
    for y in 0..oh {
        for x in 0..p.w {
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * p.data[(y + k) * p.w + x];
            }
            out.data[y * p.w + x] = acc;
        }
    }
    out
}

fn blur_valid(p: &Plane, w: &[f64; WINDOW]) -> Plane {
    conv_cols_valid(&conv_rows_valid(p, w), w)
}

/// Transpose of `conv_rows_valid`: scatters a narrow gradient back to width
/// `ow` through the window.
fn conv_rows_transposed(g: &Plane, w: &[f64; WINDOW], ow: usize) -> Plane {
    let mut out = Plane::zeros(ow, g.h);
    for y in 0..g.h {
        for x in 0..g.w {
            let gv = g.data[y * g.w + x];
            for (k, wk) in w.iter().enumerate() {
                out.data[y * ow + x + k] += wk * gv;
            }
        }
    }
    out
}

fn conv_cols_transposed(g: &Plane, w: &[f64; WINDOW], oh: usize) -> Plane {
    let mut out = Plane::zeros(g.w, oh);
    for y in 0..g.h {
        for x in 0..g.w {
            let gv = g.data[y * g.w + x];
            for (k, wk) in w.iter().enumerate() {
                out.data[(y + k) * g.w + x] += wk * gv;
            }
        }
    }
    out
}

fn blur_transposed(g: &Plane, w: &[f64; WINDOW], ow: usize, oh: usize) -> Plane {
    conv_rows_transposed(&conv_cols_transposed(g, w, oh), w, ow)
}

fn channel_plane(img: &ColorImage, c: usize) -> Plane {
    let mut p = Plane::zeros(img.width, img.height);
    for i in 0..img.width * img.height {
        p.data[i] = img.data[i * 3 + c];
    }
    p
}

fn product_plane(a: &Plane, b: &Plane) -> Plane {
    let mut out = Plane::zeros(a.w, a.h);
    for i in 0..a.data.len() {
        out.data[i] = a.data[i] * b.data[i];
    }
    out
}

/// Mean SSIM between two same-sized images.
pub fn ssim(x: &ColorImage, y: &ColorImage) -> f64 {
    ssim_impl(x, y, false).0
}

/// Mean SSIM and its gradient w.r.t. every sample of `x` (interleaved RGB).
pub fn ssim_with_grad(x: &ColorImage, y: &ColorImage) -> (f64, Vec<f64>) {
    let (mean, grad) = ssim_impl(x, y, true);
    (mean, grad.expect("gradient requested"))
}

fn ssim_impl(x: &ColorImage, y: &ColorImage, with_grad: bool) -> (f64, Option<Vec<f64>>) {
    assert_eq!(x.width, y.width);
    assert_eq!(x.height, y.height);
    assert!(
        x.width >= WINDOW && x.height >= WINDOW,
        "image smaller than the SSIM window"
    );
    let w = gaussian_window();
    let vw = x.width - (WINDOW - 1);
    let vh = x.height - (WINDOW - 1);
    let count = (vw * vh * 3) as f64;

    let mut total = 0.0;
    let mut grad = if with_grad {
        Some(vec![0.0; x.width * x.height * 3])
    } else {
        None
    };

    for c in 0..3 {
        let px = channel_plane(x, c);
        let py = channel_plane(y, c);
        let mu_x = blur_valid(&px, &w);
        let mu_y = blur_valid(&py, &w);
        let xx = blur_valid(&product_plane(&px, &px), &w);
        let yy = blur_valid(&product_plane(&py, &py), &w);
        let xy = blur_valid(&product_plane(&px, &py), &w);

        let mut d_mu = Plane::zeros(vw, vh);
        let mut d_var = Plane::zeros(vw, vh);
        let mut d_cov = Plane::zeros(vw, vh);

        for i in 0..vw * vh {
            let mx = mu_x.data[i];
            let my = mu_y.data[i];
            let var_x = xx.data[i] - mx * mx;
            let var_y = yy.data[i] - my * my;
            let cov = xy.data[i] - mx * my;
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * cov + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = var_x + var_y + C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;

            if with_grad {
                let ds = 1.0 / count;
                let d_a1 = ds * a2 / (b1 * b2);
                let d_a2 = ds * a1 / (b1 * b2);
                let d_b1 = -ds * s / b1;
                let d_b2 = -ds * s / b2;
                // Raw-moment chain: var_x = E[x^2] - mu_x^2, cov = E[xy] - mu_x mu_y.
                let d_var_x = d_b2;
                let d_cov_v = 2.0 * d_a2;
                let d_mu_x = 2.0 * my * d_a1 + 2.0 * mx * d_b1
                    - 2.0 * mx * d_var_x
                    - my * d_cov_v;
                d_mu.data[i] = d_mu_x;
                d_var.data[i] = d_var_x;
                d_cov.data[i] = d_cov_v;
            }
        }

        if let Some(g) = grad.as_mut() {
            let g_mu = blur_transposed(&d_mu, &w, x.width, x.height);
            let g_xx = blur_transposed(&d_var, &w, x.width, x.height);
            let g_xy = blur_transposed(&d_cov, &w, x.width, x.height);
            for i in 0..x.width * x.height {
                g[i * 3 + c] +=
                    g_mu.data[i] + 2.0 * px.data[i] * g_xx.data[i] + py.data[i] * g_xy.data[i];
            }
        }
    }

    (total / count, grad)
}
