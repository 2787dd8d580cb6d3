use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const WINDOW: usize = 7;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Mean structural similarity over every fully contained 7x7 window, with
/// uniform weights, population moments and dynamic range 1.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::invalid(format!(
            "ssim of differently shaped images {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let [h, w] = *x.shape() else {
        return Err(Error::invalid(format!("ssim needs [h, w] images, got {:?}", x.shape())));
    };
    ssim_flat(x.data(), y.data(), h, w)
}

pub(crate) fn ssim_flat(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < WINDOW || w < WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {WINDOW}x{WINDOW}"
        )));
    }
    if x.len() != h * w || y.len() != h * w {
        return Err(Error::invalid("ssim pixel buffers do not match the image size"));
    }
    let area = (WINDOW * WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - WINDOW {
        for c0 in 0..=w - WINDOW {
            let (mut sx, mut sy) = (0.0, 0.0);
            for r in r0..r0 + WINDOW {
                for c in c0..c0 + WINDOW {
                    sx += x[r * w + c];
                    sy += y[r * w + c];
                }
            }
            let (mx, my) = (sx / area, sy / area);
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for r in r0..r0 + WINDOW {
                for c in c0..c0 + WINDOW {
                    let dx = x[r * w + c] - mx;
                    let dy = y[r * w + c] - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
            }
            let (vx, vy, cxy) = (vx / area, vy / area, cxy / area);
            total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
