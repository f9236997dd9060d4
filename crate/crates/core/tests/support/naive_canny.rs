//! Direct scalar Canny used as a test oracle. Shares nothing with the
//! library pipeline: 2-D blur by explicit double sum, Sobel by explicit
//! kernel tables, hysteresis by repeated sweeps until nothing changes.
#![allow(dead_code, clippy::manual_clamp, clippy::manual_range_contains)]

pub const SOBEL_X: [[i32; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
pub const SOBEL_Y: [[i32; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];

fn clamp_at(img: &[u8], w: usize, h: usize, x: i64, y: i64) -> f64 {
    let cx = x.max(0).min(w as i64 - 1) as usize;
    let cy = y.max(0).min(h as i64 - 1) as usize;
    img[cy * w + cx] as f64
}

pub fn blur(img: &[u8], w: usize, h: usize, sigma: f64) -> Vec<u8> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-(k as f64) * (k as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let wts: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let mut out = vec![0u8; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for j in -r..=r {
                let mut row = 0.0;
                for i in -r..=r {
                    row += wts[(i + r) as usize] * clamp_at(img, w, h, x + i, y + j);
                }
                acc += wts[(j + r) as usize] * row;
            }
            out[y as usize * w + x as usize] = (acc + 0.5).floor().max(0.0).min(255.0) as u8;
        }
    }
    out
}

pub fn sobel(img: &[u8], w: usize, h: usize) -> (Vec<i32>, Vec<i32>) {
    let mut gx = vec![0; w * h];
    let mut gy = vec![0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (mut sx, mut sy) = (0, 0);
            for ky in 0..3 {
                for kx in 0..3 {
                    let v = clamp_at(img, w, h, x + kx as i64 - 1, y + ky as i64 - 1) as i32;
                    sx += SOBEL_X[ky][kx] * v;
                    sy += SOBEL_Y[ky][kx] * v;
                }
            }
            gx[y as usize * w + x as usize] = sx;
            gy[y as usize * w + x as usize] = sy;
        }
    }
    (gx, gy)
}

pub fn canny(img: &[u8], w: usize, h: usize, low: f64, high: f64, sigma: f64) -> Vec<u8> {
    let blurred = blur(img, w, h, sigma);
    let (gx, gy) = sobel(&blurred, w, h);
    let mag: Vec<f64> = gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| ((a * a + b * b) as f64).sqrt())
        .collect();
    let mag_at = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };

    // Non-maximum suppression.
    let mut thin = vec![0.0f64; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            if mag[i] == 0.0 {
                continue;
            }
            let mut angle = (gy[i] as f64).atan2(gx[i] as f64) * 180.0 / std::f64::consts::PI;
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dx, dy): (i64, i64) = if angle < 22.5 || angle >= 157.5 {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let along = gx[i] as i64 * dx + gy[i] as i64 * dy;
            let (ahead, behind) = if along >= 0 {
                (mag_at(x + dx, y + dy), mag_at(x - dx, y - dy))
            } else {
                (mag_at(x - dx, y - dy), mag_at(x + dx, y + dy))
            };
            if mag[i] > behind && mag[i] >= ahead {
                thin[i] = mag[i];
            }
        }
    }

    // Double threshold, then grow strong pixels into weak ones until stable.
    let mut out = vec![0u8; w * h];
    for i in 0..w * h {
        if thin[i] > 0.0 && thin[i] / 4.0 >= high {
            out[i] = 255;
        }
    }
    loop {
        let mut changed = false;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let i = y as usize * w + x as usize;
                if out[i] == 255 || thin[i] == 0.0 || thin[i] / 4.0 < low {
                    continue;
                }
                let touches = (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx >= 0
                            && ny >= 0
                            && nx < w as i64
                            && ny < h as i64
                            && out[ny as usize * w + nx as usize] == 255
                    })
                });
                if touches {
                    out[i] = 255;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    out
}
