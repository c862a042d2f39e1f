//! Image-quality metrics on linear buffers in `[0, 1]`.

/// Returned when two images are identical.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return PSNR_CAP;
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let c = (WINDOW / 2) as f64;
    let mut w: [f64; WINDOW] = std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter, valid region only.
fn filter(img: &[f64], w: usize, h: usize, win: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..WINDOW).map(|k| win[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| win[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM of one channel with an 11x11 Gaussian window (σ = 1.5).
pub fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    assert_eq!(a.len(), w * h);
    assert_eq!(b.len(), w * h);
    if a == b {
        return 1.0;
    }
    assert!(w >= WINDOW && h >= WINDOW, "ssim needs images of at least {WINDOW}x{WINDOW}");
    let win = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, ow, oh) = filter(a, w, h, &win);
    let (mu_b, _, _) = filter(b, w, h, &win);
    let (aa, _, _) = filter(&prod(a, a), w, h, &win);
    let (bb, _, _) = filter(&prod(b, b), w, h, &win);
    let (ab, _, _) = filter(&prod(a, b), w, h, &win);
    let mut sum = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    sum / (ow * oh) as f64
}

/// Mean SSIM over the channels of interleaved images.
pub fn ssim(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize) -> f64 {
    assert_eq!(a.len(), w * h * channels);
    if a == b {
        return 1.0;
    }
    let split = |img: &[f64], c: usize| img.iter().skip(c).step_by(channels).copied().collect::<Vec<_>>();
    (0..channels).map(|c| ssim_channel(&split(a, c), &split(b, c), w, h)).sum::<f64>() / channels as f64
}
