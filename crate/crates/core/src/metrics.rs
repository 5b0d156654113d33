//! Evaluation protocol: PSNR, SSIM, per-channel spectral information
//! divergence, their aggregation over a test set, and the
//! forward/backward flow-consistency occlusion mask.
//!
//! Conventions fixed here (and flagged in emitted reports): PSNR uses one
//! joint MSE across the three channels on the 255 scale, capped at a
//! 100 dB sentinel for identical images; SSIM runs on luma
//! (0.299 R + 0.587 G + 0.114 B) with the 11x11 sigma-1.5 Gaussian
//! window; SID treats each channel as a spatial probability distribution
//! and reports the symmetric KL divergence in Table-order (blue, green,
//! red); aggregation uses the population standard deviation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Validity mask: `true` keeps a pixel, `false` drops it (occluded or
/// unreliable registration).
pub type PixelMask = Vec<bool>;

pub const PSNR_SENTINEL_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;
const SID_FLOOR: f64 = 1e-12;

fn rgb_dims(t: &Tensor<f32>, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [3, h, w] => Ok((h, w)),
        _ => Err(Error::dim(op, format!("expected [3, H, W], got {:?}", t.shape()))),
    }
}

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>, mask: Option<&PixelMask>, op: &'static str) -> Result<(usize, usize)> {
    let (h, w) = rgb_dims(a, op)?;
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::dim(op, format!("mask has {} entries for {} pixels", m.len(), h * w)));
        }
    }
    Ok((h, w))
}

/// Peak signal-to-noise ratio in dB over the unmasked pixels.
///
/// Inputs are `[0, 1]` images; the MSE is taken jointly over all three
/// channels on the 255 scale. Identical images return the 100 dB
/// sentinel (the cap also bounds near-identical pairs).
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, mask: Option<&PixelMask>) -> Result<f64> {
    let (h, w) = check_pair(a, b, mask, "psnr")?;
    let plane = h * w;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for p in 0..plane {
        if mask.map_or(true, |m| m[p]) {
            for c in 0..3 {
                let d = (a.data()[c * plane + p] as f64 - b.data()[c * plane + p] as f64) * 255.0;
                acc += d * d;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Usage("psnr: mask excludes every pixel".into()));
    }
    let mse = acc / (count as f64 * 3.0);
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_SENTINEL_DB))
}

fn luma(img: &Tensor<f32>, plane: usize) -> Vec<f64> {
    (0..plane)
        .map(|p| {
            255.0
                * (0.299 * img.data()[p] as f64
                    + 0.587 * img.data()[plane + p] as f64
                    + 0.114 * img.data()[2 * plane + p] as f64)
        })
        .collect()
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-region Gaussian filter: `[h, w] -> [h-10, w-10]`.
fn gauss_filter_valid(img: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * img[y * w + x + k];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * horiz[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean local SSIM on luma. Local statistics use the 11x11 Gaussian
/// window; with a mask, only windows whose centre pixel is kept
/// contribute to the mean (window statistics still cover all pixels).
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>, mask: Option<&PixelMask>) -> Result<f64> {
    let (h, w) = check_pair(a, b, mask, "ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dim(
            "ssim",
            format!("image {}x{} smaller than the {0}x{0} window", h, w),
        ));
    }
    let plane = h * w;
    let la = luma(a, plane);
    let lb = luma(b, plane);
    let laa: Vec<f64> = la.iter().map(|v| v * v).collect();
    let lbb: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let lab: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();

    let win = gaussian_window();
    let mu_a = gauss_filter_valid(&la, h, w, &win);
    let mu_b = gauss_filter_valid(&lb, h, w, &win);
    let m_aa = gauss_filter_valid(&laa, h, w, &win);
    let m_bb = gauss_filter_valid(&lbb, h, w, &win);
    let m_ab = gauss_filter_valid(&lab, h, w, &win);

    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let half = SSIM_WINDOW / 2;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for y in 0..oh {
        for x in 0..ow {
            if let Some(m) = mask {
                if !m[(y + half) * w + x + half] {
                    continue;
                }
            }
            let i = y * ow + x;
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            acc += s;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Usage("ssim: mask excludes every window centre".into()));
    }
    Ok(acc / count as f64)
}

/// Per-channel spectral information divergence in Table order
/// (blue, green, red).
///
/// Each channel's unmasked pixels are floored at 1e-12 and normalized to
/// a probability vector; the reported value is the symmetric divergence
/// `sum p ln(p/q) + sum q ln(q/p)`. A channel that is identically zero on
/// the unmasked region is an error naming the channel.
pub fn sid_per_channel(
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    mask: Option<&PixelMask>,
) -> Result<(f64, f64, f64)> {
    let (h, w) = check_pair(a, b, mask, "sid")?;
    let plane = h * w;
    let names = ["red", "green", "blue"];
    let mut sid = [0f64; 3];
    for c in 0..3 {
        let mut p = Vec::with_capacity(plane);
        let mut q = Vec::with_capacity(plane);
        for i in 0..plane {
            if mask.map_or(true, |m| m[i]) {
                p.push(a.data()[c * plane + i] as f64);
                q.push(b.data()[c * plane + i] as f64);
            }
        }
        if p.is_empty() {
            return Err(Error::Usage("sid: mask excludes every pixel".into()));
        }
        for (name, chan) in [(names[c], &p), (names[c], &q)] {
            if chan.iter().all(|&v| v == 0.0) {
                return Err(Error::Usage(format!("sid: {} channel is identically zero", name)));
            }
        }
        let norm = |v: &[f64]| -> Vec<f64> {
            let floored: Vec<f64> = v.iter().map(|&x| x.max(SID_FLOOR)).collect();
            let sum: f64 = floored.iter().sum();
            floored.into_iter().map(|x| x / sum).collect()
        };
        let pn = norm(&p);
        let qn = norm(&q);
        sid[c] = pn
            .iter()
            .zip(&qn)
            .map(|(&pi, &qi)| pi * (pi / qi).ln() + qi * (qi / pi).ln())
            .sum();
    }
    // storage is RGB; Table order is blue, green, red
    Ok((sid[2], sid[1], sid[0]))
}

/// Metrics of one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub sid_blue: f64,
    pub sid_green: f64,
    pub sid_red: f64,
}

impl ImageMetrics {
    fn columns(&self) -> [f64; 5] {
        [self.psnr_db, self.ssim, self.sid_blue, self.sid_green, self.sid_red]
    }
}

/// Per-image metrics plus column means and population standard deviations.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

/// Column means and population standard deviations over the per-image
/// rows. Errors on an empty list.
pub fn aggregate(per_image: Vec<ImageMetrics>) -> Result<MetricReport> {
    if per_image.is_empty() {
        return Err(Error::Usage("aggregate: no images".into()));
    }
    let n = per_image.len() as f64;
    let mut mean = [0f64; 5];
    for row in &per_image {
        for (m, v) in mean.iter_mut().zip(row.columns()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = [0f64; 5];
    for row in &per_image {
        for ((v, &m), x) in var.iter_mut().zip(&mean).zip(row.columns()) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.map(|v| (v / n).sqrt());
    Ok(MetricReport { per_image, mean, std })
}

impl MetricReport {
    /// CSV with one row per image and `mean` / `std` summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim,sid_blue,sid_green,sid_red\n");
        for row in &self.per_image {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6e},{:.6e},{:.6e}\n",
                row.id, row.psnr_db, row.ssim, row.sid_blue, row.sid_green, row.sid_red
            ));
        }
        for (name, vals) in [("mean", &self.mean), ("std", &self.std)] {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6e},{:.6e},{:.6e}\n",
                name, vals[0], vals[1], vals[2], vals[3], vals[4]
            ));
        }
        out
    }

    /// Aligned text table: mean with the standard deviation in
    /// parentheses, one row per method.
    pub fn to_table(&self, method: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>16} {:>16} {:>22} {:>22} {:>22}\n",
            "Method", "PSNR (dB)", "SSIM", "SID Blue", "SID Green", "SID Red"
        ));
        out.push_str(&format!(
            "{:<16} {:>16} {:>16} {:>22} {:>22} {:>22}\n",
            method,
            format!("{:.2} ({:.2})", self.mean[0], self.std[0]),
            format!("{:.3} ({:.3})", self.mean[1], self.std[1]),
            format!("{:.2e} ({:.2e})", self.mean[2], self.std[2]),
            format!("{:.2e} ({:.2e})", self.mean[3], self.std[3]),
            format!("{:.2e} ({:.2e})", self.mean[4], self.std[4]),
        ));
        out.push_str("PSNR: joint RGB MSE; SSIM: luma; SID: symmetric KL over spatial distributions; std: population.\n");
        out
    }
}

/// Forward/backward flow-consistency mask.
///
/// A pixel is kept when the round trip `fw(p) + bw(p + fw(p))` has
/// Euclidean norm at or below `threshold_px`. `bw` is sampled bilinearly
/// at the forward target; targets outside the image mask the pixel out.
/// Flow channel 0 is the horizontal (column) displacement, channel 1 the
/// vertical (row) displacement.
pub fn occlusion_mask(
    flow_fw: &Tensor<f32>,
    flow_bw: &Tensor<f32>,
    threshold_px: f32,
) -> Result<PixelMask> {
    let (h, w) = match *flow_fw.shape() {
        [2, h, w] => (h, w),
        _ => return Err(Error::dim("occlusion_mask", format!("expected [2, H, W], got {:?}", flow_fw.shape()))),
    };
    if flow_bw.shape() != flow_fw.shape() {
        return Err(Error::dim(
            "occlusion_mask",
            format!("flow shapes {:?} vs {:?}", flow_fw.shape(), flow_bw.shape()),
        ));
    }
    let plane = h * w;
    let sample_bw = |x: f64, y: f64, chan: usize| -> f64 {
        let x0 = x.floor() as isize;
        let y0 = y.floor() as isize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let at = |xi: isize, yi: isize| -> f64 {
            let xi = xi.clamp(0, w as isize - 1) as usize;
            let yi = yi.clamp(0, h as isize - 1) as usize;
            flow_bw.data()[chan * plane + yi * w + xi] as f64
        };
        (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0))
            + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1))
    };
    let mut mask = vec![false; plane];
    for y in 0..h {
        for x in 0..w {
            let fx = flow_fw.data()[y * w + x] as f64;
            let fy = flow_fw.data()[plane + y * w + x] as f64;
            let tx = x as f64 + fx;
            let ty = y as f64 + fy;
            if tx < 0.0 || tx > (w - 1) as f64 || ty < 0.0 || ty > (h - 1) as f64 {
                continue; // out-of-bounds target: masked out
            }
            let bx = sample_bw(tx, ty, 0);
            let by = sample_bw(tx, ty, 1);
            let err = ((fx + bx).powi(2) + (fy + by).powi(2)).sqrt();
            mask[y * w + x] = err <= threshold_px as f64;
        }
    }
    Ok(mask)
}

/// Reads a mask stored as a `[H, W]` tensor of 0/1 values.
pub fn mask_from_tensor(t: &Tensor<f32>) -> Result<PixelMask> {
    match *t.shape() {
        [_, _] => Ok(t.data().iter().map(|&v| v > 0.5).collect()),
        _ => Err(Error::dim("mask_from_tensor", format!("expected [H, W], got {:?}", t.shape()))),
    }
}

/// Stores a mask as a `[H, W]` tensor of 0/1 values.
pub fn mask_to_tensor(mask: &PixelMask, h: usize, w: usize) -> Result<Tensor<f32>> {
    if mask.len() != h * w {
        return Err(Error::dim("mask_to_tensor", format!("{} entries for {}x{}", mask.len(), h, w)));
    }
    Tensor::from_vec(vec![h, w], mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor<f32> {
        let mut data = vec![0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[c * h * w + y * w + x] = f(c, y, x);
                }
            }
        }
        Tensor::from_vec(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn psnr_identical_hits_sentinel() {
        let a = img(8, 8, |c, y, x| (c + y + x) as f32 * 0.01);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_SENTINEL_DB);
    }

    #[test]
    fn psnr_unit_difference_is_analytic() {
        let a = img(8, 8, |_, _, _| 0.5);
        let b = img(8, 8, |_, _, _| 0.5 + 1.0 / 255.0);
        let got = psnr(&a, &b, None).unwrap();
        let want = 20.0 * 255.0f64.log10();
        assert!((got - want).abs() < 1e-4, "{} vs {}", got, want);
    }

    #[test]
    fn psnr_symmetric_and_shift_invariant() {
        let a = img(6, 6, |c, y, x| (c * 13 + y * 5 + x) as f32 * 0.013);
        let b = img(6, 6, |c, y, x| (c * 7 + y * 3 + x * 2) as f32 * 0.011);
        assert_eq!(psnr(&a, &b, None).unwrap(), psnr(&b, &a, None).unwrap());
        let shift = |t: &Tensor<f32>| {
            Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|v| v + 0.125).collect()).unwrap()
        };
        // exact up to f32 storage rounding of the shifted values
        let d = (psnr(&a, &b, None).unwrap() - psnr(&shift(&a), &shift(&b), None).unwrap()).abs();
        assert!(d < 1e-4, "{}", d);
    }

    #[test]
    fn psnr_rejects_empty_mask() {
        let a = img(4, 4, |_, _, _| 0.5);
        let mask = vec![false; 16];
        assert!(psnr(&a, &a, Some(&mask)).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let a = img(16, 16, |c, y, x| ((c + 1) * (y + 2) * (x + 3)) as f32 % 17.0 / 17.0);
        let s = ssim(&a, &a, None).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{}", s);
    }

    #[test]
    fn ssim_anticorrelated_is_negative() {
        let a = img(16, 16, |_, y, x| ((y / 2 + x / 2) % 2) as f32);
        let b = img(16, 16, |_, y, x| 1.0 - ((y / 2 + x / 2) % 2) as f32);
        assert!(ssim(&a, &b, None).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = img(8, 8, |_, _, _| 0.5);
        assert!(ssim(&a, &a, None).is_err());
    }

    #[test]
    fn sid_identical_is_zero_and_symmetric() {
        let a = img(8, 8, |c, y, x| 0.1 + ((c + y * x) % 7) as f32 * 0.1);
        let b = img(8, 8, |c, y, x| 0.1 + ((c * 2 + y + x) % 5) as f32 * 0.15);
        let zero = sid_per_channel(&a, &a, None).unwrap();
        assert_eq!(zero, (0.0, 0.0, 0.0));
        let ab = sid_per_channel(&a, &b, None).unwrap();
        let ba = sid_per_channel(&b, &a, None).unwrap();
        assert!((ab.0 - ba.0).abs() < 1e-12);
        assert!((ab.1 - ba.1).abs() < 1e-12);
        assert!((ab.2 - ba.2).abs() < 1e-12);
    }

    #[test]
    fn sid_two_pixel_closed_form() {
        // p = (0.5, 0.5), q = (0.25, 0.75) in every channel:
        // SID = sum p ln(p/q) + sum q ln(q/p) = 0.25 * ln 3
        let a = img(1, 2, |_, _, x| if x == 0 { 0.5 } else { 0.5 });
        let b = img(1, 2, |_, _, x| if x == 0 { 0.25 } else { 0.75 });
        let want = 0.25 * 3.0f64.ln();
        let (blue, green, red) = sid_per_channel(&a, &b, None).unwrap();
        for got in [blue, green, red] {
            assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        }
    }

    #[test]
    fn sid_scale_invariant() {
        let a = img(6, 6, |c, y, x| 0.05 + ((c + 2 * y + 3 * x) % 11) as f32 * 0.03);
        let b = img(6, 6, |c, y, x| 0.05 + ((2 * c + y + x) % 9) as f32 * 0.04);
        // power-of-two factor: scaling is exact in f32 and cancels exactly
        let scaled = Tensor::from_vec(a.shape().to_vec(), a.data().iter().map(|v| v * 8.0).collect()).unwrap();
        let base = sid_per_channel(&a, &b, None).unwrap();
        let scl = sid_per_channel(&scaled, &b, None).unwrap();
        assert!((base.0 - scl.0).abs() < 1e-9);
        assert!((base.1 - scl.1).abs() < 1e-9);
        assert!((base.2 - scl.2).abs() < 1e-9);
    }

    #[test]
    fn sid_names_zero_channel() {
        let a = img(4, 4, |c, _, _| if c == 1 { 0.0 } else { 0.3 });
        let b = img(4, 4, |_, _, _| 0.3);
        let err = sid_per_channel(&a, &b, None).unwrap_err();
        assert!(err.to_string().contains("green"), "{}", err);
    }

    #[test]
    fn aggregate_mean_and_population_std() {
        let row = |id: &str, psnr: f64| ImageMetrics {
            id: id.into(),
            psnr_db: psnr,
            ssim: 0.9,
            sid_blue: 1e-5,
            sid_green: 2e-5,
            sid_red: 3e-5,
        };
        let single = aggregate(vec![row("a", 25.0)]).unwrap();
        assert_eq!(single.std, [0.0; 5]);
        let two = aggregate(vec![row("a", 20.0), row("b", 30.0)]).unwrap();
        assert_eq!(two.mean[0], 25.0);
        assert_eq!(two.std[0], 5.0);
        assert!(aggregate(vec![]).is_err());
    }

    #[test]
    fn occlusion_zero_flows_keep_everything() {
        let z = Tensor::zeros(vec![2, 6, 8]);
        let mask = occlusion_mask(&z, &z, 3.0).unwrap();
        assert!(mask.iter().all(|&k| k));
    }

    #[test]
    fn occlusion_uniform_five_px_masks_in_bounds() {
        let (h, w) = (6usize, 12usize);
        let mut fw = vec![0f32; 2 * h * w];
        for v in fw.iter_mut().take(h * w) {
            *v = 5.0; // +5 px horizontal
        }
        let fw = Tensor::from_vec(vec![2, h, w], fw).unwrap();
        let bw = Tensor::zeros(vec![2, h, w]);
        let mask = occlusion_mask(&fw, &bw, 3.0).unwrap();
        assert!(mask.iter().all(|&k| !k)); // error 5 > 3 everywhere in bounds
    }

    #[test]
    fn occlusion_exact_inverse_keeps_interior() {
        // contraction toward the centre: fw(p) = alpha (c - p);
        // exact inverse at p' = p + fw(p): bw(p') = (p - p')
        let (h, w) = (16usize, 16usize);
        let alpha = 0.25f64;
        let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
        let mut fw = vec![0f32; 2 * h * w];
        let mut bw = vec![0f32; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                fw[y * w + x] = (alpha * (cx - x as f64)) as f32;
                fw[h * w + y * w + x] = (alpha * (cy - y as f64)) as f32;
                // inverse field evaluated at grid points of the target frame
                let px = (x as f64 - alpha * cx) / (1.0 - alpha);
                let py = (y as f64 - alpha * cy) / (1.0 - alpha);
                bw[y * w + x] = (px - x as f64) as f32;
                bw[h * w + y * w + x] = (py - y as f64) as f32;
            }
        }
        let fw = Tensor::from_vec(vec![2, h, w], fw).unwrap();
        let bw = Tensor::from_vec(vec![2, h, w], bw).unwrap();
        let mask = occlusion_mask(&fw, &bw, 3.0).unwrap();
        assert!(mask.iter().all(|&k| k));
    }

    #[test]
    fn occlusion_infinite_threshold_masks_nothing_in_bounds() {
        let (h, w) = (8usize, 8usize);
        let mut fw = vec![0f32; 2 * h * w];
        for v in fw.iter_mut().take(h * w) {
            *v = 1.5;
        }
        let fw = Tensor::from_vec(vec![2, h, w], fw).unwrap();
        let bw = Tensor::zeros(vec![2, h, w]);
        let mask = occlusion_mask(&fw, &bw, f32::INFINITY).unwrap();
        for y in 0..h {
            for x in 0..w {
                let in_bounds = x as f64 + 1.5 <= (w - 1) as f64;
                assert_eq!(mask[y * w + x], in_bounds);
            }
        }
    }

    #[test]
    fn report_csv_and_table_shapes() {
        let report = aggregate(vec![ImageMetrics {
            id: "s0".into(),
            psnr_db: 24.5,
            ssim: 0.81,
            sid_blue: 5.3e-5,
            sid_green: 4.0e-5,
            sid_red: 4.6e-5,
        }])
        .unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 4); // header + 1 image + mean + std
        let table = report.to_table("baseline");
        assert!(table.contains("SID Blue"));
        assert!(table.contains("baseline"));
    }
}
