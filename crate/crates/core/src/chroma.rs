//! Colour machinery: the CIE colour-matching table, bicubic resampling,
//! spectral-to-RGB mapping for the camera's 16 bands, and the
//! conventional "upsample then colour-match" baseline built from them.
//!
//! One colour convention is used everywhere: tristimulus values are
//! normalized so a flat spectrum of amplitude 1 over the table's grid maps
//! to Y = 1, then converted through the sRGB (D65) primaries, clamped to
//! `[0, 1]`, and display-encoded with gamma 1/2.2. The camera's bands
//! cover only 477-618 nm, so spectra with blue or deep-red energy lose it
//! in the 16-band path by construction.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mosaic::{self, MosaicLayout, RawMosaic, BANDS};
use crate::tensor::Tensor;

/// Display gamma applied after clamping linear RGB.
pub const GAMMA: f64 = 1.0 / 2.2;

/// XYZ -> linear sRGB (D65 white point).
pub const XYZ_TO_SRGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const BUILTIN_CMF: &str = include_str!("../data/cie_1931_2deg_5nm.txt");

/// CIE 1931 2-degree observer weights on a dense wavelength grid, plus the
/// fixed XYZ -> RGB primaries.
#[derive(Debug, Clone)]
pub struct CmfTable {
    wavelengths_nm: Vec<f64>,
    xbar: Vec<f64>,
    ybar: Vec<f64>,
    zbar: Vec<f64>,
    pub rgb_matrix: [[f64; 3]; 3],
    /// 1 / integral of ybar over the grid: flat spectrum 1 -> Y = 1.
    luma_norm: f64,
}

impl CmfTable {
    /// The versioned table shipped with the crate (400-700 nm, 5 nm step).
    pub fn builtin() -> Self {
        CmfTable::parse(BUILTIN_CMF, "builtin cie_1931_2deg_5nm.txt")
            .expect("builtin CMF table is well-formed")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        CmfTable::parse(&text, &path.display().to_string())
    }

    /// Parses `lambda xbar ybar zbar` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let bad = |msg: String| Error::Parse { path: origin.to_string(), msg };
        let mut wavelengths_nm = Vec::new();
        let mut xbar = Vec::new();
        let mut ybar = Vec::new();
        let mut zbar = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<f64> = line
                .split_ascii_whitespace()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {}", lineno + 1, e)))?;
            if fields.len() != 4 {
                return Err(bad(format!("line {}: expected 4 columns, got {}", lineno + 1, fields.len())));
            }
            wavelengths_nm.push(fields[0]);
            xbar.push(fields[1]);
            ybar.push(fields[2]);
            zbar.push(fields[3]);
        }
        if wavelengths_nm.len() < 2 {
            return Err(bad("table needs at least two rows".into()));
        }
        for pair in wavelengths_nm.windows(2) {
            if pair[1] <= pair[0] {
                return Err(bad(format!("grid not strictly increasing at {} nm", pair[1])));
            }
        }
        if ybar.iter().any(|&v| v < 0.0) {
            return Err(bad("ybar must be non-negative".into()));
        }
        let mut table = CmfTable {
            wavelengths_nm,
            xbar,
            ybar,
            zbar,
            rgb_matrix: XYZ_TO_SRGB,
            luma_norm: 1.0,
        };
        let y_integral: f64 = (0..table.wavelengths_nm.len())
            .map(|i| table.ybar[i] * table.grid_weight(i))
            .sum();
        table.luma_norm = 1.0 / y_integral;
        Ok(table)
    }

    pub fn grid(&self) -> &[f64] {
        &self.wavelengths_nm
    }

    /// Trapezoidal quadrature weight of grid point `i`.
    fn grid_weight(&self, i: usize) -> f64 {
        let g = &self.wavelengths_nm;
        let last = g.len() - 1;
        match i {
            0 => (g[1] - g[0]) / 2.0,
            i if i == last => (g[last] - g[last - 1]) / 2.0,
            i => (g[i + 1] - g[i - 1]) / 2.0,
        }
    }

    /// Observer weights at `lambda` by linear interpolation. Errors when
    /// `lambda` falls outside the grid.
    pub fn sample(&self, lambda_nm: f64) -> Result<[f64; 3]> {
        let g = &self.wavelengths_nm;
        if lambda_nm < g[0] || lambda_nm > g[g.len() - 1] {
            return Err(Error::Config(format!(
                "wavelength {} nm outside CMF grid [{}, {}]",
                lambda_nm,
                g[0],
                g[g.len() - 1]
            )));
        }
        let hi = g.partition_point(|&w| w < lambda_nm).min(g.len() - 1).max(1);
        let lo = hi - 1;
        let t = (lambda_nm - g[lo]) / (g[hi] - g[lo]);
        Ok([
            self.xbar[lo] + t * (self.xbar[hi] - self.xbar[lo]),
            self.ybar[lo] + t * (self.ybar[hi] - self.ybar[lo]),
            self.zbar[lo] + t * (self.zbar[hi] - self.zbar[lo]),
        ])
    }

    /// Normalized tristimulus of a spectrum sampled on this table's grid
    /// (dense trapezoidal integration).
    pub fn xyz_from_spectrum(&self, spectrum: &[f64]) -> Result<[f64; 3]> {
        if spectrum.len() != self.wavelengths_nm.len() {
            return Err(Error::dim(
                "xyz_from_spectrum",
                format!("spectrum has {} samples, grid has {}", spectrum.len(), self.wavelengths_nm.len()),
            ));
        }
        let mut xyz = [0.0f64; 3];
        for i in 0..spectrum.len() {
            let w = self.grid_weight(i) * spectrum[i];
            xyz[0] += w * self.xbar[i];
            xyz[1] += w * self.ybar[i];
            xyz[2] += w * self.zbar[i];
        }
        Ok([
            xyz[0] * self.luma_norm,
            xyz[1] * self.luma_norm,
            xyz[2] * self.luma_norm,
        ])
    }

    /// Linear RGB from normalized XYZ (no clamp, no gamma).
    pub fn linear_rgb(&self, xyz: [f64; 3]) -> [f64; 3] {
        let m = &self.rgb_matrix;
        [
            m[0][0] * xyz[0] + m[0][1] * xyz[1] + m[0][2] * xyz[2],
            m[1][0] * xyz[0] + m[1][1] * xyz[1] + m[1][2] * xyz[2],
            m[2][0] * xyz[0] + m[2][1] * xyz[1] + m[2][2] * xyz[2],
        ]
    }

    /// Display encoding: clamp linear RGB to `[0, 1]`, then gamma 1/2.2.
    pub fn encode(&self, linear: [f64; 3]) -> [f32; 3] {
        let mut out = [0f32; 3];
        for c in 0..3 {
            out[c] = linear[c].clamp(0.0, 1.0).powf(GAMMA) as f32;
        }
        out
    }

    /// Per-band trapezoidal quadrature weights for the camera wavelengths.
    pub fn band_weights(wavelengths: &[f64; BANDS]) -> [f64; BANDS] {
        let mut w = [0.0f64; BANDS];
        w[0] = (wavelengths[1] - wavelengths[0]) / 2.0;
        w[BANDS - 1] = (wavelengths[BANDS - 1] - wavelengths[BANDS - 2]) / 2.0;
        for i in 1..BANDS - 1 {
            w[i] = (wavelengths[i + 1] - wavelengths[i - 1]) / 2.0;
        }
        w
    }

    /// Normalization constant mapping integrated luminance to Y.
    pub fn luma_norm(&self) -> f64 {
        self.luma_norm
    }
}

/// Catmull-Rom weight (the a = -0.5 cubic kernel).
fn catmull_rom(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Per-output-coordinate taps of a 1-D Catmull-Rom resample with
/// centre-aligned sampling and edge clamping.
fn cubic_taps(in_dim: usize, out_dim: usize, factor: f64) -> Vec<([usize; 4], [f64; 4])> {
    (0..out_dim)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut wt = [0f64; 4];
            for k in 0..4 {
                let m = base as isize + k as isize - 1;
                idx[k] = m.clamp(0, in_dim as isize - 1) as usize;
                wt[k] = catmull_rom(frac - (k as f64 - 1.0));
            }
            (idx, wt)
        })
        .collect()
}

/// Catmull-Rom bicubic upsampling of a `[C, h, w]` tensor by an integer
/// factor, edge-clamped. Factor 1 is the identity.
pub fn bicubic_upsample(x: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::dim("bicubic_upsample", format!("expected [C, h, w], got {:?}", x.shape()))),
    };
    if factor < 1 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let col_taps = cubic_taps(w, ow, factor as f64);
    let row_taps = cubic_taps(h, oh, factor as f64);

    // horizontal pass: [C, h, w] -> [C, h, ow]
    let mut mid = vec![0f64; c * h * ow];
    for ci in 0..c {
        for y in 0..h {
            let row = &x.data()[(ci * h + y) * w..][..w];
            let out_row = &mut mid[(ci * h + y) * ow..][..ow];
            for (o, (idx, wt)) in col_taps.iter().enumerate() {
                out_row[o] = (0..4).map(|k| wt[k] * row[idx[k]] as f64).sum();
            }
        }
    }
    // vertical pass: [C, h, ow] -> [C, oh, ow]
    let mut out = vec![0f32; c * oh * ow];
    for ci in 0..c {
        for (oy, (idx, wt)) in row_taps.iter().enumerate() {
            for ox in 0..ow {
                let v: f64 = (0..4)
                    .map(|k| wt[k] * mid[(ci * h + idx[k]) * ow + ox])
                    .sum();
                out[(ci * oh + oy) * ow + ox] = v as f32;
            }
        }
    }
    Tensor::from_vec(vec![c, oh, ow], out)
}

/// Per-pixel spectral-to-RGB mapping of a 16-band image through the
/// observer table: `XYZ = norm * sum_c ms[c] * cmf(lambda_c) * dlambda_c`
/// with trapezoidal band weights, then matrix, clamp, and gamma.
pub fn cmf_map(ms: &Tensor<f32>, layout: &MosaicLayout, cmf: &CmfTable) -> Result<Tensor<f32>> {
    let linear = cmf_map_linear(ms, layout, cmf)?;
    let plane = linear.numel() / 3;
    let mut out = vec![0f32; linear.numel()];
    for p in 0..plane {
        let rgb = cmf.encode([
            linear.data()[p] as f64,
            linear.data()[plane + p] as f64,
            linear.data()[2 * plane + p] as f64,
        ]);
        out[p] = rgb[0];
        out[plane + p] = rgb[1];
        out[2 * plane + p] = rgb[2];
    }
    Tensor::from_vec(linear.shape().to_vec(), out)
}

/// The linear stage of [`cmf_map`] (before clamp and gamma); linear in the
/// spectral input.
pub fn cmf_map_linear(ms: &Tensor<f32>, layout: &MosaicLayout, cmf: &CmfTable) -> Result<Tensor<f32>> {
    let (bands, h, w) = match *ms.shape() {
        [bands, h, w] => (bands, h, w),
        _ => return Err(Error::dim("cmf_map", format!("expected [16, H, W], got {:?}", ms.shape()))),
    };
    if bands != BANDS {
        return Err(Error::dim("cmf_map", format!("expected {} bands, got {}", BANDS, bands)));
    }
    let weights = CmfTable::band_weights(layout.wavelengths_nm());
    // cmf(lambda_c) * dlambda_c * luma_norm, folded per band
    let mut band_xyz = [[0f64; 3]; BANDS];
    for (b, xyz) in band_xyz.iter_mut().enumerate() {
        let s = cmf.sample(layout.wavelengths_nm()[b])?;
        for c in 0..3 {
            xyz[c] = s[c] * weights[b] * cmf.luma_norm();
        }
    }
    let plane = h * w;
    let mut out = vec![0f32; 3 * plane];
    for p in 0..plane {
        let mut xyz = [0f64; 3];
        for (b, bx) in band_xyz.iter().enumerate() {
            let v = ms.data()[b * plane + p] as f64;
            xyz[0] += v * bx[0];
            xyz[1] += v * bx[1];
            xyz[2] += v * bx[2];
        }
        let rgb = cmf.linear_rgb(xyz);
        out[p] = rgb[0] as f32;
        out[plane + p] = rgb[1] as f32;
        out[2 * plane + p] = rgb[2] as f32;
    }
    Tensor::from_vec(vec![3, h, w], out)
}

/// The conventional method: compact demux, x4 bicubic upsample of every
/// band, then colour matching. Output is RGB at the raw mosaic's
/// resolution.
pub fn baseline_pipeline(raw: &RawMosaic, layout: &MosaicLayout, cmf: &CmfTable) -> Result<Tensor<f32>> {
    let compact = mosaic::demux_compact(raw, layout);
    let up = bicubic_upsample(&compact, mosaic::BLOCK)?;
    cmf_map(&up, layout, cmf)
}

/// Maps each channel affinely onto `[0, 255]`. A degenerate channel
/// (max == min) maps to zeros and is flagged in the returned array.
pub fn white_balance(img: &Tensor<f32>) -> Result<(Tensor<f32>, [bool; 3])> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] if c == 3 => (c, h, w),
        _ => return Err(Error::dim("white_balance", format!("expected [3, H, W], got {:?}", img.shape()))),
    };
    let plane = h * w;
    let mut out = vec![0f32; img.numel()];
    let mut degenerate = [false; 3];
    for ch in 0..c {
        let chan = &img.data()[ch * plane..][..plane];
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in chan {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            // f64 so the channel extremes land exactly on 0 and 255
            let (lo64, hi64) = (lo as f64, hi as f64);
            for (o, &v) in out[ch * plane..][..plane].iter_mut().zip(chan) {
                *o = ((v as f64 - lo64) * 255.0 / (hi64 - lo64)) as f32;
            }
        } else {
            degenerate[ch] = true;
        }
    }
    Ok((Tensor::from_vec(img.shape().to_vec(), out)?, degenerate))
}
