//! Snapshot mosaic filter-array geometry and the two network input
//! formations: zero-padded 16-channel tensors that keep every sub-pixel at
//! its true spatial location, and compact tensors that collapse each 4x4
//! block to a single 16-channel pixel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of the filter-array block.
pub const BLOCK: usize = 4;
/// Number of spectral bands (one per block cell).
pub const BANDS: usize = BLOCK * BLOCK;

/// Centre wavelengths of the sensor's 16 bands, ascending, in nanometres.
pub const WAVELENGTHS_NM: [f64; BANDS] = [
    477.2, 478.2, 489.5, 500.3, 510.9, 523.2, 537.9, 548.9, 553.0, 562.5, 577.3, 590.5, 599.9,
    612.9, 615.9, 617.5,
];

/// 4x4/16-band filter-array geometry: which band sits at which position
/// inside the repeating block, and each band's centre wavelength.
///
/// The sensor's physical band arrangement is not public; the default
/// assigns bands row-major by ascending wavelength (band 0 at (0,0)), and
/// alternative bijections can be configured.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicLayout {
    wavelengths_nm: [f64; BANDS],
    /// band -> (row, col) within the block
    position_of_band: [(usize, usize); BANDS],
    /// (row, col) flattened -> band
    band_at_position: [usize; BANDS],
}

impl MosaicLayout {
    /// Row-major-by-wavelength layout with the sensor's band table.
    pub fn standard() -> Self {
        let positions: Vec<(usize, usize)> = (0..BANDS).map(|b| (b / BLOCK, b % BLOCK)).collect();
        MosaicLayout::new(WAVELENGTHS_NM, positions.try_into().expect("16 positions"))
            .expect("standard layout is valid")
    }

    pub fn new(
        wavelengths_nm: [f64; BANDS],
        position_of_band: [(usize, usize); BANDS],
    ) -> Result<Self> {
        for pair in wavelengths_nm.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config(format!(
                    "wavelengths must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        let mut band_at_position = [usize::MAX; BANDS];
        for (band, &(r, s)) in position_of_band.iter().enumerate() {
            if r >= BLOCK || s >= BLOCK {
                return Err(Error::Config(format!(
                    "band {} position ({}, {}) outside the {}x{} block",
                    band, r, s, BLOCK, BLOCK
                )));
            }
            if band_at_position[r * BLOCK + s] != usize::MAX {
                return Err(Error::Config(format!(
                    "position ({}, {}) assigned to two bands",
                    r, s
                )));
            }
            band_at_position[r * BLOCK + s] = band;
        }
        Ok(MosaicLayout { wavelengths_nm, position_of_band, band_at_position })
    }

    pub fn wavelengths_nm(&self) -> &[f64; BANDS] {
        &self.wavelengths_nm
    }

    /// (row, col) of `band` within the 4x4 block.
    pub fn position_of_band(&self, band: usize) -> (usize, usize) {
        self.position_of_band[band]
    }

    /// Band whose filter sits at in-block position (row, col).
    pub fn band_at(&self, row: usize, col: usize) -> usize {
        self.band_at_position[(row % BLOCK) * BLOCK + (col % BLOCK)]
    }
}

/// Single-plane sensor image; dimensions are multiples of the block size
/// and intensities are normalized to `[0, 1]` at ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMosaic {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RawMosaic {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height % BLOCK != 0 || width % BLOCK != 0 {
            return Err(Error::dim(
                "RawMosaic",
                format!("dims {}x{} must be multiples of {}", height, width, BLOCK),
            ));
        }
        if data.len() != height * width {
            return Err(Error::dim(
                "RawMosaic",
                format!("{}x{} needs {} samples, got {}", height, width, height * width, data.len()),
            ));
        }
        Ok(RawMosaic { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        RawMosaic::new(height, width, vec![0.0; height * width])
    }
}

/// Expands a raw mosaic into the zero-padded 16-channel formation:
/// channel `c` carries the raw value at every pixel whose in-block
/// position is `position_of_band(c)` and zero elsewhere, so each pixel has
/// at most one nonzero channel and the channel sum reproduces the raw
/// image exactly.
pub fn demux_zero_padded(raw: &RawMosaic, layout: &MosaicLayout) -> Tensor<f32> {
    let (h, w) = (raw.height, raw.width);
    let plane = h * w;
    let mut out = vec![0f32; BANDS * plane];
    for y in 0..h {
        for x in 0..w {
            let band = layout.band_at(y, x);
            out[band * plane + y * w + x] = raw.data[y * w + x];
        }
    }
    Tensor::from_vec(vec![BANDS, h, w], out).expect("sized buffer")
}

/// Collapses a zero-padded tensor back to the raw mosaic by reading, at
/// each pixel, the one channel the layout permits there. Exact inverse of
/// [`demux_zero_padded`]; channels that the layout forbids at a pixel are
/// ignored.
pub fn remux(t: &Tensor<f32>, layout: &MosaicLayout) -> Result<RawMosaic> {
    let (h, w) = match *t.shape() {
        [BANDS, h, w] => (h, w),
        _ => {
            return Err(Error::dim(
                "remux",
                format!("expected [{}, H, W] tensor, got {:?}", BANDS, t.shape()),
            ))
        }
    };
    let plane = h * w;
    let mut data = vec![0f32; plane];
    for y in 0..h {
        for x in 0..w {
            let band = layout.band_at(y, x);
            data[y * w + x] = t.data()[band * plane + y * w + x];
        }
    }
    RawMosaic::new(h, w, data)
}

/// Compact formation: each 4x4 block becomes one 16-channel pixel, so a
/// raw `H x W` mosaic yields `[16, H/4, W/4]`. Discards the sub-pixel
/// spatial offsets that the zero-padded formation keeps.
pub fn demux_compact(raw: &RawMosaic, layout: &MosaicLayout) -> Tensor<f32> {
    let (bh, bw) = (raw.height / BLOCK, raw.width / BLOCK);
    let plane = bh * bw;
    let mut out = vec![0f32; BANDS * plane];
    for band in 0..BANDS {
        let (r, s) = layout.position_of_band(band);
        for by in 0..bh {
            for bx in 0..bw {
                out[band * plane + by * bw + bx] =
                    raw.data[(by * BLOCK + r) * raw.width + bx * BLOCK + s];
            }
        }
    }
    Tensor::from_vec(vec![BANDS, bh, bw], out).expect("sized buffer")
}

/// Compact formation extracted from an already zero-padded tensor:
/// `out[c][i][j] = zp[c][4i + r][4j + s]` with `(r, s)` the band's block
/// position. Matches `demux_compact(remux(zp))` for layout-valid tensors.
pub fn compact_from_zero_padded(zp: &Tensor<f32>, layout: &MosaicLayout) -> Result<Tensor<f32>> {
    let (h, w) = match *zp.shape() {
        [BANDS, h, w] => (h, w),
        _ => {
            return Err(Error::dim(
                "compact_from_zero_padded",
                format!("expected [{}, H, W] tensor, got {:?}", BANDS, zp.shape()),
            ))
        }
    };
    if h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::dim(
            "compact_from_zero_padded",
            format!("dims {}x{} must be multiples of {}", h, w, BLOCK),
        ));
    }
    let (bh, bw) = (h / BLOCK, w / BLOCK);
    let plane = h * w;
    let bplane = bh * bw;
    let mut out = vec![0f32; BANDS * bplane];
    for band in 0..BANDS {
        let (r, s) = layout.position_of_band(band);
        for by in 0..bh {
            for bx in 0..bw {
                out[band * bplane + by * bw + bx] =
                    zp.data()[band * plane + (by * BLOCK + r) * w + bx * BLOCK + s];
            }
        }
    }
    Tensor::from_vec(vec![BANDS, bh, bw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_raw(h: usize, w: usize) -> RawMosaic {
        RawMosaic::new(h, w, (0..h * w).map(|v| (v as f32 * 0.37) % 1.0).collect()).unwrap()
    }

    #[test]
    fn layout_positions_are_a_bijection() {
        let layout = MosaicLayout::standard();
        let mut seen = [false; BANDS];
        for b in 0..BANDS {
            let (r, s) = layout.position_of_band(b);
            assert!(!seen[r * BLOCK + s]);
            seen[r * BLOCK + s] = true;
            assert_eq!(layout.band_at(r, s), b);
        }
    }

    #[test]
    fn layout_rejects_duplicate_positions() {
        let mut positions: Vec<(usize, usize)> = (0..BANDS).map(|b| (b / 4, b % 4)).collect();
        positions[5] = positions[3];
        assert!(MosaicLayout::new(WAVELENGTHS_NM, positions.try_into().unwrap()).is_err());
    }

    #[test]
    fn raw_mosaic_rejects_non_block_dims() {
        assert!(RawMosaic::new(6, 8, vec![0.0; 48]).is_err());
        assert!(RawMosaic::new(8, 8, vec![0.0; 64]).is_ok());
    }

    #[test]
    fn single_block_demux_has_one_nonzero_per_channel() {
        let layout = MosaicLayout::standard();
        let raw = RawMosaic::new(4, 4, (1..=16).map(|v| v as f32 / 16.0).collect()).unwrap();
        let t = demux_zero_padded(&raw, &layout);
        assert_eq!(t.shape(), [16, 4, 4]);
        let nonzeros = t.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzeros, 16);
        for band in 0..BANDS {
            let plane = &t.data()[band * 16..(band + 1) * 16];
            assert_eq!(plane.iter().filter(|&&v| v != 0.0).count(), 1);
            let (r, s) = layout.position_of_band(band);
            assert_eq!(plane[r * 4 + s], raw.data[r * 4 + s]);
        }
    }

    #[test]
    fn all_zero_raw_demuxes_to_zero() {
        let layout = MosaicLayout::standard();
        let t = demux_zero_padded(&RawMosaic::zeros(8, 8).unwrap(), &layout);
        assert!(t.data().iter().all(|&v| v == 0.0));
        let back = remux(&t, &layout).unwrap();
        assert!(back.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_sum_equals_raw_exactly() {
        let layout = MosaicLayout::standard();
        let raw = ramp_raw(8, 12);
        let t = demux_zero_padded(&raw, &layout);
        let plane = raw.height * raw.width;
        for p in 0..plane {
            let sum: f32 = (0..BANDS).map(|b| t.data()[b * plane + p]).sum();
            assert_eq!(sum, raw.data[p]);
        }
    }

    #[test]
    fn compact_matches_strided_zero_padded() {
        let layout = MosaicLayout::standard();
        let raw = ramp_raw(8, 16);
        let zp = demux_zero_padded(&raw, &layout);
        let compact = demux_compact(&raw, &layout);
        assert_eq!(compact.shape(), [16, 2, 4]);
        let (h, w) = (raw.height, raw.width);
        let (bh, bw) = (h / 4, w / 4);
        for band in 0..BANDS {
            let (r, s) = layout.position_of_band(band);
            for by in 0..bh {
                for bx in 0..bw {
                    let zp_val = zp.data()[band * h * w + (4 * by + r) * w + 4 * bx + s];
                    let c_val = compact.data()[band * bh * bw + by * bw + bx];
                    assert_eq!(zp_val, c_val);
                }
            }
        }
    }

    #[test]
    fn compact_from_zero_padded_matches_direct() {
        let layout = MosaicLayout::standard();
        let raw = ramp_raw(8, 12);
        let zp = demux_zero_padded(&raw, &layout);
        let via_zp = compact_from_zero_padded(&zp, &layout).unwrap();
        let direct = demux_compact(&raw, &layout);
        assert_eq!(via_zp.shape(), direct.shape());
        assert_eq!(via_zp.data(), direct.data());
    }

    #[test]
    fn compact_of_constant_raw_is_constant() {
        let layout = MosaicLayout::standard();
        let raw = RawMosaic::new(4, 4, vec![0.625; 16]).unwrap();
        let compact = demux_compact(&raw, &layout);
        assert_eq!(compact.shape(), [16, 1, 1]);
        assert!(compact.data().iter().all(|&v| v == 0.625));
    }
}
