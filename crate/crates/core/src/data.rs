//! Synthetic paired-dataset generation, dataset splits, and the training
//! augmentation pipeline.
//!
//! A scene is a low-dimensional radiance field: a sum of smooth spatial
//! envelopes, each tied to a spectral signature (a mixture of Gaussians
//! over the 400-700 nm grid), modulated by band-limited texture noise.
//! The RGB ground truth integrates the radiance densely through the
//! colour-matching table; the raw mosaic samples it through each band's
//! Gaussian response at the band's block position. Everything is
//! deterministic in the scene seed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::chroma::CmfTable;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::PixelMask;
use crate::mosaic::{MosaicLayout, RawMosaic, BANDS, BLOCK};
use crate::tensor::Tensor;

/// Parameters of one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// divisible by 4
    pub height: usize,
    /// divisible by 4
    pub width: usize,
    /// Spatial envelope count; 0 yields a black scene.
    pub num_patches: usize,
    /// Full width at half maximum of each band's spectral response.
    pub band_fwhm_nm: f64,
    /// Wavelength range the patch spectra are drawn from. The default
    /// spans most of the visible grid; narrowing it to the camera's
    /// coverage isolates spatial from chromatic error.
    pub spectral_range_nm: (f64, f64),
    /// Width (sigma) range of the spectral Gaussians in nanometres.
    pub spectral_width_nm: (f64, f64),
    /// Spatially uniform envelopes with no texture noise (verification
    /// scenes isolating the chromatic mapping). A flat and a textured
    /// scene with the same seed share identical spectra.
    pub flat: bool,
}

impl SceneSpec {
    pub fn new(seed: u64, height: usize, width: usize) -> Result<Self> {
        if height % BLOCK != 0 || width % BLOCK != 0 {
            return Err(Error::dim(
                "SceneSpec",
                format!("dims {}x{} must be multiples of {}", height, width, BLOCK),
            ));
        }
        Ok(SceneSpec {
            seed,
            height,
            width,
            num_patches: 6,
            band_fwhm_nm: 15.0,
            spectral_range_nm: (420.0, 680.0),
            spectral_width_nm: (20.0, 80.0),
            flat: false,
        })
    }

    pub fn with_patches(mut self, n: usize) -> Self {
        self.num_patches = n;
        self
    }

    pub fn with_spectral_range(mut self, lo_nm: f64, hi_nm: f64) -> Self {
        self.spectral_range_nm = (lo_nm, hi_nm);
        self
    }

    pub fn with_spectral_width(mut self, lo_nm: f64, hi_nm: f64) -> Self {
        self.spectral_width_nm = (lo_nm, hi_nm);
        self
    }

    pub fn flat(mut self) -> Self {
        self.flat = true;
        self
    }
}

/// One paired sample: the raw mosaic input and the RGB ground truth at
/// the same extent, with an optional validity mask.
#[derive(Debug, Clone)]
pub struct DatasetSample {
    pub raw: RawMosaic,
    pub hr_rgb: Tensor<f32>,
    pub mask: Option<PixelMask>,
    pub id: String,
}

struct Patch {
    amp: f64,
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    /// normalized tristimulus of the patch spectrum
    xyz: [f64; 3],
    /// per-band response of the patch spectrum
    band: [f64; BANDS],
}

/// Band-limited cosine mixture normalized to `[-1, 1]`.
struct TextureNoise {
    terms: Vec<(f64, f64, f64, f64)>, // (coef, fx, fy, phase)
}

impl TextureNoise {
    fn sample(rng: &mut ChaCha20Rng, enabled: bool) -> Self {
        if !enabled {
            return TextureNoise { terms: Vec::new() };
        }
        let n = 6;
        let mut terms = Vec::with_capacity(n);
        let mut total = 0.0;
        for _ in 0..n {
            let c: f64 = rng.random_range(0.2..1.0);
            // wavelengths down to 4 px: structure below the mosaic block
            // size that the compact formation cannot represent
            let fx = rng.random_range(-0.25..0.25);
            let fy = rng.random_range(-0.25..0.25);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            total += c;
            terms.push((c, fx, fy, phase));
        }
        for t in terms.iter_mut() {
            t.0 /= total;
        }
        TextureNoise { terms }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(c, fx, fy, p)| c * (std::f64::consts::TAU * (fx * x + fy * y) + p).cos())
            .sum()
    }
}

/// Gaussian band response weights over the CMF grid, normalized to sum 1,
/// so a flat spectrum of value v reads back as v.
fn band_response(cmf: &CmfTable, centre_nm: f64, fwhm_nm: f64) -> Vec<f64> {
    let sigma = fwhm_nm / (2.0 * (2.0 * 2.0f64.ln()).sqrt());
    let mut w: Vec<f64> = cmf
        .grid()
        .iter()
        .map(|&l| (-((l - centre_nm) * (l - centre_nm)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Generates one paired sample. Deterministic in `spec.seed`; a zero-patch
/// spec yields black images.
pub fn generate_scene(spec: &SceneSpec, layout: &MosaicLayout, cmf: &CmfTable) -> Result<DatasetSample> {
    if spec.height % BLOCK != 0 || spec.width % BLOCK != 0 {
        return Err(Error::dim(
            "generate_scene",
            format!("dims {}x{} must be multiples of {}", spec.height, spec.width, BLOCK),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let grid_len = cmf.grid().len();
    let grid_lo = cmf.grid()[0];
    let grid_hi = cmf.grid()[grid_len - 1];
    let centre_lo = spec.spectral_range_nm.0.max(grid_lo);
    let centre_hi = spec.spectral_range_nm.1.min(grid_hi);
    if centre_lo >= centre_hi {
        return Err(Error::Config(format!(
            "spectral range [{}, {}] does not intersect the CMF grid",
            spec.spectral_range_nm.0, spec.spectral_range_nm.1
        )));
    }

    // Per-band Gaussian responses at the layout's wavelengths.
    let responses: Vec<Vec<f64>> = (0..BANDS)
        .map(|b| band_response(cmf, layout.wavelengths_nm()[b], spec.band_fwhm_nm))
        .collect();

    let mut patches = Vec::with_capacity(spec.num_patches);
    for _ in 0..spec.num_patches {
        // spectral signature: 2-4 Gaussians over the grid
        let modes = rng.random_range(2..=4usize);
        let mut gaussians = Vec::with_capacity(modes);
        for _ in 0..modes {
            let centre = rng.random_range(centre_lo..centre_hi);
            let width = rng.random_range(spec.spectral_width_nm.0..spec.spectral_width_nm.1);
            let amp = rng.random_range(0.2..1.0f64);
            gaussians.push((centre, width, amp));
        }
        let mut spectrum: Vec<f64> = cmf
            .grid()
            .iter()
            .map(|&l| {
                gaussians
                    .iter()
                    .map(|&(c, wdt, a)| a * (-((l - c) * (l - c)) / (2.0 * wdt * wdt)).exp())
                    .sum()
            })
            .collect();
        // unit peak: the patch amplitude alone sets the radiance level
        let peak = spectrum.iter().cloned().fold(f64::MIN, f64::max).max(1e-9);
        for v in spectrum.iter_mut() {
            *v /= peak;
        }
        let xyz = cmf.xyz_from_spectrum(&spectrum)?;
        let mut band = [0f64; BANDS];
        for (b, resp) in responses.iter().enumerate() {
            band[b] = resp.iter().zip(&spectrum).map(|(r, s)| r * s).sum();
        }
        let amp = rng.random_range(0.25..0.9f64);
        // spatial draws happen unconditionally so a flat scene shares its
        // spectra with the textured scene of the same seed
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let sx = rng.random_range(w as f64 / 8.0..w as f64 / 2.0);
        let sy = rng.random_range(h as f64 / 8.0..h as f64 / 2.0);
        patches.push(Patch { amp, cx, cy, sx, sy, xyz, band });
    }
    // Keep the summed radiance below ~0.8 so the (1 + 0.3n) texture gain
    // rarely clips the sensor. The envelope sum is bounded by the
    // amplitude sum.
    let amp_total: f64 = patches.iter().map(|p| p.amp).sum();
    if amp_total > 0.8 {
        let scale = 0.8 / amp_total;
        for p in patches.iter_mut() {
            p.amp *= scale;
        }
    }
    let noise = TextureNoise::sample(&mut rng, !spec.flat);

    // Textured envelopes ride on an ambient pedestal: scenes keep a
    // radiance floor (no near-black regions) and stay at a brightness
    // comparable to their flat counterpart.
    const PEDESTAL: f64 = 0.6;
    let envelope = |p: &Patch, x: f64, y: f64| -> f64 {
        if spec.flat {
            p.amp
        } else {
            let dx = (x - p.cx) / p.sx;
            let dy = (y - p.cy) / p.sy;
            p.amp * (PEDESTAL + (1.0 - PEDESTAL) * (-(dx * dx + dy * dy) / 2.0).exp())
        }
    };

    let plane = h * w;
    let mut raw = vec![0f32; plane];
    let mut rgb = vec![0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let gain = 1.0 + 0.3 * noise.at(x as f64, y as f64);
            let band = layout.band_at(y, x);
            let mut xyz = [0f64; 3];
            let mut sensor = 0f64;
            for p in &patches {
                let e = envelope(p, x as f64, y as f64);
                xyz[0] += e * p.xyz[0];
                xyz[1] += e * p.xyz[1];
                xyz[2] += e * p.xyz[2];
                sensor += e * p.band[band];
            }
            raw[y * w + x] = ((sensor * gain) as f32).clamp(0.0, 1.0);
            let enc = cmf.encode(cmf.linear_rgb([xyz[0] * gain, xyz[1] * gain, xyz[2] * gain]));
            rgb[y * w + x] = enc[0];
            rgb[plane + y * w + x] = enc[1];
            rgb[2 * plane + y * w + x] = enc[2];
        }
    }
    Ok(DatasetSample {
        raw: RawMosaic::new(h, w, raw)?,
        hr_rgb: Tensor::from_vec(vec![3, h, w], rgb)?,
        mask: None,
        id: format!("scene_{:016x}", spec.seed),
    })
}

/// sample index lists of a train/val/test partition
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `0..n` into train/val/test with the 250/25/21-of-296
/// proportions (each at least one sample), deterministically in `seed`.
pub fn make_split(n: usize, seed: u64) -> Result<SplitIndices> {
    if n < 3 {
        return Err(Error::Config(format!("split needs at least 3 samples, got {}", n)));
    }
    let val = ((n as f64 * 25.0 / 296.0).round() as usize).max(1);
    let test = ((n as f64 * 21.0 / 296.0).round() as usize).max(1);
    let train = n - val - test;
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(SplitIndices {
        train: order[..train].to_vec(),
        val: order[train..train + val].to_vec(),
        test: order[train + val..].to_vec(),
    })
}

/// Quarter-turn count applied clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

/// One concrete augmentation: aligned crop, rotation, horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    /// crop origin, multiples of 4
    pub oy: usize,
    pub ox: usize,
    /// square crop side, multiple of 4
    pub crop: usize,
    pub rot: Rotation,
    pub hflip: bool,
}

impl Transform {
    pub fn identity_crop(crop: usize) -> Self {
        Transform { oy: 0, ox: 0, crop, rot: Rotation::R0, hflip: false }
    }
}

fn crop_chw(t: &Tensor<f32>, oy: usize, ox: usize, size: usize) -> Tensor<f32> {
    let (c, _h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        _ => unreachable!("callers validate rank"),
    };
    let mut out = vec![0f32; c * size * size];
    for ci in 0..c {
        for y in 0..size {
            let src = ci * t.shape()[1] * w + (oy + y) * w + ox;
            let dst = ci * size * size + y * size;
            out[dst..dst + size].copy_from_slice(&t.data()[src..src + size]);
        }
    }
    Tensor::from_vec(vec![c, size, size], out).expect("sized buffer")
}

/// Square-image spatial transform per channel (rotation then flip).
fn spatial_transform(t: &Tensor<f32>, rot: Rotation, hflip: bool) -> Tensor<f32> {
    let (c, n) = (t.shape()[0], t.shape()[1]);
    debug_assert_eq!(t.shape()[1], t.shape()[2]);
    let mut out = vec![0f32; t.numel()];
    for ci in 0..c {
        let src = &t.data()[ci * n * n..][..n * n];
        let dst = &mut out[ci * n * n..][..n * n];
        for y in 0..n {
            for x in 0..n {
                // rotate first, then flip: trace the output coordinate
                // back through the flip, then through the rotation
                let (fy, fx) = if hflip { (y, n - 1 - x) } else { (y, x) };
                let (sy, sx) = match rot {
                    Rotation::R0 => (fy, fx),
                    // rotated[i][j] = in[n-1-j][i]
                    Rotation::R90 => (n - 1 - fx, fy),
                    Rotation::R180 => (n - 1 - fy, n - 1 - fx),
                    // rotated[i][j] = in[j][n-1-i]
                    Rotation::R270 => (fx, n - 1 - fy),
                };
                dst[y * n + x] = src[sy * n + sx];
            }
        }
    }
    Tensor::from_vec(t.shape().to_vec(), out).expect("sized buffer")
}

/// In-block phase of a position after the transform (for the induced band
/// permutation). Valid because crops and dims are multiples of 4.
fn phase_map(rot: Rotation, hflip: bool, pos: (usize, usize)) -> (usize, usize) {
    let m = BLOCK - 1;
    let (r, s) = pos;
    let rotated = match rot {
        Rotation::R0 => (r, s),
        Rotation::R90 => (s, m - r),
        Rotation::R180 => (m - r, m - s),
        Rotation::R270 => (m - s, r),
    };
    if hflip {
        (rotated.0, m - rotated.1)
    } else {
        rotated
    }
}

/// Applies one concrete augmentation to a zero-padded input and its RGB
/// target. The crop is phase-aligned, and rotations/flips additionally
/// permute the band channels so the layout invariant (each pixel's only
/// permitted nonzero channel is the band at its phase) still holds.
pub fn apply_transform(
    ms: &Tensor<f32>,
    target: &Tensor<f32>,
    layout: &MosaicLayout,
    t: Transform,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = match *ms.shape() {
        [BANDS, h, w] => (h, w),
        _ => return Err(Error::dim("augment", format!("expected [{}, H, W] input, got {:?}", BANDS, ms.shape()))),
    };
    match *target.shape() {
        [3, th, tw] if th == h && tw == w => {}
        _ => {
            return Err(Error::dim(
                "augment",
                format!("target {:?} does not pair with input {:?}", target.shape(), ms.shape()),
            ))
        }
    }
    if t.crop % BLOCK != 0 || t.oy % BLOCK != 0 || t.ox % BLOCK != 0 {
        return Err(Error::Config("crop size and origin must be multiples of 4".into()));
    }
    if t.oy + t.crop > h || t.ox + t.crop > w {
        return Err(Error::dim(
            "augment",
            format!("crop {}+{} / {}+{} exceeds image {}x{}", t.oy, t.crop, t.ox, t.crop, h, w),
        ));
    }
    let ms_c = crop_chw(ms, t.oy, t.ox, t.crop);
    let tg_c = crop_chw(target, t.oy, t.ox, t.crop);
    let ms_t = spatial_transform(&ms_c, t.rot, t.hflip);
    let tg_t = spatial_transform(&tg_c, t.rot, t.hflip);

    // band permutation induced by the spatial transform
    let plane = t.crop * t.crop;
    let mut remapped = vec![0f32; ms_t.numel()];
    for band in 0..BANDS {
        let new_phase = phase_map(t.rot, t.hflip, layout.position_of_band(band));
        let new_band = layout.band_at(new_phase.0, new_phase.1);
        remapped[new_band * plane..(new_band + 1) * plane]
            .copy_from_slice(&ms_t.data()[band * plane..(band + 1) * plane]);
    }
    Ok((Tensor::from_vec(ms_t.shape().to_vec(), remapped)?, tg_t))
}

/// Draws a random augmentation (aligned crop, quarter-turn each with
/// p = 1/4, horizontal flip with p = 1/2) and applies it to the pair.
pub fn augment(
    ms: &Tensor<f32>,
    target: &Tensor<f32>,
    layout: &MosaicLayout,
    crop: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = match *ms.shape() {
        [BANDS, h, w] => (h, w),
        _ => return Err(Error::dim("augment", format!("expected [{}, H, W] input, got {:?}", BANDS, ms.shape()))),
    };
    if crop > h || crop > w {
        return Err(Error::dim(
            "augment",
            format!("crop {} larger than image {}x{}", crop, h, w),
        ));
    }
    let oy = BLOCK * rng.random_range(0..=(h - crop) / BLOCK);
    let ox = BLOCK * rng.random_range(0..=(w - crop) / BLOCK);
    let rot = match rng.random_range(0..4u8) {
        0 => Rotation::R0,
        1 => Rotation::R90,
        2 => Rotation::R180,
        _ => Rotation::R270,
    };
    let hflip = rng.random_bool(0.5);
    apply_transform(ms, target, layout, Transform { oy, ox, crop, rot, hflip })
}

// ---------------------------------------------------------------------
// dataset directory layout:
//   root/meta.txt            key=value generation parameters
//   root/split.txt           "<id> <train|val|test>" per sample
//   root/<id>/raw.msrt       [H, W]
//   root/<id>/hr_rgb.msrt    [3, H, W]
//   root/<id>/mask.msrt      [H, W] 0/1, optional
//   root/<id>/meta.txt       per-sample seed/spec
// ---------------------------------------------------------------------

pub struct Dataset {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub split: SplitIndices,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Dataset> {
        let root = root.as_ref().to_path_buf();
        let split_file = root.join("split.txt");
        let text = std::fs::read_to_string(&split_file)?;
        let mut ids = Vec::new();
        let mut kinds: HashMap<String, String> = HashMap::new();
        for line in text.lines() {
            let mut parts = line.split_ascii_whitespace();
            if let (Some(id), Some(kind)) = (parts.next(), parts.next()) {
                ids.push(id.to_string());
                kinds.insert(id.to_string(), kind.to_string());
            }
        }
        if ids.is_empty() {
            return Err(Error::Parse { path: split_file.display().to_string(), msg: "no samples listed".into() });
        }
        let mut split = SplitIndices { train: vec![], val: vec![], test: vec![] };
        for (i, id) in ids.iter().enumerate() {
            match kinds[id].as_str() {
                "train" => split.train.push(i),
                "val" => split.val.push(i),
                "test" => split.test.push(i),
                other => {
                    return Err(Error::Parse {
                        path: split_file.display().to_string(),
                        msg: format!("unknown split `{}` for `{}`", other, id),
                    })
                }
            }
        }
        Ok(Dataset { root, ids, split })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn load_sample(&self, index: usize) -> Result<DatasetSample> {
        let id = &self.ids[index];
        let dir = self.root.join(id);
        let raw_t = io::read_tensor(dir.join("raw.msrt"))?;
        let (h, w) = match *raw_t.shape() {
            [h, w] => (h, w),
            _ => {
                return Err(Error::Parse {
                    path: dir.display().to_string(),
                    msg: format!("raw.msrt must be rank 2, got {:?}", raw_t.shape()),
                })
            }
        };
        let raw = RawMosaic::new(h, w, raw_t.data().to_vec())?;
        let hr_rgb = io::read_tensor(dir.join("hr_rgb.msrt"))?;
        if hr_rgb.shape() != [3, h, w] {
            return Err(Error::Parse {
                path: dir.display().to_string(),
                msg: format!("hr_rgb.msrt is {:?}, expected [3, {}, {}]", hr_rgb.shape(), h, w),
            });
        }
        let mask_path = dir.join("mask.msrt");
        let mask = if mask_path.exists() {
            Some(crate::metrics::mask_from_tensor(&io::read_tensor(mask_path)?)?)
        } else {
            None
        };
        Ok(DatasetSample { raw, hr_rgb, mask, id: id.clone() })
    }
}

pub fn save_sample(root: impl AsRef<Path>, sample: &DatasetSample, spec: &SceneSpec) -> Result<()> {
    let dir = root.as_ref().join(&sample.id);
    std::fs::create_dir_all(&dir)?;
    io::write_tensor(
        dir.join("raw.msrt"),
        &Tensor::from_vec(vec![sample.raw.height, sample.raw.width], sample.raw.data.clone())?,
    )?;
    io::write_tensor(dir.join("hr_rgb.msrt"), &sample.hr_rgb)?;
    if let Some(mask) = &sample.mask {
        io::write_tensor(
            dir.join("mask.msrt"),
            &crate::metrics::mask_to_tensor(mask, sample.raw.height, sample.raw.width)?,
        )?;
    }
    std::fs::write(
        dir.join("meta.txt"),
        format!(
            "seed={}\nheight={}\nwidth={}\nnum_patches={}\nband_fwhm_nm={}\nflat={}\n",
            spec.seed, spec.height, spec.width, spec.num_patches, spec.band_fwhm_nm, spec.flat
        ),
    )?;
    Ok(())
}

pub fn write_split(root: impl AsRef<Path>, ids: &[String], split: &SplitIndices) -> Result<()> {
    let mut lines: Vec<(usize, &str)> = Vec::with_capacity(ids.len());
    for &i in &split.train {
        lines.push((i, "train"));
    }
    for &i in &split.val {
        lines.push((i, "val"));
    }
    for &i in &split.test {
        lines.push((i, "test"));
    }
    lines.sort_unstable();
    let text: String = lines
        .into_iter()
        .map(|(i, kind)| format!("{} {}\n", ids[i], kind))
        .collect();
    std::fs::write(root.as_ref().join("split.txt"), text)?;
    Ok(())
}
