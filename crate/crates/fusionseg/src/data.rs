//! Raster I/O, resampling, normalization, patch sampling, and the synthetic
//! scene generator.
//!
//! Scenes live in a directory: `vnir.bin`/`vnir.meta.json`,
//! `swir.bin`/`swir.meta.json`, `labels.bin`/`labels.meta.json`, plus
//! `scene.json` for pixel sizes, class names, and (for synthetic scenes) the
//! generator config. Payloads are raw little-endian; sidecars carry dtype,
//! shape, and a format version.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::scalar::Scalar;
use crate::tensor::{Labels, Tensor, FORMAT_VERSION};

pub const CLASS_NAMES: [&str; 4] = ["clouds", "snow", "shadows", "rest"];
pub const NUM_CLASSES: usize = 4;
/// VNIR:SWIR resolution ratio.
pub const RESOLUTION_RATIO: usize = 4;

/// Single-resolution image: a (1, C, H, W) tensor plus pixel size in meters
/// (metadata only — resampling is the one op that reads it).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    pub bands: Tensor<T>,
    pub pixel_size: f64,
}

impl<T: Scalar> Raster<T> {
    pub fn new(bands: Tensor<T>, pixel_size: f64) -> Result<Raster<T>> {
        let (n, _, h, w) = bands.shape();
        if n != 1 || h == 0 || w == 0 {
            return Err(Error::EmptyRaster);
        }
        Ok(Raster { bands, pixel_size })
    }

    pub fn height(&self) -> usize {
        self.bands.height()
    }

    pub fn width(&self) -> usize {
        self.bands.width()
    }
}

/// Nearest-neighbor resampling to a new pixel size. Output pixel centers are
/// projected into the source grid; each output pixel copies the value of the
/// nearest source pixel center — no interpolation, so the output value set is
/// a subset of the input's. Output index j maps to source index
/// floor((j+0.5)·target/source) per axis.
pub fn nn_resample<T: Scalar>(r: &Raster<T>, target_pixel_size: f64) -> Result<Raster<T>> {
    if target_pixel_size <= 0.0 {
        return Err(Error::Config(format!(
            "target pixel size must be positive, got {target_pixel_size}"
        )));
    }
    let (_, c, h, w) = r.bands.shape();
    let scale = r.pixel_size / target_pixel_size;
    let out_h = ((h as f64) * scale).round().max(1.0) as usize;
    let out_w = ((w as f64) * scale).round().max(1.0) as usize;
    let map = |j: usize, src: usize| -> usize {
        let idx = ((j as f64 + 0.5) * target_pixel_size / r.pixel_size).floor() as usize;
        idx.min(src - 1)
    };
    let rows: Vec<usize> = (0..out_h).map(|j| map(j, h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|j| map(j, w)).collect();
    let mut out = Tensor::zeros(1, c, out_h, out_w);
    for ch in 0..c {
        for (oy, &sy) in rows.iter().enumerate() {
            for (ox, &sx) in cols.iter().enumerate() {
                let v = r.bands.at(0, ch, sy, sx);
                out.set(0, ch, oy, ox, v);
            }
        }
    }
    Raster::new(out, target_pixel_size)
}

/// Generator settings stored alongside synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpectra {
    pub vnir_mean: [f64; 3],
    pub vnir_std: [f64; 3],
    pub swir_mean: f64,
    pub swir_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// VNIR-side square scene size; must be a multiple of the resolution ratio.
    pub vnir_size: usize,
    /// Target area fractions for (clouds, snow, shadows, rest).
    pub fractions: [f64; 4],
    pub spectra: [ClassSpectra; 4],
    /// Box-blur radius of the latent geometry field; larger = bigger blobs.
    pub smoothness: usize,
    /// Additive sensor noise, applied after the class spectra.
    pub noise_std: f64,
    /// 0 = cloud and snow fully separable in VNIR; 1 = identical VNIR
    /// distributions (separable only through SWIR).
    pub confusability: f64,
    /// 0 = shadows and rest separable in SWIR; 1 = identical SWIR
    /// distributions (separable only through VNIR).
    pub swir_ambiguity: f64,
    pub vnir_pixel_size: f64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            vnir_size: 256,
            fractions: [0.45, 0.26, 0.07, 0.22],
            spectra: [
                // clouds: bright everywhere
                ClassSpectra { vnir_mean: [0.85, 0.85, 0.88], vnir_std: [0.02; 3], swir_mean: 0.80, swir_std: 0.02 },
                // snow: bright in VNIR, dark (absorptive) in SWIR
                ClassSpectra { vnir_mean: [0.78, 0.80, 0.84], vnir_std: [0.02; 3], swir_mean: 0.15, swir_std: 0.02 },
                // shadows: dark everywhere
                ClassSpectra { vnir_mean: [0.10, 0.10, 0.12], vnir_std: [0.02; 3], swir_mean: 0.30, swir_std: 0.02 },
                // rest: mid-range land cover
                ClassSpectra { vnir_mean: [0.35, 0.30, 0.25], vnir_std: [0.02; 3], swir_mean: 0.55, swir_std: 0.02 },
            ],
            smoothness: 12,
            noise_std: 0.005,
            confusability: 0.0,
            swir_ambiguity: 0.0,
            vnir_pixel_size: 5.0,
        }
    }
}

impl SynthConfig {
    /// Spectra after applying the two ambiguity knobs: snow's VNIR
    /// distribution slides onto clouds', shadows'/rest's SWIR distributions
    /// slide onto their midpoint.
    pub fn effective_spectra(&self) -> [ClassSpectra; 4] {
        let mut s = self.spectra.clone();
        let c = self.confusability;
        for b in 0..3 {
            s[1].vnir_mean[b] = (1.0 - c) * s[1].vnir_mean[b] + c * s[0].vnir_mean[b];
            s[1].vnir_std[b] = (1.0 - c) * s[1].vnir_std[b] + c * s[0].vnir_std[b];
        }
        let a = self.swir_ambiguity;
        let mid_mean = 0.5 * (s[2].swir_mean + s[3].swir_mean);
        let mid_std = 0.5 * (s[2].swir_std + s[3].swir_std);
        for k in [2, 3] {
            s[k].swir_mean = (1.0 - a) * s[k].swir_mean + a * mid_mean;
            s[k].swir_std = (1.0 - a) * s[k].swir_std + a * mid_std;
        }
        s
    }
}

/// Scene-level metadata persisted as `scene.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub version: u32,
    pub vnir_pixel_size: f64,
    pub swir_pixel_size: f64,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

/// Co-registered VNIR (3-band) + SWIR (1-band) pair with reference labels at
/// the VNIR resolution. Label values: 0 clouds, 1 snow, 2 shadows, 3 rest,
/// 255 unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair<T> {
    pub vnir: Raster<T>,
    pub swir: Raster<T>,
    pub labels: Labels,
    pub meta: SceneMeta,
}

impl<T: Scalar> ScenePair<T> {
    pub fn new(vnir: Raster<T>, swir: Raster<T>, labels: Labels, meta: SceneMeta) -> Result<ScenePair<T>> {
        if vnir.bands.channels() != 3 || swir.bands.channels() != 1 {
            return Err(Error::BandCountMismatch {
                expected: 3,
                found: vnir.bands.channels(),
            });
        }
        let r = RESOLUTION_RATIO;
        if vnir.height() != r * swir.height() || vnir.width() != r * swir.width() {
            return Err(Error::ShapeMismatch(format!(
                "vnir {}x{} is not {r}x the swir {}x{}",
                vnir.height(),
                vnir.width(),
                swir.height(),
                swir.width()
            )));
        }
        if labels.h != vnir.height() || labels.w != vnir.width() || labels.n != 1 {
            return Err(Error::ShapeMismatch(format!(
                "labels {}x{} do not match vnir {}x{}",
                labels.h,
                labels.w,
                vnir.height(),
                vnir.width()
            )));
        }
        Ok(ScenePair { vnir, swir, labels, meta })
    }
}

/// Co-registered patch batch: `vnir` (count, 3, 4M, 4M), `swir` (count, 1,
/// M, M), `labels` (count, 4M, 4M).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet<T> {
    pub vnir: Tensor<T>,
    pub swir: Tensor<T>,
    pub labels: Labels,
    pub m: usize,
    pub normalized: bool,
}

impl<T: Scalar> PatchSet<T> {
    pub fn count(&self) -> usize {
        self.swir.batch()
    }

    /// Contiguous sub-batch [start, end).
    pub fn batch(&self, start: usize, end: usize) -> (Tensor<T>, Tensor<T>, Labels) {
        let vnir = self.vnir.slice_batch(start, end);
        let swir = self.swir.slice_batch(start, end);
        let plane = self.labels.h * self.labels.w;
        let labels = Labels {
            n: end - start,
            h: self.labels.h,
            w: self.labels.w,
            data: self.labels.data[start * plane..end * plane].to_vec(),
        };
        (vnir, swir, labels)
    }
}

/// Uniform-with-replacement SWIR-grid origins for count M×M windows.
pub fn sample_origins(
    swir_h: usize,
    swir_w: usize,
    count: usize,
    m: usize,
    rng: &mut CounterRng,
) -> Result<Vec<(usize, usize)>> {
    if count == 0 {
        return Err(Error::Config("patch count must be at least 1".into()));
    }
    if m == 0 || m > swir_h || m > swir_w {
        return Err(Error::SceneTooSmall(format!(
            "{m}x{m} SWIR window does not fit a {swir_h}x{swir_w} scene"
        )));
    }
    let vy = swir_h - m + 1;
    let vx = swir_w - m + 1;
    Ok((0..count)
        .map(|_| (rng.below(vy), rng.below(vx)))
        .collect())
}

/// Random co-registered patches: the SWIR window origin is uniform over
/// valid positions; the VNIR/label window is the same footprint
/// (vnir_origin = 4·swir_origin, side 4M). Windows may overlap.
pub fn sample_patches<T: Scalar>(
    scene: &ScenePair<T>,
    count: usize,
    m: usize,
    rng: &mut CounterRng,
) -> Result<PatchSet<T>> {
    let origins = sample_origins(scene.swir.height(), scene.swir.width(), count, m, rng)?;
    let r = RESOLUTION_RATIO;
    let mv = r * m;
    let mut vnir = Tensor::zeros(count, 3, mv, mv);
    let mut swir = Tensor::zeros(count, 1, m, m);
    let mut labels = Labels::filled(count, mv, mv, 0);
    for (i, &(oy, ox)) in origins.iter().enumerate() {
        for ch in 0..3 {
            for y in 0..mv {
                let src = scene.vnir.bands.index(0, ch, r * oy + y, r * ox);
                let dst = vnir.index(i, ch, y, 0);
                vnir.data_mut()[dst..dst + mv]
                    .copy_from_slice(&scene.vnir.bands.data()[src..src + mv]);
            }
        }
        for y in 0..m {
            let src = scene.swir.bands.index(0, 0, oy + y, ox);
            let dst = swir.index(i, 0, y, 0);
            swir.data_mut()[dst..dst + m].copy_from_slice(&scene.swir.bands.data()[src..src + m]);
        }
        for y in 0..mv {
            let src = (r * oy + y) * scene.labels.w + r * ox;
            let dst = (i * mv + y) * mv;
            labels.data[dst..dst + mv].copy_from_slice(&scene.labels.data[src..src + mv]);
        }
    }
    Ok(PatchSet { vnir, swir, labels, m, normalized: false })
}

/// Per-band z-score statistics, computed from training tiles only and then
/// applied unchanged to validation/test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub vnir_mean: [f64; 3],
    pub vnir_std: [f64; 3],
    pub swir_mean: f64,
    pub swir_std: f64,
}

fn band_stats<T: Scalar>(t: &Tensor<T>, ch: usize) -> Result<(f64, f64)> {
    let (n, _, h, w) = t.shape();
    let plane = h * w;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for i in 0..n {
        let base = t.index(i, ch, 0, 0);
        for &v in &t.data()[base..base + plane] {
            let v = v.to_f64();
            sum += v;
            sq += v * v;
        }
    }
    let count = (n * plane) as f64;
    let mean = sum / count;
    let var = (sq / count - mean * mean).max(0.0);
    let std = var.sqrt();
    if std <= 0.0 {
        return Err(Error::ZeroStd(ch));
    }
    Ok((mean, std))
}

impl NormStats {
    pub fn compute<T: Scalar>(scene: &ScenePair<T>) -> Result<NormStats> {
        let mut vnir_mean = [0.0; 3];
        let mut vnir_std = [0.0; 3];
        for b in 0..3 {
            (vnir_mean[b], vnir_std[b]) = band_stats(&scene.vnir.bands, b)?;
        }
        let (swir_mean, swir_std) = band_stats(&scene.swir.bands, 0)
            .map_err(|_| Error::ZeroStd(3))?;
        Ok(NormStats { vnir_mean, vnir_std, swir_mean, swir_std })
    }

    /// z-score a VNIR/SWIR tensor pair in place.
    pub fn apply<T: Scalar>(&self, vnir: &mut Tensor<T>, swir: &mut Tensor<T>) {
        let (n, _, h, w) = vnir.shape();
        let plane = h * w;
        for i in 0..n {
            for b in 0..3 {
                let mean = T::from_f64(self.vnir_mean[b]);
                let inv = T::from_f64(1.0 / self.vnir_std[b]);
                let base = vnir.index(i, b, 0, 0);
                for v in &mut vnir.data_mut()[base..base + plane] {
                    *v = (*v - mean) * inv;
                }
            }
        }
        let mean = T::from_f64(self.swir_mean);
        let inv = T::from_f64(1.0 / self.swir_std);
        for v in swir.data_mut() {
            *v = (*v - mean) * inv;
        }
    }

    pub fn load(path: &Path) -> Result<NormStats> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// z-score a patch set in place. Not idempotent, so a second application is
/// refused via the `normalized` flag.
pub fn normalize_patches<T: Scalar>(patches: &mut PatchSet<T>, stats: &NormStats) -> Result<()> {
    if patches.normalized {
        return Err(Error::Config("patch set is already normalized".into()));
    }
    stats.apply(&mut patches.vnir, &mut patches.swir);
    patches.normalized = true;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Separable box blur with clamped edges, applied `passes` times. Repeated
/// box filtering approaches a Gaussian, which is all the blob geometry needs.
fn box_blur(field: &mut Vec<f64>, h: usize, w: usize, radius: usize, passes: usize) {
    if radius == 0 {
        return;
    }
    let mut tmp = vec![0.0; h * w];
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    for _ in 0..passes {
        // horizontal
        for y in 0..h {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dx in -r..=r {
                    let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                    acc += field[y * w + sx];
                }
                tmp[y * w + x as usize] = acc * norm;
            }
        }
        // vertical
        for y in 0..h as isize {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                    acc += tmp[sy as usize * w + x];
                }
                field[y as usize * w + x] = acc * norm;
            }
        }
    }
}

/// Generate a synthetic VNIR/SWIR/label scene.
///
/// Geometry: a smoothed white-noise field is rank-thresholded so each class
/// occupies exactly its requested area fraction. Classes are laid out along
/// the field's level sets in the order clouds → rest → snow → shadows, which
/// keeps the two VNIR-confusable classes (clouds, snow) from sharing
/// boundaries.
///
/// Spectra: each VNIR pixel draws from its class's per-band normal
/// distribution. The SWIR band is produced at the VNIR grid first (the
/// latent high-resolution field), then 4×4 block-averaged to simulate the
/// coarser sensor; independent sensor noise is added to every observed
/// value.
pub fn synth_scene<T: Scalar>(cfg: &SynthConfig, rng: &mut CounterRng) -> Result<ScenePair<T>> {
    let size = cfg.vnir_size;
    let r = RESOLUTION_RATIO;
    if size < r || size % r != 0 {
        return Err(Error::Config(format!(
            "scene size must be a positive multiple of {r}, got {size}"
        )));
    }
    let total: f64 = cfg.fractions.iter().sum();
    if (total - 1.0).abs() > 0.01 || cfg.fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::InvalidFractions(total));
    }

    let n = size * size;
    let mut field: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
    box_blur(&mut field, size, size, cfg.smoothness, 3);

    // Rank-threshold the field: class fractions are exact up to rounding.
    // Level-set order clouds < rest < snow < shadows.
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| field[a as usize].total_cmp(&field[b as usize]));
    let layout = [0u8, 3, 1, 2]; // clouds, rest, snow, shadows
    let layout_fracs = [cfg.fractions[0], cfg.fractions[3], cfg.fractions[1], cfg.fractions[2]];
    let mut label_data = vec![0u8; n];
    let mut start = 0usize;
    let mut cum = 0.0;
    for (k, &class) in layout.iter().enumerate() {
        cum += layout_fracs[k];
        let end = if k + 1 == layout.len() { n } else { ((cum / total) * n as f64).round() as usize };
        for &idx in &order[start..end.min(n)] {
            label_data[idx as usize] = class;
        }
        start = end.min(n);
    }

    let spectra = cfg.effective_spectra();

    // VNIR: per-pixel class draw + sensor noise.
    let mut vnir = Tensor::<T>::zeros(1, 3, size, size);
    for b in 0..3 {
        let base = vnir.index(0, b, 0, 0);
        for px in 0..n {
            let sp = &spectra[label_data[px] as usize];
            let v = sp.vnir_mean[b] + sp.vnir_std[b] * rng.normal() + cfg.noise_std * rng.normal();
            vnir.data_mut()[base + px] = T::from_f64(v);
        }
    }

    // Latent high-resolution SWIR field, then block-average + sensor noise.
    let latent: Vec<f64> = (0..n)
        .map(|px| {
            let sp = &spectra[label_data[px] as usize];
            sp.swir_mean + sp.swir_std * rng.normal()
        })
        .collect();
    let sw = size / r;
    let mut swir = Tensor::<T>::zeros(1, 1, sw, sw);
    let inv = 1.0 / (r * r) as f64;
    for y in 0..sw {
        for x in 0..sw {
            let mut acc = 0.0;
            for dy in 0..r {
                for dx in 0..r {
                    acc += latent[(r * y + dy) * size + r * x + dx];
                }
            }
            let v = acc * inv + cfg.noise_std * rng.normal();
            swir.set(0, 0, y, x, T::from_f64(v));
        }
    }

    let meta = SceneMeta {
        version: FORMAT_VERSION,
        vnir_pixel_size: cfg.vnir_pixel_size,
        swir_pixel_size: cfg.vnir_pixel_size * r as f64,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        synth: Some(cfg.clone()),
    };
    ScenePair::new(
        Raster::new(vnir, cfg.vnir_pixel_size)?,
        Raster::new(swir, cfg.vnir_pixel_size * r as f64)?,
        Labels::new(1, size, size, label_data)?,
        meta,
    )
}

// ---------------------------------------------------------------------------
// Scene container
// ---------------------------------------------------------------------------

pub fn save_scene<T: Scalar>(scene: &ScenePair<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    scene.vnir.bands.save(&dir.join("vnir"))?;
    scene.swir.bands.save(&dir.join("swir"))?;
    scene.labels.save(&dir.join("labels"))?;
    let path = dir.join("scene.json");
    let text = serde_json::to_string_pretty(&scene.meta).expect("meta serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_scene<T: Scalar>(dir: &Path) -> Result<ScenePair<T>> {
    let path = dir.join("scene.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: SceneMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::FormatError {
            offset: 0,
            message: format!("scene version {} unsupported, expected {FORMAT_VERSION}", meta.version),
        });
    }
    let vnir = Tensor::<T>::load(&dir.join("vnir"))?;
    let swir = Tensor::<T>::load(&dir.join("swir"))?;
    let labels = Labels::load(&dir.join("labels"))?;
    ScenePair::new(
        Raster::new(vnir, meta.vnir_pixel_size)?,
        Raster::new(swir, meta.swir_pixel_size)?,
        labels,
        meta,
    )
}
