//! Full-tile inference: the network was trained on M×M (SWIR) windows, so a
//! whole scene is processed in non-overlapping patch-sized windows at
//! stride = patch size. Edge windows are completed by reflection padding
//! and the predictions cropped back, so the output raster matches the scene
//! exactly.

use crate::data::{NormStats, ScenePair, CLASS_NAMES, RESOLUTION_RATIO};
use crate::error::Result;
use crate::metrics::ConfusionMatrix;
use crate::models::{argmax_labels, InputKind, NetworkGraph};
use crate::scalar::Scalar;
use crate::tensor::{Labels, Tensor};

/// Mirror an out-of-range index back into [0, size). Reflection is about
/// the edge pixel centers (size must be ≥ 2 for true out-of-range indices).
fn reflect(i: isize, size: usize) -> usize {
    let n = size as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Pad a (1, C, H, W) tensor by reflection to (1, C, H', W').
fn reflect_pad<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (_, c, h, w) = t.shape();
    let mut out = Tensor::zeros(1, c, out_h, out_w);
    for ch in 0..c {
        for y in 0..out_h {
            let sy = reflect(y as isize, h);
            for x in 0..out_w {
                let sx = reflect(x as isize, w);
                out.set(0, ch, y, x, t.at(0, ch, sy, sx));
            }
        }
    }
    out
}

/// Predict a full scene with an M-sized window grid. Returns labels at the
/// VNIR resolution.
pub fn predict_scene<T: Scalar>(
    net: &NetworkGraph<T>,
    scene: &ScenePair<T>,
    stats: &NormStats,
    m: usize,
) -> Result<Labels> {
    let r = RESOLUTION_RATIO;
    let (sh, sw) = (scene.swir.height(), scene.swir.width());
    let tiles_y = sh.div_ceil(m);
    let tiles_x = sw.div_ceil(m);
    let (ph, pw) = (tiles_y * m, tiles_x * m);

    let mut vnir = reflect_pad(&scene.vnir.bands, r * ph, r * pw);
    let mut swir = reflect_pad(&scene.swir.bands, ph, pw);
    stats.apply(&mut vnir, &mut swir);

    let mv = r * m;
    let mut out = Labels::filled(1, r * ph, r * pw, 0);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut wv = Tensor::zeros(1, 3, mv, mv);
            for ch in 0..3 {
                for y in 0..mv {
                    let src = vnir.index(0, ch, ty * mv + y, tx * mv);
                    let dst = wv.index(0, ch, y, 0);
                    wv.data_mut()[dst..dst + mv].copy_from_slice(&vnir.data()[src..src + mv]);
                }
            }
            let mut ws = Tensor::zeros(1, 1, m, m);
            for y in 0..m {
                let src = swir.index(0, 0, ty * m + y, tx * m);
                let dst = ws.index(0, 0, y, 0);
                ws.data_mut()[dst..dst + m].copy_from_slice(&swir.data()[src..src + m]);
            }
            let logits = match net.arch.input {
                InputKind::Fused => net.forward(Some(&wv), Some(&ws))?,
                InputKind::Vnir => net.forward(Some(&wv), None)?,
                InputKind::Swir => net.forward(None, Some(&ws))?,
            };
            let win = argmax_labels(&logits);
            for y in 0..mv {
                let dst = (ty * mv + y) * (r * pw) + tx * mv;
                out.data[dst..dst + mv].copy_from_slice(&win.data[y * mv..(y + 1) * mv]);
            }
        }
    }

    // crop the padding back off
    let (h, w) = (scene.vnir.height(), scene.vnir.width());
    let mut cropped = Labels::filled(1, h, w, 0);
    for y in 0..h {
        cropped.data[y * w..(y + 1) * w].copy_from_slice(&out.data[y * (r * pw)..y * (r * pw) + w]);
    }
    Ok(cropped)
}

/// Predict a scene and score it against its reference labels.
pub fn eval_scene<T: Scalar>(
    net: &NetworkGraph<T>,
    scene: &ScenePair<T>,
    stats: &NormStats,
    m: usize,
) -> Result<(Labels, ConfusionMatrix)> {
    let predicted = predict_scene(net, scene, stats, m)?;
    let mut cm = ConfusionMatrix::new(&CLASS_NAMES);
    cm.accumulate(&predicted, &scene.labels)?;
    Ok((predicted, cm))
}
