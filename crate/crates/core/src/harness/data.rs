//! Synthetic dataset generators. Everything is reproducible from
//! (kind, size, seed).

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::rng::{self, stream};
use crate::tensor::{patchify, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian modes evenly spaced on the unit circle, normalized to zero
    /// mean and unit per-dimension variance analytically.
    #[serde(rename = "gauss-mixture-2d")]
    GaussMixture2d {
        modes: usize,
        size: usize,
        #[serde(default = "default_mode_std")]
        std: f64,
    },
    /// Uniform points on the black cells of a checkerboard over [0,1]².
    #[serde(rename = "checker-2d")]
    Checker2d { size: usize, squares: usize },
    /// Single-channel images with one random bright rectangle on a dark
    /// background, normalized by whole-dataset statistics.
    TinyGrid {
        size: usize,
        height: usize,
        width: usize,
        #[serde(default = "default_one")]
        channels: usize,
    },
    /// Symbol strings paired with deterministic grid renderings.
    TokenGrammar {
        size: usize,
        vocab: usize,
        min_len: usize,
        max_len: usize,
        #[serde(default = "default_grammar_grid")]
        grid: usize,
    },
    /// Two Gaussian modes on a line (1-D tokens).
    #[serde(rename = "two-mode-1d")]
    TwoMode1d {
        size: usize,
        #[serde(default = "default_two_mode_sep")]
        separation: f64,
        #[serde(default = "default_mode_std")]
        std: f64,
    },
}

fn default_mode_std() -> f64 {
    0.15
}
fn default_one() -> usize {
    1
}
fn default_grammar_grid() -> usize {
    8
}
fn default_two_mode_sep() -> f64 {
    2.0
}

impl DatasetSpec {
    pub fn size(&self) -> usize {
        match self {
            DatasetSpec::GaussMixture2d { size, .. }
            | DatasetSpec::Checker2d { size, .. }
            | DatasetSpec::TinyGrid { size, .. }
            | DatasetSpec::TokenGrammar { size, .. }
            | DatasetSpec::TwoMode1d { size, .. } => *size,
        }
    }
}

/// Continuous samples as token grids `[K, C]`, plus the raw image geometry
/// when the data is spatial.
#[derive(Debug, Clone)]
pub struct VectorData<R: Real> {
    pub items: Vec<Tensor<R>>,
    /// (channels, height, width, patch) when tokens came from images.
    pub image_geom: Option<(usize, usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct GrammarData<R: Real> {
    /// (BOS ... EOS token ids, rendered token grid).
    pub items: Vec<(Vec<usize>, Tensor<R>)>,
    pub vocab: usize,
    pub image_geom: (usize, usize, usize, usize),
}

/// Continuous datasets. `patch` controls tokenization of image kinds.
pub fn generate_vectors<R: Real>(
    spec: &DatasetSpec,
    count: usize,
    patch: usize,
    seed: u64,
) -> Result<VectorData<R>> {
    match spec {
        DatasetSpec::GaussMixture2d { modes, std, .. } => {
            if *modes < 1 {
                return Err(CoreError::InvalidArgument("need at least one mode".into()));
            }
            let centers: Vec<(f64, f64)> = (0..*modes)
                .map(|j| {
                    let a = 2.0 * std::f64::consts::PI * j as f64 / *modes as f64;
                    (a.cos(), a.sin())
                })
                .collect();
            // Analytic zero-mean unit-variance normalization per dimension.
            let mean_x: f64 = centers.iter().map(|c| c.0).sum::<f64>() / *modes as f64;
            let mean_y: f64 = centers.iter().map(|c| c.1).sum::<f64>() / *modes as f64;
            let var = |sel: &dyn Fn(&(f64, f64)) -> f64, mean: f64| {
                std * std
                    + centers
                        .iter()
                        .map(|c| (sel(c) - mean) * (sel(c) - mean))
                        .sum::<f64>()
                        / *modes as f64
            };
            let sx = var(&|c| c.0, mean_x).sqrt().max(1e-9);
            let sy = var(&|c| c.1, mean_y).sqrt().max(1e-9);
            let items = (0..count)
                .map(|i| {
                    let mut r = rng::substream(&[seed, stream::DATASET, i as u64]);
                    let m = rng::uniform_usize(&mut r, *modes);
                    let x = centers[m].0 + std * rng::normal_f64(&mut r);
                    let y = centers[m].1 + std * rng::normal_f64(&mut r);
                    Tensor::new(
                        vec![1, 2],
                        vec![
                            R::from_f64((x - mean_x) / sx),
                            R::from_f64((y - mean_y) / sy),
                        ],
                    )
                    .unwrap()
                })
                .collect();
            Ok(VectorData {
                items,
                image_geom: None,
            })
        }
        DatasetSpec::Checker2d { squares, .. } => {
            if squares % 2 != 0 || *squares == 0 {
                return Err(CoreError::InvalidArgument(
                    "checkerboard needs an even square count".into(),
                ));
            }
            // Black cells of the board; the x and y marginals stay uniform.
            let cells: Vec<(usize, usize)> = (0..*squares)
                .flat_map(|i| (0..*squares).map(move |j| (i, j)))
                .filter(|(i, j)| (i + j) % 2 == 0)
                .collect();
            let cell = 1.0 / *squares as f64;
            let scale = (1.0f64 / 12.0).sqrt();
            let items = (0..count)
                .map(|i| {
                    let mut r = rng::substream(&[seed, stream::DATASET, i as u64]);
                    let (ci, cj) = cells[rng::uniform_usize(&mut r, cells.len())];
                    let x = (ci as f64 + rng::uniform_f64(&mut r)) * cell;
                    let y = (cj as f64 + rng::uniform_f64(&mut r)) * cell;
                    Tensor::new(
                        vec![1, 2],
                        vec![
                            R::from_f64((x - 0.5) / scale),
                            R::from_f64((y - 0.5) / scale),
                        ],
                    )
                    .unwrap()
                })
                .collect();
            Ok(VectorData {
                items,
                image_geom: None,
            })
        }
        DatasetSpec::TinyGrid {
            height,
            width,
            channels,
            ..
        } => {
            let imgs: Vec<Tensor<f64>> = (0..count)
                .map(|i| rect_image(*channels, *height, *width, seed, i as u64))
                .collect();
            // Whole-dataset scalar normalization, deterministic given seed.
            let n_px: usize = imgs.iter().map(|t| t.numel()).sum();
            let mean: f64 = imgs.iter().flat_map(|t| t.data.iter()).sum::<f64>() / n_px as f64;
            let var: f64 = imgs
                .iter()
                .flat_map(|t| t.data.iter().map(|v| (v - mean) * (v - mean)))
                .sum::<f64>()
                / n_px as f64;
            let sd = var.sqrt().max(1e-9);
            let items = imgs
                .into_iter()
                .map(|img| {
                    let normed = Tensor {
                        shape: img.shape.clone(),
                        data: img.data.iter().map(|v| R::from_f64((v - mean) / sd)).collect(),
                    };
                    patchify(&normed, patch)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(VectorData {
                items,
                image_geom: Some((*channels, *height, *width, patch)),
            })
        }
        DatasetSpec::TwoMode1d {
            separation, std, ..
        } => {
            // Modes at ±separation/2, normalized analytically.
            let half = separation / 2.0;
            let scale = (half * half + std * std).sqrt();
            let items = (0..count)
                .map(|i| {
                    let mut r = rng::substream(&[seed, stream::DATASET, i as u64]);
                    let sign = if rng::uniform_f64(&mut r) < 0.5 { -1.0 } else { 1.0 };
                    let x = sign * half + std * rng::normal_f64(&mut r);
                    Tensor::new(vec![1, 1], vec![R::from_f64(x / scale)]).unwrap()
                })
                .collect();
            Ok(VectorData {
                items,
                image_geom: None,
            })
        }
        DatasetSpec::TokenGrammar { .. } => Err(CoreError::InvalidArgument(
            "token-grammar is a paired dataset".into(),
        )),
    }
}

fn rect_image(c0: usize, h: usize, w: usize, seed: u64, idx: u64) -> Tensor<f64> {
    let mut r = rng::substream(&[seed, stream::DATASET, idx]);
    let top = rng::uniform_usize(&mut r, h.max(2) - 1);
    let left = rng::uniform_usize(&mut r, w.max(2) - 1);
    let rh = 1 + rng::uniform_usize(&mut r, h - top);
    let rw = 1 + rng::uniform_usize(&mut r, w - left);
    let fg = 0.8 + 0.4 * rng::uniform_f64(&mut r);
    let mut data = vec![-0.3; c0 * h * w];
    for ch in 0..c0 {
        for i in top..top + rh {
            for j in left..left + rw {
                data[ch * h * w + i * w + j] = fg;
            }
        }
    }
    // A little sensor noise so the distribution has full support.
    for v in data.iter_mut() {
        *v += 0.02 * rng::normal_f64(&mut r);
    }
    Tensor::new(vec![c0, h, w], data).unwrap()
}

/// Deterministic rendering of a symbol string onto a grid: the board is
/// split into 2×2 blocks in raster order and block j takes the gray level of
/// symbol j (cycled).
pub fn render_string<R: Real>(ids: &[usize], vocab: usize, grid: usize) -> Tensor<R> {
    let blocks = grid / 2;
    let symbols: Vec<usize> = ids
        .iter()
        .copied()
        .filter(|&t| t >= FIRST_SYMBOL)
        .collect();
    let mut data = vec![R::from_f64(-1.0); grid * grid];
    if symbols.is_empty() {
        return Tensor::new(vec![1, grid, grid], data).unwrap();
    }
    let denom = (vocab - FIRST_SYMBOL).max(1) as f64;
    for bi in 0..blocks {
        for bj in 0..blocks {
            let j = bi * blocks + bj;
            let s = symbols[j % symbols.len()];
            let level = -1.0 + 2.0 * ((s - FIRST_SYMBOL) as f64 + 0.5) / denom;
            for di in 0..2 {
                for dj in 0..2 {
                    data[(bi * 2 + di) * grid + (bj * 2 + dj)] = R::from_f64(level);
                }
            }
        }
    }
    Tensor::new(vec![1, grid, grid], data).unwrap()
}

/// First id available to grammar symbols; 0 and 1 are BOS and EOS.
pub const FIRST_SYMBOL: usize = 2;

pub fn generate_grammar<R: Real>(
    spec: &DatasetSpec,
    count: usize,
    patch: usize,
    seed: u64,
) -> Result<GrammarData<R>> {
    let DatasetSpec::TokenGrammar {
        vocab,
        min_len,
        max_len,
        grid,
        ..
    } = spec
    else {
        return Err(CoreError::InvalidArgument("not a token-grammar spec".into()));
    };
    if *vocab <= FIRST_SYMBOL || *vocab > 64 {
        return Err(CoreError::InvalidArgument(
            "grammar vocab must be in (2, 64]".into(),
        ));
    }
    if *min_len == 0 || *max_len < *min_len {
        return Err(CoreError::InvalidArgument("bad grammar lengths".into()));
    }
    let items = (0..count)
        .map(|i| {
            let mut r = rng::substream(&[seed, stream::DATASET, i as u64]);
            let len = min_len + rng::uniform_usize(&mut r, max_len - min_len + 1);
            let mut ids = vec![crate::sampler::BOS];
            for _ in 0..len {
                ids.push(FIRST_SYMBOL + rng::uniform_usize(&mut r, vocab - FIRST_SYMBOL));
            }
            ids.push(crate::sampler::EOS);
            let img = render_string::<R>(&ids, *vocab, *grid);
            let tokens = patchify(&img, patch)?;
            Ok((ids, tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GrammarData {
        items,
        vocab: *vocab,
        image_geom: (1, *grid, *grid, patch),
    })
}

/// Average-pool token grids back to images and down by an integer factor,
/// then re-patchify. Used to derive the low-resolution views.
pub fn downsample_tokens<R: Real>(
    tokens: &Tensor<R>,
    geom: (usize, usize, usize, usize),
    factor: usize,
) -> Result<Tensor<R>> {
    let (c0, h, w, patch) = geom;
    let img = crate::tensor::unpatchify(tokens, c0, h, w, patch)?;
    let (nh, nw) = (h / factor, w / factor);
    let mut out = vec![R::ZERO; c0 * nh * nw];
    let inv = R::from_f64(1.0 / (factor * factor) as f64);
    for ch in 0..c0 {
        for i in 0..nh {
            for j in 0..nw {
                let mut acc = R::ZERO;
                for di in 0..factor {
                    for dj in 0..factor {
                        acc += img.data[ch * h * w + (i * factor + di) * w + (j * factor + dj)];
                    }
                }
                out[ch * nh * nw + i * nw + j] = acc * inv;
            }
        }
    }
    patchify(&Tensor::new(vec![c0, nh, nw], out)?, patch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_mixture_is_normalized_and_reproducible() {
        let spec = DatasetSpec::GaussMixture2d {
            modes: 8,
            size: 0,
            std: 0.15,
        };
        let a: VectorData<f64> = generate_vectors(&spec, 20_000, 1, 5).unwrap();
        let b: VectorData<f64> = generate_vectors(&spec, 20_000, 1, 5).unwrap();
        assert_eq!(a.items[7].data, b.items[7].data);
        for dim in 0..2 {
            let mean: f64 =
                a.items.iter().map(|t| t.data[dim]).sum::<f64>() / a.items.len() as f64;
            let var: f64 = a
                .items
                .iter()
                .map(|t| (t.data[dim] - mean) * (t.data[dim] - mean))
                .sum::<f64>()
                / a.items.len() as f64;
            assert!(mean.abs() < 0.02, "dim {} mean {}", dim, mean);
            assert!((var - 1.0).abs() < 0.05, "dim {} var {}", dim, var);
        }
    }

    #[test]
    fn tiny_grid_tokens_have_expected_shape() {
        let spec = DatasetSpec::TinyGrid {
            size: 0,
            height: 8,
            width: 8,
            channels: 1,
        };
        let d: VectorData<f32> = generate_vectors(&spec, 16, 2, 9).unwrap();
        assert_eq!(d.items[0].shape, vec![16, 4]);
        assert_eq!(d.image_geom, Some((1, 8, 8, 2)));
    }

    #[test]
    fn grammar_items_round_trip_render() {
        let spec = DatasetSpec::TokenGrammar {
            size: 0,
            vocab: 6,
            min_len: 3,
            max_len: 5,
            grid: 8,
        };
        let d: GrammarData<f64> = generate_grammar(&spec, 4, 2, 11).unwrap();
        for (ids, tokens) in &d.items {
            assert_eq!(ids[0], crate::sampler::BOS);
            assert_eq!(*ids.last().unwrap(), crate::sampler::EOS);
            let re = patchify(&render_string::<f64>(ids, 6, 8), 2).unwrap();
            assert_eq!(re.data, tokens.data);
        }
    }

    #[test]
    fn downsample_halves_grid() {
        let spec = DatasetSpec::TinyGrid {
            size: 0,
            height: 8,
            width: 8,
            channels: 1,
        };
        let d: VectorData<f64> = generate_vectors(&spec, 2, 2, 13).unwrap();
        let low = downsample_tokens(&d.items[0], d.image_geom.unwrap(), 2).unwrap();
        assert_eq!(low.shape, vec![4, 4]);
    }

    #[test]
    fn two_mode_1d_has_two_modes() {
        let spec = DatasetSpec::TwoMode1d {
            size: 0,
            separation: 2.0,
            std: 0.1,
        };
        let d: VectorData<f64> = generate_vectors(&spec, 4000, 1, 17).unwrap();
        let pos = d.items.iter().filter(|t| t.data[0] > 0.0).count();
        let frac = pos as f64 / d.items.len() as f64;
        assert!((frac - 0.5).abs() < 0.05);
        // No mass near zero relative to the modes.
        let near_zero = d
            .items
            .iter()
            .filter(|t| t.data[0].abs() < 0.2)
            .count();
        assert!(near_zero < d.items.len() / 20);
    }
}
