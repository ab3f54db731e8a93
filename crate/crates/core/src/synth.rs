//! Synthetic data with known ground truth: MoICA samples, two-texture
//! images, island scenes with a known model and marking, and the Amari
//! distance.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classify::SubspaceMarking;
use crate::error::{Error, Result};
use crate::manifold::ObliqueMatrix;
use crate::moica::{IcaComponent, MogSource, MoicaModel};
use crate::patches::{Image, Rect, CHANNELS};
use crate::whitening::WhiteningTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourcePreset {
    Sparse,
    Bimodal,
    Gaussian,
}

impl SourcePreset {
    pub fn source(self) -> MogSource {
        match self {
            SourcePreset::Sparse => MogSource::sparse(),
            SourcePreset::Bimodal => MogSource::bimodal(),
            SourcePreset::Gaussian => MogSource::standard_normal(),
        }
    }
}

impl FromStr for SourcePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(SourcePreset::Sparse),
            "bimodal" => Ok(SourcePreset::Bimodal),
            "gaussian" => Ok(SourcePreset::Gaussian),
            _ => Err(Error::invalid(format!("unknown source preset {s:?}"))),
        }
    }
}

impl fmt::Display for SourcePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourcePreset::Sparse => "sparse",
            SourcePreset::Bimodal => "bimodal",
            SourcePreset::Gaussian => "gaussian",
        })
    }
}

/// A generative model plus the seed that drives every draw from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub model: MoicaModel,
    pub seed: u64,
}

fn random_mixing(dim: usize, rng: &mut ChaCha8Rng) -> Result<ObliqueMatrix> {
    ObliqueMatrix::random(dim, dim, rng)
}

impl SynthSpec {
    pub fn new(model: MoicaModel, seed: u64) -> Self {
        SynthSpec { model, seed }
    }

    /// `k` components with random unit-column mixing matrices, identical
    /// preset sources and uniform priors.
    pub fn random(dim: usize, k: usize, preset: SourcePreset, seed: u64) -> Result<Self> {
        if dim == 0 || k == 0 {
            return Err(Error::invalid(
                "dimension and component count must be at least 1",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let comps = (0..k)
            .map(|_| IcaComponent::new(random_mixing(dim, &mut rng)?, vec![preset.source(); dim]))
            .collect::<Result<_>>()?;
        Ok(SynthSpec::new(
            MoicaModel::new(comps, vec![1.0 / k as f64; k])?,
            seed,
        ))
    }

    /// `k` components over pixel patches of side `patch_size`, all with
    /// bimodal sources; component `j` scales them by `contrast^j`.
    pub fn texture(patch_size: usize, k: usize, contrast: f64, seed: u64) -> Result<Self> {
        if !(contrast > 0.0) {
            return Err(Error::invalid("contrast must be positive"));
        }
        if k == 0 || patch_size == 0 {
            return Err(Error::invalid(
                "need at least one component and a positive patch size",
            ));
        }
        let dim = patch_size * patch_size * CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let base = MogSource::bimodal();
        let comps = (0..k)
            .map(|j| {
                let src = base.affine(contrast.powi(j as i32), 0.0)?;
                IcaComponent::new(random_mixing(dim, &mut rng)?, vec![src; dim])
            })
            .collect::<Result<_>>()?;
        Ok(SynthSpec::new(
            MoicaModel::new(comps, vec![1.0 / k as f64; k])?,
            seed,
        ))
    }
}

fn draw_component<R: Rng + ?Sized>(priors: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    priors.len() - 1
}

fn draw_sources<R: Rng + ?Sized>(comp: &IcaComponent, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(comp.dim(), comp.sources().iter().map(|s| s.sample(rng)))
}

/// `t` draws `x = A_k s` with `k` from the priors, one column each, and the
/// generating component of each column.
pub fn gen_moica_samples(spec: &SynthSpec, t: usize) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let model = &spec.model;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = DMatrix::zeros(model.dim(), t);
    let mut labels = Vec::with_capacity(t);
    for j in 0..t {
        let k = draw_component(model.priors(), &mut rng);
        let comp = &model.components()[k];
        let s = draw_sources(comp, &mut rng);
        data.set_column(j, &(comp.mixing().as_matrix() * s));
        labels.push(k);
    }
    Ok((data, labels))
}

/// A per-pixel label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    labels: Vec<usize>,
}

impl RegionMask {
    pub fn new(width: usize, height: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(width * height, labels.len()));
        }
        Ok(RegionMask {
            width,
            height,
            labels,
        })
    }

    pub fn uniform(width: usize, height: usize, label: usize) -> Self {
        RegionMask {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    /// `k` vertical stripes of (nearly) equal width, labeled left to right.
    pub fn vertical_stripes(width: usize, height: usize, k: usize) -> Self {
        let k = k.max(1);
        let labels = (0..height)
            .flat_map(|_| (0..width).map(move |x| x * k / width))
            .collect();
        RegionMask {
            width,
            height,
            labels,
        }
    }

    /// Label 0 for `x < split`, 1 from `split` on.
    pub fn vertical_split(width: usize, height: usize, split: usize) -> Self {
        let labels = (0..height)
            .flat_map(|_| (0..width).map(move |x| usize::from(x >= split)))
            .collect();
        RegionMask {
            width,
            height,
            labels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x]
    }

    /// The single label inside `rect`, or `None` if it straddles regions.
    pub fn region_of(&self, rect: &Rect) -> Option<usize> {
        let first = self.get(rect.x0, rect.y0);
        (rect.y0..rect.y1)
            .all(|y| (rect.x0..rect.x1).all(|x| self.get(x, y) == first))
            .then_some(first)
    }

    /// Plain text: `width height` on the first line, then one row of
    /// space-separated labels per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.width, self.height);
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |r: &str| Error::format("region map", r.to_string());
        let mut lines = text.lines();
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("empty"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad header")))
            .collect::<Result<_>>()?;
        let [width, height] = header[..] else {
            return Err(bad("header must be `width height`"));
        };
        let labels = lines
            .flat_map(str::split_whitespace)
            .map(|t| t.parse().map_err(|_| bad("bad label")))
            .collect::<Result<Vec<usize>>>()?;
        RegionMask::new(width, height, labels)
    }
}

#[derive(Debug, Clone)]
pub struct TextureImage {
    pub image: Image,
    pub truth: RegionMask,
}

/// Tiles the image with non-overlapping patches drawn from each component
/// (last row and column clamped), takes each pixel from the component its
/// mask label names, then maps the result affinely onto [0, 1].
pub fn gen_texture_image(
    spec: &SynthSpec,
    mask: &RegionMask,
    patch_size: usize,
) -> Result<TextureImage> {
    let model = &spec.model;
    let dim = patch_size * patch_size * CHANNELS;
    if model.dim() != dim {
        return Err(Error::shape(
            format!("model over {patch_size}px patches ({dim})"),
            model.dim(),
        ));
    }
    let (w, h) = (mask.width(), mask.height());
    if w < patch_size || h < patch_size {
        return Err(Error::invalid("mask is smaller than one patch"));
    }
    if let Some(bad) = mask.labels().iter().find(|&&l| l >= model.n_components()) {
        return Err(Error::invalid(format!("mask label {bad} has no component")));
    }
    let origins = |extent: usize| {
        let mut v: Vec<usize> = (0..=extent - patch_size).step_by(patch_size).collect();
        if *v.last().unwrap() != extent - patch_size {
            v.push(extent - patch_size);
        }
        v
    };
    let (xs, ys) = (origins(w), origins(h));
    let mut raw = vec![0.0; w * h * CHANNELS];
    for k in 0..model.n_components() {
        if !mask.labels().contains(&k) {
            continue;
        }
        let comp = &model.components()[k];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k as u64 + 1);
        let mut layer = vec![0.0; w * h * CHANNELS];
        for &y0 in &ys {
            for &x0 in &xs {
                let v = comp.mixing().as_matrix() * draw_sources(comp, &mut rng);
                write_patch(&mut layer, w, x0, y0, patch_size, v.as_slice());
            }
        }
        for (p, &label) in mask.labels().iter().enumerate() {
            if label == k {
                raw[p * CHANNELS..(p + 1) * CHANNELS]
                    .copy_from_slice(&layer[p * CHANNELS..(p + 1) * CHANNELS]);
            }
        }
    }
    let (a, b) = squash(&raw);
    let pixels = raw.iter().map(|v| a * v + b).collect();
    Ok(TextureImage {
        image: Image::new(w, h, pixels)?,
        truth: mask.clone(),
    })
}

/// Writes a channel-major patch vector into an interleaved RGB buffer.
fn write_patch(buf: &mut [f64], width: usize, x0: usize, y0: usize, size: usize, v: &[f64]) {
    let plane = size * size;
    for c in 0..CHANNELS {
        for dy in 0..size {
            for dx in 0..size {
                buf[((y0 + dy) * width + x0 + dx) * CHANNELS + c] = v[c * plane + dy * size + dx];
            }
        }
    }
}

/// `(a, b)` with `a·min + b = 0` and `a·max + b = 1`.
fn squash(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (1.0 / (hi - lo), -lo / (hi - lo))
    } else {
        (0.0, 0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslandSceneConfig {
    pub patch_size: usize,
    /// Whitened dimension, also the number of features.
    pub dim: usize,
    pub n_classes: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub n_islands: usize,
    /// Large islands of `wbc_tiles`² tiles meant to be removed by size.
    pub n_wbc: usize,
    pub wbc_tiles: usize,
    pub seed: u64,
}

impl Default for IslandSceneConfig {
    fn default() -> Self {
        IslandSceneConfig {
            patch_size: 8,
            dim: 16,
            n_classes: 3,
            tiles_x: 32,
            tiles_y: 32,
            n_islands: 24,
            n_wbc: 2,
            wbc_tiles: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrueIsland {
    pub rect: Rect,
    pub class: usize,
    pub wbc: bool,
}

/// An image together with the exact model, whitening and marking that
/// generated it.
#[derive(Debug, Clone)]
pub struct IslandScene {
    pub image: Image,
    pub model: MoicaModel,
    pub whitening: WhiteningTransform,
    pub marking: SubspaceMarking,
    pub islands: Vec<TrueIsland>,
    pub patch_size: usize,
}

impl IslandScene {
    /// 0 for background, `c + 1` for class `c`, `n_classes + 1` for size-filtered islands.
    pub fn label_map(&self) -> RegionMask {
        let (w, h) = (self.image.width(), self.image.height());
        let mut labels = vec![0; w * h];
        for isl in &self.islands {
            let v = if isl.wbc {
                self.marking.len() + 1
            } else {
                isl.class + 1
            };
            for y in isl.rect.y0..isl.rect.y1 {
                for x in isl.rect.x0..isl.rect.x1 {
                    labels[y * w + x] = v;
                }
            }
        }
        RegionMask {
            width: w,
            height: h,
            labels,
        }
    }

    /// One line per island: `x0 y0 x1 y1 class`, with `wbc` for the large ones.
    pub fn islands_text(&self) -> String {
        let mut out = String::new();
        for isl in &self.islands {
            let name = if isl.wbc {
                crate::classify::WBC_CLASS
            } else {
                self.marking.names()[isl.class].as_str()
            };
            let r = isl.rect;
            out.push_str(&format!("{} {} {} {} {name}\n", r.x0, r.y0, r.x1, r.y1));
        }
        out
    }
}

fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Places rectangles of tiles at random, keeping a two-tile gap around each.
fn place_islands(
    cfg: &IslandSceneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize, usize, usize, bool)>> {
    let mut occupied = vec![false; cfg.tiles_x * cfg.tiles_y];
    let mut placed = Vec::new();
    let sizes = (0..cfg.n_wbc)
        .map(|_| (cfg.wbc_tiles, cfg.wbc_tiles, true))
        .chain((0..cfg.n_islands).map(|_| (0, 0, false)));
    for (mut tw, mut th, wbc) in sizes {
        if !wbc {
            tw = rng.random_range(1..=2);
            th = rng.random_range(1..=2);
        }
        if tw > cfg.tiles_x || th > cfg.tiles_y {
            return Err(Error::invalid("island larger than the scene"));
        }
        let mut done = false;
        for _ in 0..10_000 {
            let tx = rng.random_range(0..=cfg.tiles_x - tw);
            let ty = rng.random_range(0..=cfg.tiles_y - th);
            let lo_x = tx.saturating_sub(2);
            let lo_y = ty.saturating_sub(2);
            let hi_x = (tx + tw + 2).min(cfg.tiles_x);
            let hi_y = (ty + th + 2).min(cfg.tiles_y);
            if (lo_y..hi_y).any(|y| (lo_x..hi_x).any(|x| occupied[y * cfg.tiles_x + x])) {
                continue;
            }
            for y in ty..ty + th {
                for x in tx..tx + tw {
                    occupied[y * cfg.tiles_x + x] = true;
                }
            }
            placed.push((tx, ty, tw, th, wbc));
            done = true;
            break;
        }
        if !done {
            return Err(Error::invalid(
                "could not place every island; enlarge the scene",
            ));
        }
    }
    Ok(placed)
}

/// A scene of islands on a textured background.
///
/// The background is drawn from component 0 (sparse sources at 0.3 scale,
/// so any background-only patch has low energy); island tiles
/// from component 1 (sparse sources) with the coefficients of one marked
/// subspace drawn from the wide part of the sparse mixture and all others
/// from the narrow part. Pixels are `mean + B·diag(√λ)·A_k s` for a random
/// orthonormal `B`; the whitening returned is the exact inverse of that map
/// after the final affine squash onto [0, 1].
pub fn gen_island_scene(cfg: &IslandSceneConfig) -> Result<IslandScene> {
    let p = cfg.patch_size;
    let d = cfg.dim;
    let big_d = p * p * CHANNELS;
    if p == 0 || d == 0 || d > big_d || cfg.n_classes == 0 || cfg.n_classes > d {
        return Err(Error::invalid("need 1 ≤ classes ≤ dim ≤ 3·patch_size²"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let basis = orthonormal_columns(big_d, d, &mut rng);
    let lambdas = DVector::from_fn(d, |j, _| 0.08 * (1.0 - 0.02 * j as f64));
    let background = IcaComponent::new(
        random_mixing(d, &mut rng)?,
        vec![MogSource::sparse().affine(0.3, 0.0)?; d],
    )?;
    let objects = IcaComponent::new(random_mixing(d, &mut rng)?, vec![MogSource::sparse(); d])?;
    let model = MoicaModel::new(vec![background, objects], vec![0.8, 0.2])?;

    let per = d / cfg.n_classes;
    let groups: Vec<Vec<usize>> = (0..cfg.n_classes)
        .map(|c| {
            let end = if c + 1 == cfg.n_classes {
                d
            } else {
                (c + 1) * per
            };
            (c * per..end).collect()
        })
        .collect();
    let names = [
        "ring", "troph", "schizont", "gameto", "platelet", "artefact",
    ];
    let marking = SubspaceMarking::new(
        groups
            .iter()
            .enumerate()
            .map(|(c, g)| {
                let name = names
                    .get(c)
                    .map_or_else(|| format!("class{c}"), |n| n.to_string());
                (name, g.clone())
            })
            .collect(),
    )?;

    let placed = place_islands(cfg, &mut rng)?;
    let (w, h) = (cfg.tiles_x * p, cfg.tiles_y * p);
    // Tile class: None for background.
    let mut tile_class: Vec<Option<usize>> = vec![None; cfg.tiles_x * cfg.tiles_y];
    let mut islands = Vec::new();
    for &(tx, ty, tw, th, wbc) in &placed {
        let class = rng.random_range(0..cfg.n_classes);
        for y in ty..ty + th {
            for x in tx..tx + tw {
                tile_class[y * cfg.tiles_x + x] = Some(class);
            }
        }
        islands.push(TrueIsland {
            rect: Rect {
                x0: tx * p,
                y0: ty * p,
                x1: (tx + tw) * p,
                y1: (ty + th) * p,
            },
            class,
            wbc,
        });
    }

    let render = &basis * DMatrix::from_diagonal(&lambdas.map(f64::sqrt));
    let wide = (0.0, 2.0);
    let narrow = (0.0, 0.3);
    let mut raw = vec![0.0; w * h * CHANNELS];
    for ty in 0..cfg.tiles_y {
        for tx in 0..cfg.tiles_x {
            let y = match tile_class[ty * cfg.tiles_x + tx] {
                None => {
                    let comp = &model.components()[0];
                    comp.mixing().as_matrix() * draw_sources(comp, &mut rng)
                }
                Some(c) => {
                    let s = DVector::from_fn(d, |l, _| {
                        let (mu, sd) = if groups[c].contains(&l) { wide } else { narrow };
                        let z: f64 = StandardNormal.sample(&mut rng);
                        mu + sd * z
                    });
                    model.components()[1].mixing().as_matrix() * s
                }
            };
            let x = &render * y;
            write_patch(&mut raw, w, tx * p, ty * p, p, x.as_slice());
        }
    }
    // Raw pixels are `x` around a zero mean; squash, then express the
    // whitening in squashed coordinates: mean' = b, λ' = a²λ.
    let (a, b) = squash(&raw);
    let pixels = raw.iter().map(|v| a * v + b).collect();
    let whitening = WhiteningTransform::from_parts(
        DVector::from_element(big_d, b),
        basis,
        lambdas.map(|l| a * a * l),
        0.0,
        a * a * lambdas.sum(),
    )?;
    Ok(IslandScene {
        image: Image::new(w, h, pixels)?,
        model,
        whitening,
        marking,
        islands,
        patch_size: p,
    })
}

/// Amari index of `P = A⁻¹ B`, normalized by `1 / (2n(n−1))` so it lies in
/// [0, 1]; zero iff `B` is `A` with columns permuted and rescaled.
pub fn amari_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let n = a.nrows();
    if !a.is_square() || a.shape() != b.shape() {
        return Err(Error::shape(
            format!("{n}x{n} pair"),
            format!("{:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (a_inv, _) = crate::moica::invert(a)?;
    crate::moica::invert(b)?;
    if n == 1 {
        return Ok(0.0);
    }
    let p = (a_inv * b).abs();
    let rows: f64 = p.row_iter().map(|r| r.sum() / r.max() - 1.0).sum();
    let cols: f64 = p.column_iter().map(|c| c.sum() / c.max() - 1.0).sum();
    Ok((rows + cols) / (2.0 * n as f64 * (n as f64 - 1.0)))
}

/// Fraction of labels matching after the best relabeling of `pred`
/// (exhaustive over permutations, so `k` must be small).
pub fn label_accuracy(truth: &[usize], pred: &[usize], k: usize) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    if k == 0 || k > 8 {
        return Err(Error::invalid("label matching supports 1 to 8 classes"));
    }
    if truth.is_empty() {
        return Ok(1.0);
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::invalid("label out of range"));
        }
        confusion[t][p] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |perm| {
        best = best.max((0..k).map(|t| confusion[t][perm[t]]).sum());
    });
    Ok(best as f64 / truth.len() as f64)
}

fn permute(perm: &mut [usize], i: usize, visit: &mut impl FnMut(&[usize])) {
    if i == perm.len() {
        visit(perm);
        return;
    }
    for j in i..perm.len() {
        perm.swap(i, j);
        permute(perm, i + 1, visit);
        perm.swap(i, j);
    }
}

/// Fraction of non-`wbc` true islands whose best-overlapping detected box
/// carries the same class name; `detected` holds `(bbox, class)` pairs.
pub fn island_accuracy(scene: &IslandScene, detected: &[(Rect, String)]) -> f64 {
    let overlap = |a: &Rect, b: &Rect| {
        let w = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
        let h = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
        w * h
    };
    let targets: Vec<&TrueIsland> = scene.islands.iter().filter(|i| !i.wbc).collect();
    if targets.is_empty() {
        return 1.0;
    }
    let hits = targets
        .iter()
        .filter(|t| {
            detected
                .iter()
                .map(|(r, c)| (overlap(&t.rect, r), c))
                .filter(|(o, _)| *o > 0)
                .max_by_key(|(o, _)| *o)
                .is_some_and(|(_, c)| *c == scene.marking.names()[t.class])
        })
        .count();
    hits as f64 / targets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{classify_image, ClassifyOptions};
    use crate::moica::model_loglik;

    fn random_matrix(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn amari_zero_for_same_and_permuted_scaled() {
        let a = random_matrix(5, 1);
        assert!(amari_distance(&a, &a).unwrap() < 1e-12);
        let perm = [3, 0, 4, 1, 2];
        let scale = [2.0, -2.0, 0.5, -1.0, 3.0];
        let b = DMatrix::from_fn(5, 5, |r, c| a[(r, perm[c])] * scale[c]);
        assert!(amari_distance(&a, &b).unwrap() < 1e-12);
    }

    #[test]
    fn amari_random_pairs_are_far() {
        // Independent Gaussian 8×8 pairs: mean ≈ 0.38, 5th percentile ≈ 0.30
        // (numpy baseline over 5000 pairs).
        let vals: Vec<f64> = (0..200)
            .map(|i| {
                amari_distance(&random_matrix(8, 2 * i), &random_matrix(8, 2 * i + 1)).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let above = vals.iter().filter(|v| **v > 0.3).count();
        assert!(mean > 0.3, "mean {mean}");
        assert!(above >= 180, "{above} of 200 above 0.3");
        assert!(vals.iter().all(|v| *v <= 1.0));
    }

    #[test]
    fn amari_direct_two_by_two() {
        // P = [[1, 1], [0, 1]]: rows (2/1 − 1) + (1 − 1), cols (1 − 1) + (2 − 1) → 2 / 4.
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!((amari_distance(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert!(amari_distance(&a, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn standard_normal_moments() {
        let spec = SynthSpec::new(
            MoicaModel::new(
                vec![IcaComponent::new(
                    ObliqueMatrix::identity(3),
                    vec![MogSource::standard_normal(); 3],
                )
                .unwrap()],
                vec![1.0],
            )
            .unwrap(),
            11,
        );
        let t = 100_000;
        let (x, labels) = gen_moica_samples(&spec, t).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
        let mean = x.column_sum() / t as f64;
        let cov = &x * x.transpose() / t as f64;
        let sd_mean = (1.0 / t as f64).sqrt();
        // Var of a sample second moment of N(0,1) is 2/T off the diagonal 1/T.
        for i in 0..3 {
            assert!(mean[i].abs() < 4.0 * sd_mean);
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                let sd = if i == j {
                    (2.0 / t as f64).sqrt()
                } else {
                    sd_mean
                };
                assert!((cov[(i, j)] - target).abs() < 4.0 * sd, "cov {i}{j}");
            }
        }
    }

    #[test]
    fn label_frequencies_follow_priors() {
        let mut spec = SynthSpec::random(2, 3, SourcePreset::Sparse, 5).unwrap();
        let comps = spec.model.components().to_vec();
        spec.model = MoicaModel::new(comps, vec![0.2, 0.5, 0.3]).unwrap();
        let t = 20_000;
        let (_, labels) = gen_moica_samples(&spec, t).unwrap();
        for (k, p) in [0.2, 0.5, 0.3].iter().enumerate() {
            let n = labels.iter().filter(|&&l| l == k).count() as f64;
            let sd = (t as f64 * p * (1.0 - p)).sqrt();
            assert!((n - t as f64 * p).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn samples_are_deterministic() {
        let spec = SynthSpec::random(4, 2, SourcePreset::Bimodal, 9).unwrap();
        let a = gen_moica_samples(&spec, 500).unwrap();
        let b = gen_moica_samples(&spec, 500).unwrap();
        assert_eq!(a, b);
        let other = SynthSpec { seed: 10, ..spec };
        assert_ne!(gen_moica_samples(&other, 500).unwrap().0, a.0);
    }

    #[test]
    fn true_model_beats_random_model() {
        for seed in 0..3 {
            let spec = SynthSpec::random(4, 2, SourcePreset::Sparse, seed).unwrap();
            let (x, _) = gen_moica_samples(&spec, 1000).unwrap();
            let other = SynthSpec::random(4, 2, SourcePreset::Sparse, seed + 100).unwrap();
            assert!(
                model_loglik(&spec.model, &x).unwrap() > model_loglik(&other.model, &x).unwrap()
            );
        }
    }

    #[test]
    fn texture_truth_and_range() {
        let spec = SynthSpec::texture(4, 2, 3.0, 1).unwrap();
        let mask = RegionMask::vertical_split(20, 12, 9);
        let tex = gen_texture_image(&spec, &mask, 4).unwrap();
        assert_eq!(tex.truth, mask);
        let px = tex.image.pixels();
        assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((tex.image.width(), tex.image.height()), (20, 12));
        for y in 0..12 {
            assert_eq!(tex.truth.get(8, y), 0);
            assert_eq!(tex.truth.get(9, y), 1);
        }
        let stripes = RegionMask::vertical_stripes(9, 2, 3);
        assert_eq!(&stripes.labels()[..9], &[0, 0, 0, 1, 1, 1, 2, 2, 2]);
        let one = gen_texture_image(&spec, &RegionMask::uniform(8, 8, 1), 4).unwrap();
        assert!(one.truth.labels().iter().all(|&l| l == 1));
        assert!(gen_texture_image(&spec, &RegionMask::uniform(8, 8, 2), 4).is_err());
        assert!(gen_texture_image(&spec, &mask, 5).is_err());
    }

    #[test]
    fn region_text_round_trip() {
        let m = RegionMask::vertical_split(5, 3, 2);
        assert_eq!(m.to_text(), "5 3\n0 0 1 1 1\n0 0 1 1 1\n0 0 1 1 1\n");
        assert_eq!(RegionMask::from_text(&m.to_text()).unwrap(), m);
        assert!(RegionMask::from_text("2 2\n0 1\n").is_err());
        assert_eq!(
            m.region_of(&Rect {
                x0: 2,
                y0: 0,
                x1: 5,
                y1: 3
            }),
            Some(1)
        );
        assert_eq!(
            m.region_of(&Rect {
                x0: 1,
                y0: 0,
                x1: 3,
                y1: 3
            }),
            None
        );
    }

    #[test]
    fn label_accuracy_handles_permutation() {
        assert_eq!(
            label_accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap(),
            1.0
        );
        assert_eq!(
            label_accuracy(&[0, 1, 2, 2], &[2, 0, 1, 0], 3).unwrap(),
            0.75
        );
    }

    #[test]
    fn scene_whitening_inverts_the_render() {
        let cfg = IslandSceneConfig {
            tiles_x: 12,
            tiles_y: 12,
            n_islands: 4,
            n_wbc: 0,
            ..IslandSceneConfig::default()
        };
        let scene = gen_island_scene(&cfg).unwrap();
        assert!(scene.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(scene.islands.len(), 4);
        assert_eq!(scene.marking.len(), 3);
        // Classification with the true model recovers every island.
        let report = classify_image(
            &scene.model,
            &scene.whitening,
            &scene.image,
            &scene.marking,
            &ClassifyOptions {
                stride: cfg.patch_size,
                uniform_priors: false,
                foreground: Some(1),
                wbc_threshold: Some(f64::INFINITY),
                compactness_bound: None,
            },
        )
        .unwrap();
        let detected: Vec<(Rect, String)> = report
            .islands
            .iter()
            .map(|r| {
                (
                    Rect {
                        x0: r.bbox[0],
                        y0: r.bbox[1],
                        x1: r.bbox[2],
                        y1: r.bbox[3],
                    },
                    r.class.clone(),
                )
            })
            .collect();
        assert_eq!(island_accuracy(&scene, &detected), 1.0);
        assert_eq!(
            scene
                .label_map()
                .labels()
                .iter()
                .filter(|&&l| l > 0)
                .count(),
            scene.islands.iter().map(|i| i.rect.area()).sum::<usize>()
        );
    }
}
