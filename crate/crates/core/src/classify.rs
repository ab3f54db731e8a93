//! Patch labeling by component posterior, island formation, size filtering
//! and subspace-energy classification of islands.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moica::{argmax, component_posteriors, IcaComponent, MoicaModel};
use crate::patches::{grid_patches, Image, PatchGrid, Rect, CHANNELS};
use crate::whitening::WhiteningTransform;

/// Class name given to islands removed by the size filter.
pub const WBC_CLASS: &str = "wbc";
/// Class name given by the optional compactness rule.
pub const ARTEFACT_CLASS: &str = "artefact";

/// Per-patch component posteriors and labels over an inference grid.
#[derive(Debug, Clone)]
pub struct PatchLabelMap {
    grid: PatchGrid,
    /// N×K.
    posterior: DMatrix<f64>,
    labels: Vec<usize>,
    foreground: usize,
    /// d×N whitened patches, kept for subspace projection.
    whitened: DMatrix<f64>,
}

impl PatchLabelMap {
    /// Builds a map from precomputed posteriors. Labels are the row argmax
    /// (ties to the lower index).
    pub fn from_posterior(
        grid: PatchGrid,
        posterior: DMatrix<f64>,
        foreground: usize,
        whitened: DMatrix<f64>,
    ) -> Result<Self> {
        if posterior.nrows() != grid.len() || whitened.ncols() != grid.len() {
            return Err(Error::shape(
                format!("{} patches", grid.len()),
                format!(
                    "{} posteriors and {} whitened patches",
                    posterior.nrows(),
                    whitened.ncols()
                ),
            ));
        }
        if foreground >= posterior.ncols() {
            return Err(Error::invalid(format!(
                "foreground component {foreground} out of range for K = {}",
                posterior.ncols()
            )));
        }
        let labels = (0..posterior.nrows())
            .map(|i| argmax(posterior.row(i).iter().copied()))
            .collect();
        Ok(PatchLabelMap {
            grid,
            posterior,
            labels,
            foreground,
            whitened,
        })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn posterior(&self) -> &DMatrix<f64> {
        &self.posterior
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn foreground(&self) -> usize {
        self.foreground
    }

    pub fn whitened(&self) -> &DMatrix<f64> {
        &self.whitened
    }

    pub fn is_foreground(&self, index: usize) -> bool {
        self.labels[index] == self.foreground
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LabelOptions {
    pub uniform_priors: bool,
    /// Overrides the automatic foreground choice.
    pub foreground: Option<usize>,
}

/// The component with the smallest total posterior mass (ties to the lower index).
pub fn minority_component(posterior: &DMatrix<f64>) -> usize {
    argmax(posterior.column_iter().map(|c| -c.sum()))
}

pub fn patch_size_for(tf: &WhiteningTransform) -> Result<usize> {
    let d = tf.input_dim();
    let p = ((d / CHANNELS) as f64).sqrt().round() as usize;
    if p * p * CHANNELS != d {
        return Err(Error::invalid(format!(
            "input dimension {d} is not 3·p² for any patch size p"
        )));
    }
    Ok(p)
}

/// Whitens every grid patch of `image` and scores it under `model`.
pub fn label_patches(
    model: &MoicaModel,
    tf: &WhiteningTransform,
    image: &Image,
    stride: usize,
    opts: LabelOptions,
) -> Result<PatchLabelMap> {
    if model.dim() != tf.output_dim() {
        return Err(Error::shape(
            format!("model dimension {}", tf.output_dim()),
            model.dim(),
        ));
    }
    let patch_size = patch_size_for(tf)?;
    let (grid, raw) = grid_patches(image, patch_size, stride)?;
    let whitened = tf.whiten_all(&raw)?;
    let posterior = if opts.uniform_priors {
        component_posteriors(&model.with_uniform_priors(), &whitened)?
    } else {
        component_posteriors(model, &whitened)?
    };
    let foreground = opts
        .foreground
        .unwrap_or_else(|| minority_component(&posterior));
    PatchLabelMap::from_posterior(grid, posterior, foreground, whitened)
}

/// A connected group of foreground patches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Island {
    pub id: usize,
    /// Grid indices, ascending.
    pub members: Vec<usize>,
    pub bbox: Rect,
}

impl Island {
    pub fn bbox_area(&self) -> usize {
        self.bbox.area()
    }
}

/// Connected components of the foreground cells under 8-adjacency, ordered
/// by their first cell in row-major order.
pub fn form_islands(map: &PatchLabelMap) -> Vec<Island> {
    let fg: Vec<bool> = (0..map.len()).map(|i| map.is_foreground(i)).collect();
    islands_from_mask(map.grid(), &fg)
}

pub fn islands_from_mask(grid: &PatchGrid, foreground: &[bool]) -> Vec<Island> {
    let (rows, cols) = (grid.rows() as isize, grid.cols() as isize);
    let mut seen = vec![false; foreground.len()];
    let mut islands = Vec::new();
    for start in 0..foreground.len() {
        if !foreground[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut members = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (r, c) = grid.cell(i);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= rows || nc >= cols {
                        continue;
                    }
                    let j = grid.index(nr as usize, nc as usize);
                    if foreground[j] && !seen[j] {
                        seen[j] = true;
                        members.push(j);
                        queue.push_back(j);
                    }
                }
            }
        }
        members.sort_unstable();
        let bbox = members
            .iter()
            .map(|&i| grid.rect(i))
            .reduce(|a, b| a.union(&b))
            .unwrap();
        islands.push(Island {
            id: islands.len(),
            members,
            bbox,
        });
    }
    islands
}

/// Splits islands by bounding-box area: `area > threshold` is removed.
pub fn remove_wbc(islands: Vec<Island>, threshold: f64) -> Result<(Vec<Island>, Vec<Island>)> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::invalid("size threshold must be nonnegative"));
    }
    Ok(islands
        .into_iter()
        .partition(|isl| isl.bbox_area() as f64 <= threshold))
}

/// Four times the median bounding-box area, or +∞ without islands.
pub fn default_wbc_threshold(islands: &[Island]) -> f64 {
    let mut areas: Vec<usize> = islands.iter().map(Island::bbox_area).collect();
    if areas.is_empty() {
        return f64::INFINITY;
    }
    areas.sort_unstable();
    let n = areas.len();
    let median = if n % 2 == 1 {
        areas[n / 2] as f64
    } else {
        0.5 * (areas[n / 2 - 1] + areas[n / 2]) as f64
    };
    4.0 * median
}

/// Named groups of feature indices (0-based internally, 1-based on disk).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubspaceMarking {
    names: Vec<String>,
    features: Vec<Vec<usize>>,
}

impl SubspaceMarking {
    pub fn new(subspaces: Vec<(String, Vec<usize>)>) -> Result<Self> {
        if subspaces.is_empty() {
            return Err(Error::format("marking", "no subspaces"));
        }
        let mut names = Vec::with_capacity(subspaces.len());
        let mut features = Vec::with_capacity(subspaces.len());
        for (name, mut idx) in subspaces {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::format(
                    "marking",
                    format!("bad subspace name {name:?}"),
                ));
            }
            if names.contains(&name) {
                return Err(Error::format(
                    "marking",
                    format!("duplicate subspace {name:?}"),
                ));
            }
            if idx.is_empty() {
                return Err(Error::format(
                    "marking",
                    format!("subspace {name:?} is empty"),
                ));
            }
            idx.sort_unstable();
            if idx.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::format(
                    "marking",
                    format!("subspace {name:?} repeats a feature"),
                ));
            }
            names.push(name);
            features.push(idx);
        }
        Ok(SubspaceMarking { names, features })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// 0-based feature indices of subspace `s`.
    pub fn features(&self, s: usize) -> &[usize] {
        &self.features[s]
    }

    /// Largest referenced feature, 1-based.
    pub fn max_feature(&self) -> usize {
        self.features.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        let max = self.max_feature();
        if max > n_features {
            return Err(Error::invalid(format!(
                "marking references feature {max} but the model has {n_features}"
            )));
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }
}

impl FromStr for SubspaceMarking {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut subspaces = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (name, rest) = line.split_once(':').ok_or_else(|| {
                Error::format(
                    "marking",
                    format!("line {}: expected `name: indices`", n + 1),
                )
            })?;
            let idx = rest
                .split_whitespace()
                .map(|tok| match tok.parse::<usize>() {
                    Ok(i) if i >= 1 => Ok(i - 1),
                    _ => Err(Error::format(
                        "marking",
                        format!("line {}: bad feature index {tok:?}", n + 1),
                    )),
                })
                .collect::<Result<Vec<_>>>()?;
            subspaces.push((name.trim().to_string(), idx));
        }
        SubspaceMarking::new(subspaces)
    }
}

impl fmt::Display for SubspaceMarking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, idx) in self.names.iter().zip(&self.features) {
            write!(f, "{name}:")?;
            for i in idx {
                write!(f, " {}", i + 1)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Root-sum-square of the coefficients in each subspace.
pub fn subspace_energies(coeffs: &[f64], marking: &SubspaceMarking) -> Vec<f64> {
    marking
        .features
        .iter()
        .map(|idx| {
            idx.iter()
                .map(|&l| coeffs[l] * coeffs[l])
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Energies of every member patch of `island` (members × subspaces), using
/// the source coefficients `A⁻¹ y` of the whitened patches under `component`.
pub fn project_subspaces(
    component: &IcaComponent,
    map: &PatchLabelMap,
    island: &Island,
    marking: &SubspaceMarking,
) -> Result<Vec<Vec<f64>>> {
    marking.validate(component.dim())?;
    if map.whitened().nrows() != component.dim() {
        return Err(Error::shape(component.dim(), map.whitened().nrows()));
    }
    let unmixing = component.unmixing_matrix()?;
    Ok(island
        .members
        .iter()
        .map(|&i| {
            let s = &unmixing * map.whitened().column(i);
            subspace_energies(s.as_slice(), marking)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vote {
    pub class: usize,
    pub tally: Vec<usize>,
    /// Total energy per subspace over all patches.
    pub totals: Vec<f64>,
}

/// Plurality vote over per-patch argmax subspaces; ties go to the larger
/// total energy, then the lower index.
pub fn classify_island(energies: &[Vec<f64>], n_subspaces: usize) -> Result<Vote> {
    if energies.is_empty() {
        return Err(Error::invalid("cannot classify an empty island"));
    }
    let mut tally = vec![0usize; n_subspaces];
    let mut totals = vec![0.0; n_subspaces];
    for e in energies {
        if e.len() != n_subspaces {
            return Err(Error::shape(n_subspaces, e.len()));
        }
        tally[argmax(e.iter().copied())] += 1;
        for (t, v) in totals.iter_mut().zip(e) {
            *t += v;
        }
    }
    let mut class = 0;
    for s in 1..n_subspaces {
        if (tally[s], totals[s]) > (tally[class], totals[class]) {
            class = s;
        }
    }
    Ok(Vote {
        class,
        tally,
        totals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeFeatures {
    pub area: usize,
    pub perimeter: usize,
    pub compactness: f64,
}

/// Shape of the union of the member rectangles.
pub fn shape_features(island: &Island, grid: &PatchGrid) -> Result<ShapeFeatures> {
    let rects: Vec<Rect> = island.members.iter().map(|&i| grid.rect(i)).collect();
    mask_shape(&rects)
}

/// Area, exposed-edge perimeter and `P²/(4πA)` of a union of rectangles.
pub fn mask_shape(rects: &[Rect]) -> Result<ShapeFeatures> {
    let bbox = rects
        .iter()
        .copied()
        .reduce(|a, b| a.union(&b))
        .ok_or_else(|| Error::invalid("shape of an empty island"))?;
    let (w, h) = (bbox.x1 - bbox.x0, bbox.y1 - bbox.y0);
    let mut mask = vec![false; w * h];
    for r in rects {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                mask[(y - bbox.y0) * w + (x - bbox.x0)] = true;
            }
        }
    }
    let at = |x: isize, y: isize| {
        x >= 0
            && y >= 0
            && (x as usize) < w
            && (y as usize) < h
            && mask[y as usize * w + x as usize]
    };
    let mut area = 0;
    let mut perimeter = 0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !at(x, y) {
                continue;
            }
            area += 1;
            perimeter += [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .filter(|(dx, dy)| !at(x + dx, y + dy))
                .count();
        }
    }
    if area == 0 {
        return Err(Error::invalid("shape of an empty island"));
    }
    let compactness = (perimeter * perimeter) as f64 / (4.0 * std::f64::consts::PI * area as f64);
    Ok(ShapeFeatures {
        area,
        perimeter,
        compactness,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    pub stride: usize,
    pub uniform_priors: bool,
    pub foreground: Option<usize>,
    /// Defaults to [`default_wbc_threshold`].
    pub wbc_threshold: Option<f64>,
    /// Islands whose compactness exceeds this become [`ARTEFACT_CLASS`].
    pub compactness_bound: Option<f64>,
}

/// One line of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IslandRecord {
    pub id: usize,
    /// `[x0, y0, x1, y1]`, end-exclusive.
    pub bbox: [usize; 4],
    pub patches: usize,
    pub class: String,
    pub votes: BTreeMap<String, usize>,
    pub mean_energy: BTreeMap<String, f64>,
    pub shape: ShapeFeatures,
    pub wbc_removed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageReport {
    pub foreground: usize,
    pub wbc_threshold: f64,
    pub islands: Vec<IslandRecord>,
}

impl ImageReport {
    /// One JSON object per island, each prefixed with `image`.
    pub fn to_json_lines(&self, image: &str) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            image: &'a str,
            #[serde(flatten)]
            record: &'a IslandRecord,
        }
        let mut out = String::new();
        for record in &self.islands {
            out.push_str(
                &serde_json::to_string(&Line { image, record }).expect("report serializes"),
            );
            out.push('\n');
        }
        out
    }
}

/// Full pipeline for one image: label, form islands, filter by size, then
/// vote each island over the marked subspaces of the foreground component.
pub fn classify_image(
    model: &MoicaModel,
    tf: &WhiteningTransform,
    image: &Image,
    marking: &SubspaceMarking,
    opts: &ClassifyOptions,
) -> Result<ImageReport> {
    marking.validate(model.dim())?;
    let map = label_patches(
        model,
        tf,
        image,
        opts.stride,
        LabelOptions {
            uniform_priors: opts.uniform_priors,
            foreground: opts.foreground,
        },
    )?;
    let component = &model.components()[map.foreground()];
    let islands = form_islands(&map);
    let threshold = opts
        .wbc_threshold
        .unwrap_or_else(|| default_wbc_threshold(&islands));
    let (kept, removed) = remove_wbc(islands, threshold)?;
    let mut records = Vec::with_capacity(kept.len() + removed.len());
    for (island, wbc) in kept
        .iter()
        .map(|i| (i, false))
        .chain(removed.iter().map(|i| (i, true)))
    {
        let energies = project_subspaces(component, &map, island, marking)?;
        let vote = classify_island(&energies, marking.len())?;
        let shape = shape_features(island, map.grid())?;
        let class = if wbc {
            WBC_CLASS.to_string()
        } else if opts
            .compactness_bound
            .is_some_and(|b| shape.compactness > b)
        {
            ARTEFACT_CLASS.to_string()
        } else {
            marking.names()[vote.class].clone()
        };
        let n = energies.len() as f64;
        records.push(IslandRecord {
            id: island.id,
            bbox: [
                island.bbox.x0,
                island.bbox.y0,
                island.bbox.x1,
                island.bbox.y1,
            ],
            patches: island.members.len(),
            class,
            votes: marking.names().iter().cloned().zip(vote.tally).collect(),
            mean_energy: marking
                .names()
                .iter()
                .cloned()
                .zip(vote.totals.iter().map(|t| t / n))
                .collect(),
            shape,
            wbc_removed: wbc,
        });
    }
    records.sort_by_key(|r| r.id);
    Ok(ImageReport {
        foreground: map.foreground(),
        wbc_threshold: threshold,
        islands: records,
    })
}

const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 0.8, 0.0],
    [0.0, 0.3, 1.0],
    [1.0, 0.8, 0.0],
    [0.9, 0.0, 0.9],
    [0.0, 0.9, 0.9],
    [1.0, 0.5, 0.0],
    [0.5, 0.3, 0.1],
];

/// Draws each island's box: marked classes cycle through a fixed palette,
/// removed islands are white and artefacts black.
pub fn draw_overlay(image: &Image, report: &ImageReport, marking: &SubspaceMarking) -> Image {
    let mut out = image.clone();
    for rec in &report.islands {
        let color = match rec.class.as_str() {
            WBC_CLASS => [1.0; 3],
            ARTEFACT_CLASS => [0.0; 3],
            name => {
                let s = marking.names().iter().position(|n| n == name).unwrap_or(0);
                PALETTE[s % PALETTE.len()]
            }
        };
        let [x0, y0, x1, y1] = rec.bbox;
        let mut paint = |x: usize, y: usize| {
            for (c, v) in color.iter().enumerate() {
                out.set(x, y, c, *v);
            }
        };
        for x in x0..x1 {
            paint(x, y0);
            paint(x, y1 - 1);
        }
        for y in y0..y1 {
            paint(x0, y);
            paint(x1 - 1, y);
        }
    }
    out
}
