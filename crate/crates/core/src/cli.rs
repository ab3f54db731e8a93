//! The `moica` command line: `train`, `features`, `classify` and `synth`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::classify::{
    classify_image, minority_component, patch_size_for, ClassifyOptions, SubspaceMarking,
};
use crate::error::{Error, Result};
use crate::manifold::LbfgsConfig;
use crate::model_file::SavedModel;
use crate::moica::{train, TrainConfig, TrainTrace};
use crate::patches::{sample_random_patches, Image};
use crate::synth::{gen_island_scene, gen_texture_image, IslandSceneConfig, RegionMask, SynthSpec};
use crate::whitening::{
    feature_image, fit_whitening, Regularization, WhiteningTransform, DEFAULT_RELATIVE_EPS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "moica",
    version,
    about = "Mixture-of-ICA patch models and stained-object classification"
)]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit whitening and a MoICA model to random patches of the input images.
    Train(TrainArgs),
    /// Render the features of one component as a tiled atlas.
    Features(FeaturesArgs),
    /// Label patches, form islands and classify them by marked subspaces.
    Classify(ClassifyArgs),
    /// Write synthetic fixtures with ground truth.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// patch 8, d = 16, 50k patches, K = 2
    Desk,
    /// patch 32, d = 256, 10⁶ patches, K = 2
    Paper,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Input images (binary PPM).
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Whitened dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of random training patches.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub components: Option<u64>,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub gaussians: u64,
    /// L-BFGS iterations per block.
    #[arg(long, default_value_t = 5)]
    pub block_iters: usize,
    #[arg(long, default_value_t = 10)]
    pub memory: usize,
    #[arg(long, default_value_t = 5000)]
    pub minibatch: usize,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long)]
    pub refine_rounds: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    pub refine_tol: f64,
    /// Whitening regularizer relative to the largest eigenvalue.
    #[arg(long, default_value_t = DEFAULT_RELATIVE_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the training trace as JSON.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(short, long)]
    pub model: PathBuf,
    /// Atlas image (PPM).
    #[arg(short, long)]
    pub out: PathBuf,
    /// Index legend; defaults to the atlas path with a `.txt` extension.
    #[arg(long)]
    pub legend: Option<PathBuf>,
    /// Component to show; defaults to the one with the smallest prior.
    #[arg(long)]
    pub component: Option<usize>,
    /// Pixel magnification of each tile.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=64))]
    pub scale: u64,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(short, long)]
    pub model: PathBuf,
    /// Marking file: one `name: i1 i2 …` line per subspace, 1-based.
    #[arg(long)]
    pub marking: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    /// Grid stride; defaults to half the patch size.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Use uniform component priors for the patch posterior.
    #[arg(long)]
    pub uniform_priors: bool,
    /// Foreground component; defaults to the one with the least posterior mass.
    #[arg(long)]
    pub foreground: Option<usize>,
    /// Bounding-box area above which islands are removed; defaults to 4× the median.
    #[arg(long)]
    pub wbc_threshold: Option<f64>,
    /// Islands more elongated than this compactness become `artefact`.
    #[arg(long)]
    pub compactness_bound: Option<f64>,
    /// Report path (JSON Lines); stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Directory for per-image overlays with island boxes.
    #[arg(long)]
    pub overlay_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(subcommand)]
    pub kind: SynthKind,
}

#[derive(Debug, Subcommand)]
pub enum SynthKind {
    /// Vertical stripes of textures, one per component.
    Texture(TextureArgs),
    /// Islands from marked subspaces, with the generating model and marking.
    Islands(IslandArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TextureArgs {
    #[arg(short, long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub components: u64,
    /// Source scale ratio between neighbouring components.
    #[arg(long, default_value_t = 3.0)]
    pub contrast: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct IslandArgs {
    #[arg(short, long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub classes: u64,
    /// Scene size in tiles per side.
    #[arg(long, default_value_t = 32)]
    pub tiles: usize,
    #[arg(long, default_value_t = 24)]
    pub islands: usize,
    #[arg(long, default_value_t = 2)]
    pub wbc: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Everything `train` needs, after presets and overrides are applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRun {
    pub images: Vec<PathBuf>,
    pub out: PathBuf,
    pub preset: Preset,
    pub patch_size: usize,
    pub dim: usize,
    pub samples: usize,
    pub eps: f64,
    pub train: TrainConfig,
}

impl TrainArgs {
    pub fn resolve(&self) -> TrainRun {
        let (patch, dim, samples, rounds) = match self.preset {
            Preset::Desk => (8, 16, 50_000, 10),
            Preset::Paper => (32, 256, 1_000_000, 30),
        };
        TrainRun {
            images: self.images.clone(),
            out: self.out.clone(),
            preset: self.preset,
            patch_size: self.patch_size.unwrap_or(patch),
            dim: self.dim.unwrap_or(dim),
            samples: self.samples.unwrap_or(samples),
            eps: self.eps,
            train: TrainConfig {
                n_components: self.components.unwrap_or(2) as usize,
                gaussians_per_source: self.gaussians as usize,
                lbfgs: LbfgsConfig {
                    memory: self.memory,
                    max_iters: self.block_iters,
                    grad_tol: 1e-7,
                    ..LbfgsConfig::default()
                },
                minibatch_size: self.minibatch,
                epochs: self.epochs,
                refine_rounds: self.refine_rounds.unwrap_or(rounds),
                refine_tol: self.refine_tol,
                seed: self.seed,
            },
        }
    }
}

#[derive(Debug)]
pub struct Trained {
    pub saved: SavedModel,
    pub trace: TrainTrace,
}

/// Samples patches, fits the whitening, and trains the model behind it.
pub fn train_on_images(images: &[Image], run: &TrainRun) -> Result<Trained> {
    let x = sample_random_patches(images, run.samples, run.patch_size, run.train.seed)?;
    let tf = fit_whitening(&x, run.dim, Regularization::RelativeToMax(run.eps))?;
    info!(
        "whitened {} patches to d = {} ({:.2}% of variance)",
        x.ncols(),
        tf.output_dim(),
        100.0 * tf.variance_captured()
    );
    let y = tf.whiten_all(&x)?;
    drop(x);
    let trained = train(&y, &run.train)?;
    Ok(Trained {
        saved: SavedModel {
            model: trained.model,
            whitening: Some(tf),
        },
        trace: trained.trace,
    })
}

/// Tiles the dewhitened columns of `mixing` left to right, top to bottom,
/// `ceil(√L)` per row, with a one-pixel white gap. Returns the atlas and
/// the top-left corner of each tile.
pub fn render_atlas(
    tf: &WhiteningTransform,
    mixing: &DMatrix<f64>,
    scale: usize,
) -> Result<(Image, Vec<(usize, usize)>)> {
    let p = patch_size_for(tf)?;
    let n = mixing.ncols();
    if n == 0 || scale == 0 {
        return Err(Error::invalid(
            "atlas needs at least one feature and a positive scale",
        ));
    }
    let per_row = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(per_row);
    let tile = p * scale;
    let (w, h) = (per_row * (tile + 1) + 1, rows * (tile + 1) + 1);
    let mut atlas = Image::filled(w, h, [1.0; 3])?;
    let mut corners = Vec::with_capacity(n);
    for i in 0..n {
        let feature = feature_image(tf, mixing.column(i).as_slice(), p)?;
        let (x0, y0) = (
            1 + (i % per_row) * (tile + 1),
            1 + (i / per_row) * (tile + 1),
        );
        for y in 0..tile {
            for x in 0..tile {
                for c in 0..3 {
                    atlas.set(x0 + x, y0 + y, c, feature.get(x / scale, y / scale, c));
                }
            }
        }
        corners.push((x0, y0));
    }
    Ok((atlas, corners))
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) | Error::Singular(_) | Error::DegenerateStep { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn echo<T: Serialize>(command: &str, config: &T) {
    eprintln!(
        "moica {command}: {}",
        serde_json::to_string(config).expect("config serializes")
    );
}

fn read_images(paths: &[PathBuf]) -> Result<Vec<Image>> {
    paths
        .iter()
        .map(|p| {
            Image::read_ppm(p).map_err(|e| match e {
                Error::Io(io) => Error::Format {
                    what: "image",
                    reason: format!("{}: {io}", p.display()),
                },
                other => other,
            })
        })
        .collect()
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let run = args.resolve();
    echo("train", &run);
    let images = read_images(&run.images)?;
    let trained = train_on_images(&images, &run)?;
    trained.saved.save(&run.out)?;
    if let Some(path) = &args.trace {
        fs::write(
            path,
            serde_json::to_string_pretty(&trained.trace).expect("trace serializes"),
        )?;
    }
    let t = &trained.trace;
    let final_nll = t
        .final_value()
        .or(t.minibatch_values.last().copied())
        .unwrap_or(f64::NAN);
    println!("model written to {}", run.out.display());
    println!("mean log-likelihood per patch: {:.6}", -final_nll);
    println!(
        "refinement: {} rounds, {} accepted iterates, monotone = {}, final gradient norm = {:.3e}",
        t.grad_norms.len(),
        t.refine_values.len(),
        t.is_monotone(),
        t.grad_norms.last().copied().unwrap_or(f64::NAN)
    );
    println!(
        "max column-norm deviation = {:.3e} over {} iterates; line-search failures = {}",
        t.max_column_deviation, t.iterates_checked, t.line_search_failures
    );
    println!("component priors: {:?}", trained.saved.model.priors());
    Ok(())
}

fn load_with_whitening(path: &Path) -> Result<(SavedModel, WhiteningTransform)> {
    let saved = SavedModel::load(path)?;
    let tf = saved
        .whitening
        .clone()
        .ok_or_else(|| Error::format("model file", "no whitening transform stored"))?;
    Ok((saved, tf))
}

fn cmd_features(args: &FeaturesArgs) -> Result<()> {
    let (saved, tf) = load_with_whitening(&args.model)?;
    let model = &saved.model;
    let priors = DMatrix::from_row_slice(1, model.n_components(), model.priors());
    let k = args
        .component
        .unwrap_or_else(|| minority_component(&priors));
    if k >= model.n_components() {
        return Err(Error::invalid(format!(
            "component {k} out of range for K = {}",
            model.n_components()
        )));
    }
    let legend_path = args
        .legend
        .clone()
        .unwrap_or_else(|| args.out.with_extension("txt"));
    echo(
        "features",
        &serde_json::json!({
            "model": args.model, "out": args.out, "legend": legend_path,
            "component": k, "scale": args.scale,
        }),
    );
    let mixing = model.components()[k].mixing().as_matrix();
    let (atlas, corners) = render_atlas(&tf, mixing, args.scale as usize)?;
    atlas.write_ppm(&args.out)?;
    let tile = patch_size_for(&tf)? * args.scale as usize;
    let mut legend = format!("# component {k}; {tile}px tiles; index x y\n");
    for (i, (x, y)) in corners.iter().enumerate() {
        writeln!(legend, "{} {x} {y}", i + 1).unwrap();
    }
    fs::write(&legend_path, legend)?;
    println!(
        "{} features of component {k} written to {}",
        corners.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_classify(args: &ClassifyArgs) -> Result<()> {
    let (saved, tf) = load_with_whitening(&args.model)?;
    let marking = SubspaceMarking::read(&args.marking)?;
    marking.validate(saved.model.dim())?;
    let p = patch_size_for(&tf)?;
    let opts = ClassifyOptions {
        stride: args.stride.unwrap_or((p / 2).max(1)),
        uniform_priors: args.uniform_priors,
        foreground: args.foreground,
        wbc_threshold: args.wbc_threshold,
        compactness_bound: args.compactness_bound,
    };
    echo(
        "classify",
        &serde_json::json!({
            "model": args.model, "marking": args.marking, "images": args.images,
            "options": opts, "report": args.report, "overlay_dir": args.overlay_dir,
        }),
    );
    let images = read_images(&args.images)?;
    let mut out = String::new();
    for (path, image) in args.images.iter().zip(&images) {
        let report = classify_image(&saved.model, &tf, image, &marking, &opts)?;
        info!(
            "{}: {} islands, foreground component {}",
            path.display(),
            report.islands.len(),
            report.foreground
        );
        out.push_str(&report.to_json_lines(&path.display().to_string()));
        if let Some(dir) = &args.overlay_dir {
            fs::create_dir_all(dir)?;
            let stem = path
                .file_stem()
                .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            crate::classify::draw_overlay(image, &report, &marking)
                .write_ppm(dir.join(format!("{stem}.overlay.ppm")))?;
        }
    }
    match &args.report {
        Some(path) => fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    match &args.kind {
        SynthKind::Texture(a) => {
            echo("synth texture", a);
            let k = a.components as usize;
            let spec = SynthSpec::texture(a.patch_size, k, a.contrast, a.seed)?;
            let mask = RegionMask::vertical_stripes(a.width, a.height, k);
            let tex = gen_texture_image(&spec, &mask, a.patch_size)?;
            fs::create_dir_all(&a.out_dir)?;
            tex.image.write_ppm(a.out_dir.join("texture.ppm"))?;
            fs::write(a.out_dir.join("texture_truth.txt"), tex.truth.to_text())?;
            println!("texture fixture written to {}", a.out_dir.display());
        }
        SynthKind::Islands(a) => {
            echo("synth islands", a);
            let cfg = IslandSceneConfig {
                patch_size: a.patch_size,
                dim: a.dim,
                n_classes: a.classes as usize,
                tiles_x: a.tiles,
                tiles_y: a.tiles,
                n_islands: a.islands,
                n_wbc: a.wbc,
                seed: a.seed,
                ..IslandSceneConfig::default()
            };
            let scene = gen_island_scene(&cfg)?;
            fs::create_dir_all(&a.out_dir)?;
            scene.image.write_ppm(a.out_dir.join("islands.ppm"))?;
            fs::write(
                a.out_dir.join("islands_truth.txt"),
                scene.label_map().to_text(),
            )?;
            fs::write(a.out_dir.join("islands.txt"), scene.islands_text())?;
            fs::write(a.out_dir.join("marking.txt"), scene.marking.to_string())?;
            SavedModel {
                model: scene.model.clone(),
                whitening: Some(scene.whitening.clone()),
            }
            .save(a.out_dir.join("model.bin"))?;
            println!("island fixture written to {}", a.out_dir.display());
        }
    }
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Features(a) => cmd_features(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_island_scene, IslandSceneConfig};

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("moica").chain(args.iter().copied()))
    }

    #[test]
    fn presets_and_overrides() {
        let Command::Train(t) = parse(&["train", "a.ppm", "-o", "m.bin"]).unwrap().command else {
            panic!()
        };
        let r = t.resolve();
        assert_eq!(
            (r.patch_size, r.dim, r.samples, r.train.n_components),
            (8, 16, 50_000, 2)
        );
        let Command::Train(t) = parse(&[
            "train", "a.ppm", "-o", "m.bin", "--preset", "paper", "--dim", "64",
        ])
        .unwrap()
        .command
        else {
            panic!()
        };
        let r = t.resolve();
        assert_eq!((r.patch_size, r.dim, r.samples), (32, 64, 1_000_000));
    }

    #[test]
    fn usage_errors() {
        assert!(parse(&["train", "-o", "m.bin"]).is_err());
        assert!(parse(&["synth", "texture", "-o", "d", "--components", "0"]).is_err());
        assert_eq!(run(["moica", "train", "-o", "m.bin"]), EXIT_USAGE);
        assert_eq!(run(["moica", "--help"]), EXIT_OK);
    }

    fn small_scene() -> crate::synth::IslandScene {
        gen_island_scene(&IslandSceneConfig {
            patch_size: 2,
            dim: 6,
            n_classes: 2,
            tiles_x: 8,
            tiles_y: 8,
            n_islands: 2,
            n_wbc: 0,
            ..IslandSceneConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn atlas_layout() {
        let scene = small_scene();
        let a = scene.model.components()[1].mixing().as_matrix();
        let (atlas, corners) = render_atlas(&scene.whitening, a, 3).unwrap();
        // 6 features → 3 per row, 2 rows of 6px tiles with 1px gaps.
        assert_eq!(corners.len(), 6);
        assert_eq!((atlas.width(), atlas.height()), (3 * 7 + 1, 2 * 7 + 1));
        assert_eq!(corners[4], (8, 8));
    }

    #[test]
    fn atlas_tiles_follow_columns() {
        let scene = small_scene();
        let a = scene.model.components()[1].mixing().as_matrix().clone();
        let (base, corners) = render_atlas(&scene.whitening, &a, 1).unwrap();
        let mut b = a.clone();
        b[(0, 2)] += 0.5;
        b[(3, 2)] -= 0.3;
        let (pert, _) = render_atlas(&scene.whitening, &b, 1).unwrap();
        let tile = 2;
        for y in 0..base.height() {
            for x in 0..base.width() {
                let inside = corners.iter().position(|&(x0, y0)| {
                    (x0..x0 + tile).contains(&x) && (y0..y0 + tile).contains(&y)
                });
                let same = (0..3).all(|c| base.get(x, y, c) == pert.get(x, y, c));
                if inside != Some(2) {
                    assert!(same, "pixel {x},{y} outside tile 3 changed");
                }
            }
        }
        let (x0, y0) = corners[2];
        assert!((0..tile).any(|d| (0..3)
            .any(|c| base.get(x0 + d, y0, c) != pert.get(x0 + d, y0, c))
            || (0..3).any(|c| base.get(x0 + d, y0 + 1, c) != pert.get(x0 + d, y0 + 1, c))));
    }
}
