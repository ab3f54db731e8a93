use std::path::Path;
use std::process::{Command, Output};

use moica::classify::patch_size_for;
use moica::model_file::SavedModel;
use moica::patches::Image;
use tempfile::TempDir;

fn moica(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moica"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn islands_fixture(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("isl");
    let o = moica(&[
        "synth",
        "islands",
        "-o",
        s(&out),
        "--tiles",
        "16",
        "--islands",
        "6",
        "--wbc",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn synth_texture_defaults_write_image_and_map() {
    let dir = TempDir::new().unwrap();
    let o = moica(&["synth", "texture", "-o", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let img = Image::read_ppm(dir.path().join("texture.ppm")).unwrap();
    assert_eq!((img.width(), img.height()), (128, 128));
    let truth = std::fs::read_to_string(dir.path().join("texture_truth.txt")).unwrap();
    assert!(truth.starts_with("128 128\n"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("moica synth texture: {"));
}

#[test]
fn synth_rejects_zero_components() {
    let dir = TempDir::new().unwrap();
    let o = moica(&["synth", "texture", "-o", s(dir.path()), "--components", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = moica(&["synth", "islands", "-o", s(dir.path()), "--classes", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn synth_seed_changes_output() {
    let dir = TempDir::new().unwrap();
    let read = |seed: &str| {
        let out = dir.path().join(seed);
        assert!(moica(&[
            "synth",
            "texture",
            "-o",
            s(&out),
            "--width",
            "32",
            "--height",
            "32",
            "--seed",
            seed
        ])
        .status
        .success());
        std::fs::read(out.join("texture.ppm")).unwrap()
    };
    let (a, b, a2) = (read("1"), read("2"), read("1"));
    assert_eq!(a, a2);
    assert_ne!(a, b);
}

#[test]
fn train_requires_images() {
    let dir = TempDir::new().unwrap();
    let o = moica(&["train", "-o", s(&dir.path().join("m.bin"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("m.bin").exists());
}

#[test]
fn train_smoke_and_features_atlas() {
    let dir = TempDir::new().unwrap();
    let tex = dir.path().join("tex");
    assert!(moica(&[
        "synth",
        "texture",
        "-o",
        s(&tex),
        "--width",
        "64",
        "--height",
        "64"
    ])
    .status
    .success());
    let model = dir.path().join("m.bin");
    let trace = dir.path().join("trace.json");
    let o = moica(&[
        "train",
        s(&tex.join("texture.ppm")),
        "-o",
        s(&model),
        "--samples",
        "3000",
        "--refine-rounds",
        "2",
        "--trace",
        s(&trace),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let stderr = String::from_utf8_lossy(&o.stderr);
    let echoed = stderr
        .lines()
        .find_map(|l| l.strip_prefix("moica train: "))
        .unwrap();
    let config: serde_json::Value = serde_json::from_str(echoed).unwrap();
    assert_eq!(config["patch_size"], 8);
    assert_eq!(config["dim"], 16);
    assert_eq!(config["samples"], 3000);
    assert_eq!(config["train"]["n_components"], 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean log-likelihood per patch"));
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(trace["column_violations"], 0);

    let saved = SavedModel::load(&model).unwrap();
    assert_eq!(saved.model.dim(), 16);
    assert_eq!(
        patch_size_for(saved.whitening.as_ref().unwrap()).unwrap(),
        8
    );

    let atlas = dir.path().join("atlas.ppm");
    let o = moica(&["features", "-m", s(&model), "-o", s(&atlas), "--scale", "2"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    // 16 features: 4 per row, 16px tiles with 1px gaps.
    let img = Image::read_ppm(&atlas).unwrap();
    assert_eq!((img.width(), img.height()), (4 * 17 + 1, 4 * 17 + 1));
    let legend = std::fs::read_to_string(dir.path().join("atlas.txt")).unwrap();
    let entries: Vec<&str> = legend.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(entries.len(), 16);
    assert_eq!(entries[0], "1 1 1");
    assert_eq!(entries[5], "6 18 18");

    let o = moica(&[
        "features",
        "-m",
        s(&model),
        "-o",
        s(&atlas),
        "--component",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn classify_fixture_matches_truth() {
    let dir = TempDir::new().unwrap();
    let fx = islands_fixture(dir.path());
    let o = moica(&[
        "classify",
        "-m",
        s(&fx.join("model.bin")),
        "--marking",
        s(&fx.join("marking.txt")),
        s(&fx.join("islands.ppm")),
        "--stride",
        "8",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let records: Vec<serde_json::Value> = String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let truth = std::fs::read_to_string(fx.join("islands.txt")).unwrap();
    let mut total = 0;
    let mut hits = 0;
    for line in truth.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let rect: Vec<usize> = f[..4].iter().map(|v| v.parse().unwrap()).collect();
        let best = records
            .iter()
            .map(|r| {
                let b: Vec<usize> = r["bbox"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|v| v.as_u64().unwrap() as usize)
                    .collect();
                let w = rect[2].min(b[2]).saturating_sub(rect[0].max(b[0]));
                let h = rect[3].min(b[3]).saturating_sub(rect[1].max(b[1]));
                (w * h, r)
            })
            .filter(|(o, _)| *o > 0)
            .max_by_key(|(o, _)| *o)
            .map(|(_, r)| r);
        total += 1;
        let expected = f[4];
        let got = best.map(|r| {
            if r["wbc_removed"].as_bool().unwrap() {
                "wbc"
            } else {
                r["class"].as_str().unwrap()
            }
        });
        hits += usize::from(got == Some(expected));
    }
    assert!(total >= 7);
    assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");
}

#[test]
fn classify_without_foreground_gives_empty_report() {
    let dir = TempDir::new().unwrap();
    let fx = islands_fixture(dir.path());
    let saved = SavedModel::load(fx.join("model.bin")).unwrap();
    let tf = saved.whitening.unwrap();
    let p = patch_size_for(&tf).unwrap();
    // Every patch equals the whitening mean, i.e. plain background.
    let tile = Image::from_patch_vector(tf.mean().as_slice(), p).unwrap();
    let mut blank = Image::filled(4 * p, 4 * p, [0.0; 3]).unwrap();
    for ty in 0..4 {
        for tx in 0..4 {
            blank.blit(&tile, tx * p, ty * p);
        }
    }
    let img = dir.path().join("blank.ppm");
    blank.write_ppm(&img).unwrap();
    let report = dir.path().join("r.jsonl");
    let o = moica(&[
        "classify",
        "-m",
        s(&fx.join("model.bin")),
        "--marking",
        s(&fx.join("marking.txt")),
        s(&img),
        "--stride",
        &p.to_string(),
        "--report",
        s(&report),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(std::fs::read_to_string(&report).unwrap(), "");
}

#[test]
fn classify_data_errors() {
    let dir = TempDir::new().unwrap();
    let fx = islands_fixture(dir.path());
    let bad_marking = dir.path().join("bad.txt");
    std::fs::write(&bad_marking, "ring: 1 2 99\n").unwrap();
    let args = |model: &Path, marking: &Path, image: &Path| {
        moica(&[
            "classify",
            "-m",
            s(model),
            "--marking",
            s(marking),
            s(image),
        ])
        .status
        .code()
    };
    let (model, marking, image) = (
        fx.join("model.bin"),
        fx.join("marking.txt"),
        fx.join("islands.ppm"),
    );
    assert_eq!(args(&model, &bad_marking, &image), Some(2));
    assert_eq!(
        args(&model, &marking, &dir.path().join("missing.ppm")),
        Some(2)
    );
    let corrupt = dir.path().join("corrupt.bin");
    let bytes = std::fs::read(&model).unwrap();
    std::fs::write(&corrupt, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(args(&corrupt, &marking, &image), Some(2));
}
