//! Compiles a small C program against the generated header and the static
//! library, then runs it on a model file.

use std::path::PathBuf;
use std::process::Command;

use moica::model_file::SavedModel;
use moica::synth::{gen_island_scene, IslandSceneConfig};

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libmoica_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());

    let dir = std::env::temp_dir().join(format!("moica-ffi-c-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let exe = dir.join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c_smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());

    let scene = gen_island_scene(&IslandSceneConfig {
        patch_size: 2,
        dim: 4,
        n_classes: 2,
        tiles_x: 8,
        tiles_y: 8,
        n_islands: 2,
        n_wbc: 0,
        ..IslandSceneConfig::default()
    })
    .unwrap();
    let model = dir.join("m.bin");
    SavedModel {
        model: scene.model,
        whitening: Some(scene.whitening),
    }
    .save(&model)
    .unwrap();
    let out = Command::new(&exe).arg(&model).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("d=4 k=2"));
    std::fs::remove_dir_all(&dir).unwrap();
}
