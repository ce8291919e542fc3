use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mf3d_core::camera::{look_at, Intrinsics};
use mf3d_core::capture::{CalibEdge, CalibGraph, DepthFrame, CALIB_FILE};
use mf3d_core::fusion::{LabelsJson, TextEmbeddingSet};
use mf3d_core::{Model, ModelKind, RigidTransform, Vec3};
use sha2::{Digest, Sha256};

fn mf3d(args: &[&str]) -> Output {
    mf3d_env(args, &[])
}

fn mf3d_env(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mf3d"));
    cmd.args(args).env_remove("MF3D_CACHE_DIR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// File name to sha256 for every file below `dir`.
fn tree_hashes(dir: &Path) -> BTreeMap<PathBuf, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), hex::encode(Sha256::digest(bytes)));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// A small sphere2 fixture: 4 views at 128x128 via a config file.
fn small_fixture(root: &Path) -> PathBuf {
    let cfg = root.join("small.toml");
    std::fs::write(
        &cfg,
        "[rig]\nviews = 4\n[rig.intrinsics]\nfx = 128.0\nfy = 128.0\ncx = 64.0\ncy = 64.0\nwidth = 128\nheight = 128\n",
    )
    .unwrap();
    let fx = root.join("fx");
    ok(&mf3d(&["synth", "sphere2", "--config", s(&cfg), "--out", s(&fx)]));
    fx
}

#[test]
fn synth_writes_every_artifact_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["sphere2", "capsule5", "occluder"] {
        let cfg = dir.path().join("tiny.toml");
        std::fs::write(&cfg, "[rig]\nviews = 2\n[rig.intrinsics]\nfx = 64.0\nfy = 64.0\ncx = 32.0\ncy = 32.0\nwidth = 64\nheight = 64\n").unwrap();
        let a = dir.path().join(format!("{kind}-a"));
        let b = dir.path().join(format!("{kind}-b"));
        ok(&mf3d(&["synth", kind, "--config", s(&cfg), "--out", s(&a)]));
        ok(&mf3d(&["synth", kind, "--config", s(&cfg), "--out", s(&b), "--threads", "1"]));
        for f in ["model.ply", "gt.json", "rig.json", "prompts.json", "text_embeddings.f32", "bundle/manifest.json", "bundle/embeddings.f32"] {
            assert!(a.join(f).exists(), "{kind}: {f} missing");
        }
        assert_eq!(tree_hashes(&a), tree_hashes(&b), "{kind} differs between runs");
    }
    let text = TextEmbeddingSet::read(&dir.path().join("sphere2-a")).unwrap();
    assert_eq!(text.len(), 2);
}

#[test]
fn unknown_synth_kind_is_a_usage_error() {
    let out = mf3d(&["synth", "torus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn render_file_census_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let model = fx.join("model.ply");
    let (a, b) = (dir.path().join("ra"), dir.path().join("rb"));
    ok(&mf3d(&["render", "--model", s(&model), "--views", "2", "--out", s(&a)]));
    ok(&mf3d(&["render", "--model", s(&model), "--views", "2", "--out", s(&b), "--threads", "3"]));
    let files: Vec<String> = tree_hashes(&a).keys().map(|p| p.display().to_string()).collect();
    assert_eq!(
        files,
        [
            "renders/view1.dpth",
            "renders/view1.pidx",
            "renders/view1.png",
            "renders/view2.dpth",
            "renders/view2.pidx",
            "renders/view2.png",
            "rig.json"
        ]
    );
    assert_eq!(tree_hashes(&a), tree_hashes(&b));
}

#[test]
fn missing_model_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-model.ply");
    let out = mf3d(&["render", "--model", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn malformed_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "tau = \"high\"\n").unwrap();
    assert_eq!(mf3d(&["synth", "sphere2", "--config", s(&cfg)]).status.code(), Some(3));

    let fx = small_fixture(dir.path());
    let emb = fx.join("bundle/embeddings.f32");
    let mut bytes = std::fs::read(&emb).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&emb, bytes).unwrap();
    let out = mf3d(&[
        "segment",
        "--model",
        s(&fx.join("model.ply")),
        "--bundle",
        s(&fx.join("bundle")),
        "--prompts",
        s(&fx),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

fn run_segment(fx: &Path, prompts: &Path, out: &Path, cache: &Path, extra: &[&str]) -> (LabelsJson, serde_json::Value) {
    let model = fx.join("model.ply");
    let bundle = fx.join("bundle");
    let mut args = vec![
        "segment",
        "--model",
        s(&model),
        "--bundle",
        s(&bundle),
        "--prompts",
        s(prompts),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&mf3d_env(&args, &[("MF3D_CACHE_DIR", cache)]));
    let labels = LabelsJson::read(&out.join("labels.json")).unwrap();
    let timing: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("timing.json")).unwrap()).unwrap();
    (labels, timing)
}

#[test]
fn warm_runs_match_cold_runs_and_skip_mask_reads() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    // A second prompt set: reversed order under new names.
    let a = TextEmbeddingSet::read(&fx).unwrap();
    let b = TextEmbeddingSet::new(
        vec!["southern".into(), "northern".into()],
        a.permuted(&[1, 0]).unwrap().embeddings().to_owned(),
    )
    .unwrap();
    let b_dir = dir.path().join("prompts-b");
    b.write(&b_dir).unwrap();

    let cache = dir.path().join("cache");
    let (_, t1) = run_segment(&fx, &fx, &dir.path().join("o1"), &cache, &[]);
    assert_eq!(t1["cache"], "cold");
    assert!(t1["rle_reads"].as_u64().unwrap() > 0);
    let (warm, t2) = run_segment(&fx, &b_dir, &dir.path().join("o2"), &cache, &[]);
    assert_eq!(t2["cache"], "warm");
    assert_eq!(t2["rle_reads"], 0);
    for key in ["lift_ms", "classify_ms", "fuse_ms", "total_ms"] {
        assert!(t2[key].as_f64().is_some(), "timing lacks {key}");
    }
    let (cold, t3) = run_segment(&fx, &b_dir, &dir.path().join("o3"), &dir.path().join("fresh"), &[]);
    assert_eq!(t3["cache"], "cold");
    assert_eq!(warm, cold);
    assert_eq!(
        std::fs::read(dir.path().join("o2/segmented.ply")).unwrap(),
        std::fs::read(dir.path().join("o3/segmented.ply")).unwrap()
    );

    // A damaged cache entry is replaced, not trusted.
    let entry = std::fs::read_dir(&cache)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "mskc"))
        .unwrap();
    let mut bytes = std::fs::read(&entry).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&entry, bytes).unwrap();
    let (rebuilt, t4) = run_segment(&fx, &b_dir, &dir.path().join("o4"), &cache, &[]);
    assert_eq!(t4["cache"], "rebuilt");
    assert_eq!(rebuilt, cold);
    let (_, t5) = run_segment(&fx, &b_dir, &dir.path().join("o5"), &cache, &[]);
    assert_eq!(t5["cache"], "warm");
}

#[test]
fn tau_flag_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "tau = 0.9\nnormalization = \"none\"\n").unwrap();
    let cache = dir.path().join("cache");
    let (from_file, _) = run_segment(&fx, &fx, &dir.path().join("o1"), &cache, &["--config", s(&cfg)]);
    assert_eq!(from_file.tau, 0.9);
    let (from_flag, _) = run_segment(&fx, &fx, &dir.path().join("o2"), &cache, &["--config", s(&cfg), "--tau", "0.1"]);
    assert_eq!(from_flag.tau, 0.1);
    let (default, _) = run_segment(&fx, &fx, &dir.path().join("o3"), &cache, &[]);
    assert_eq!(default.tau, 0.2);
}

#[test]
fn eval_scores_perfect_and_pipeline_labels() {
    let dir = tempfile::tempdir().unwrap();
    let fx = small_fixture(dir.path());
    let gt = fx.join("gt.json");
    let gt_doc = mf3d_core::eval::GroundTruth::read(&gt).unwrap();

    let perfect = dir.path().join("perfect.json");
    LabelsJson {
        tau: 0.2,
        prompts: gt_doc.prompts.clone(),
        labels: gt_doc.labels.clone(),
        views: None,
        coverage: None,
    }
    .write(&perfect)
    .unwrap();
    let out = dir.path().join("e1");
    ok(&mf3d(&["eval", "--labels", s(&perfect), "--gt", s(&gt), "--out", s(&out)]));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv, "views,OA,mAcc,mIoU\n,100.00,100.00,100.00\n");

    let (_, _) = run_segment(&fx, &fx, &dir.path().join("seg"), &dir.path().join("cache"), &[]);
    let out = dir.path().join("e2");
    ok(&mf3d(&["eval", "--labels", s(&dir.path().join("seg/labels.json")), "--gt", s(&gt), "--out", s(&out)]));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["covered"]["OA"], 100.0);
    assert_eq!(m["covered"]["mIoU"], 100.0);
    assert!(m["OA"].as_f64().unwrap() < 100.0);

    let missing = dir.path().join("nope.json");
    let out = mf3d(&["eval", "--labels", s(&perfect), "--gt", s(&missing), "--out", s(&dir.path().join("e3"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
}

#[test]
fn ablation_csv_has_fixed_columns_and_improves_with_views() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "[rig.intrinsics]\nfx = 256.0\nfy = 256.0\ncx = 128.0\ncy = 128.0\nwidth = 256\nheight = 256\n").unwrap();
    let out = dir.path().join("ab");
    ok(&mf3d(&["ablate-views", "--synth", "occluder", "--view-counts", "2,8", "--config", s(&cfg), "--out", s(&out)]));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "views,OA,mAcc,mIoU");
    assert_eq!(lines.len(), 3);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&std::fs::read(out.join("ablation.json")).unwrap()).unwrap();
    let frac = |i: usize| rows[i]["covered_fraction"].as_f64().unwrap();
    assert!(frac(1) > frac(0));
    assert_eq!(rows[0]["covered_metrics"]["OA"], 100.0);
    assert_eq!(rows[1]["covered_metrics"]["OA"], 100.0);
}

// Capture fixtures: a cube of half-size 0.2 seen by cameras on a ring.

const CUBE_HALF: f64 = 0.2;

/// Distance along `dir` from `origin` to the cube surface.
fn ray_cube(origin: Vec3, dir: Vec3) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i].abs() > CUBE_HALF {
                return None;
            }
            continue;
        }
        let a = (-CUBE_HALF - origin[i]) / dir[i];
        let b = (CUBE_HALF - origin[i]) / dir[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

fn cube_frame(id: &str, k: Intrinsics, cam_to_world: &RigidTransform) -> DepthFrame {
    let eye = cam_to_world.apply(&Vec3::zeros());
    let depth = (0..k.pixel_count())
        .map(|i| {
            let (u, v) = ((i % k.width as usize) as f64, (i / k.width as usize) as f64);
            let ray_cam = Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            let dir = cam_to_world.rotate(&ray_cam);
            // Along a ray with camera z = 1 per unit, the hit distance is the depth.
            ray_cube(eye, dir).map_or(0.0, |t| t as f32)
        })
        .collect();
    DepthFrame::new(id, k, depth, vec![200; k.pixel_count() * 3]).unwrap()
}

fn ring_poses(n: usize, radius: f64) -> Vec<RigidTransform> {
    (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let eye = Vec3::new(radius * a.sin(), 0.15, radius * a.cos());
            look_at(&eye, &Vec3::zeros(), &Vec3::y()).unwrap().inverse()
        })
        .collect()
}

#[test]
fn capture_single_frame_keeps_every_valid_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let k = Intrinsics::new(60.0, 60.0, 31.5, 23.5, 64, 48).unwrap();
    let pose = &ring_poses(1, 0.9)[0];
    let frame = cube_frame("cam0", k, pose);
    let valid = frame.depth().iter().filter(|&&d| d > 0.0).count();
    assert!(valid > 100);
    frame.write(&dir.path().join("cam0")).unwrap();
    CalibGraph { edges: vec![], world: "cam0".into() }.write(&dir.path().join(CALIB_FILE)).unwrap();
    let out = dir.path().join("o");
    ok(&mf3d(&["capture", "--input", s(dir.path()), "--min-neighbors", "0", "--out", s(&out)]));
    let Model::Points(cloud) = Model::load(out.join("cloud.ply"), ModelKind::Points).unwrap() else {
        panic!("expected points");
    };
    assert_eq!(cloud.len(), valid);
}

#[test]
fn capture_ring_reproduces_the_cube() {
    let dir = tempfile::tempdir().unwrap();
    let k = Intrinsics::new(60.0, 60.0, 31.5, 23.5, 64, 48).unwrap();
    let poses = ring_poses(4, 0.9);
    let ids: Vec<String> = (0..4).map(|i| format!("cam{i}")).collect();
    let mut valid = 0;
    for (id, pose) in ids.iter().zip(&poses) {
        let f = cube_frame(id, k, pose);
        valid += f.depth().iter().filter(|&&d| d > 0.0).count();
        f.write(&dir.path().join(id)).unwrap();
    }
    let edges = (0..4)
        .map(|i| {
            let j = (i + 1) % 4;
            CalibEdge {
                a: ids[i].clone(),
                b: ids[j].clone(),
                a_to_b: poses[j].inverse().compose(&poses[i]),
            }
        })
        .collect();
    CalibGraph { edges, world: "cam0".into() }.write(&dir.path().join(CALIB_FILE)).unwrap();
    let out = dir.path().join("o");
    ok(&mf3d(&["capture", "--input", s(dir.path()), "--min-neighbors", "0", "--out", s(&out)]));
    let Model::Points(cloud) = Model::load(out.join("cloud.ply"), ModelKind::Points).unwrap() else {
        panic!("expected points");
    };
    assert_eq!(cloud.len(), valid);
    // Output is in cam0's frame; map back to the cube's frame.
    let mut worst = 0.0f64;
    for p in cloud.positions() {
        let q = poses[0].apply(p);
        let on_surface = q.x.abs().max(q.y.abs()).max(q.z.abs());
        worst = worst.max((on_surface - CUBE_HALF).abs());
    }
    assert!(worst < 1e-6, "largest distance from the cube surface {worst:.2e}");
}

#[test]
fn capture_of_empty_depth_writes_an_empty_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let k = Intrinsics::new(60.0, 60.0, 15.5, 11.5, 32, 24).unwrap();
    DepthFrame::new("cam0", k, vec![0.0; k.pixel_count()], vec![0; k.pixel_count() * 3])
        .unwrap()
        .write(&dir.path().join("cam0"))
        .unwrap();
    CalibGraph { edges: vec![], world: "cam0".into() }.write(&dir.path().join(CALIB_FILE)).unwrap();
    let out_dir = dir.path().join("o");
    let out = mf3d(&["capture", "--input", s(dir.path()), "--out", s(&out_dir)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("warn"));
    let Model::Points(cloud) = Model::load(out_dir.join("cloud.ply"), ModelKind::Points).unwrap() else {
        panic!("expected points");
    };
    assert!(cloud.is_empty());
}

#[test]
fn capture_without_calibration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = mf3d(&["capture", "--input", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(CALIB_FILE));
}
