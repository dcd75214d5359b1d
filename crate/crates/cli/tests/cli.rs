use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hpformer::fuse_io::{save_raster, GridSpec, PointCloud, RasterGrid};

fn hpformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpformer"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hpformer(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn grid(width: usize, height: usize) -> GridSpec {
    GridSpec {
        origin: [0.0, 0.0],
        cell: 1.0,
        width,
        height,
    }
}

/// Two clusters of 40 points at x < 4 (class 1) and x > 6 (class 2), with one band
/// that tracks the class.
fn tiny_scene(dir: &Path) {
    let mut coords = Vec::new();
    let mut band = Vec::new();
    let mut labels = Vec::new();
    for i in 0..80 {
        let cls = if i < 40 { 1 } else { 2 };
        let x = if cls == 1 { 0.5 } else { 6.5 } + (i % 7) as f64 * 0.5;
        let y = (i / 7 % 6) as f64 * 1.5 + 0.2;
        coords.push([x, y, cls as f64 + (i % 3) as f64 * 0.1]);
        band.push(cls as f64 * 0.4 + (i % 5) as f64 * 0.01);
        labels.push(cls);
    }
    let mut c = PointCloud::new(coords);
    c.append_bands(&band, vec!["band_0".into()]).unwrap();
    c.labels = Some(labels);
    c.save(&dir.join("scene.csv")).unwrap();
    let cfg = "[data]\ncloud = \"scene.csv\"\nvalidate_on_train = true\n\
               [blocks]\nsize = 20.0\nstride = 20.0\n\
               [model]\nwidths = [4, 4, 8, 8]\nk = 4\nn_input = 32\nnum_classes = 3\nbands = 1\n\
               [train]\nepochs = 3\nbatch = 2\nlr = 0.01\nseed = 7\n";
    fs::write(dir.join("config.toml"), cfg).unwrap();
    fs::write(
        dir.join("ground.toml"),
        "ground = [0, 1]\nnon_ground = [2]\n",
    )
    .unwrap();
}

fn pipeline(dir: &Path, out: &Path) {
    ok(&[
        "train",
        "--config",
        s(&dir.join("config.toml")),
        "--out-dir",
        s(out),
    ]);
    let ckpt = out.join("model.hpf");
    ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--cloud",
        s(&dir.join("scene.csv")),
        "--out",
        s(&out.join("pred.csv")),
    ]);
    ok(&[
        "project",
        "--pred-cloud",
        s(&out.join("pred.csv")),
        "--grid",
        "0,0,1,12,10",
        "--ground-map",
        s(&dir.join("ground.toml")),
        "--out",
        s(&out.join("pred.asc")),
    ]);
    ok(&[
        "export-features",
        "--checkpoint",
        s(&ckpt),
        "--cloud",
        s(&dir.join("scene.csv")),
        "--out",
        s(&out.join("features.csv")),
    ]);
}

#[test]
fn train_predict_project_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_scene(dir);
    let (a, b) = (dir.join("a"), dir.join("b"));
    pipeline(dir, &a);
    pipeline(dir, &b);
    for f in [
        "model.hpf",
        "model.toml",
        "train_log.csv",
        "pred.csv",
        "pred.asc",
        "features.csv",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }

    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert!(log.contains("# [model]"));
    assert!(log.lines().any(|l| l == "epoch,loss,val_miou"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 4);

    let feats = fs::read_to_string(a.join("features.csv")).unwrap();
    let rows: Vec<&str> = feats.lines().collect();
    assert_eq!(rows.len(), 81);
    assert_eq!(rows[0].split(',').count(), 4);

    let pred = PointCloud::load(&a.join("pred.csv")).unwrap();
    assert_eq!(pred.len(), 80);
    let metrics = a.join("m.csv");
    let table = ok(&[
        "eval",
        "--pred",
        s(&a.join("pred.csv")),
        "--gt",
        s(&dir.join("scene.csv")),
        "--out",
        s(&metrics),
    ]);
    assert!(table.contains("miou"));
    assert!(fs::read_to_string(&metrics)
        .unwrap()
        .starts_with("class,present,"));
    ok(&[
        "eval",
        "--pred",
        s(&a.join("pred.asc")),
        "--gt",
        s(&a.join("pred.asc")),
        "--raster",
    ]);
}

#[test]
fn fuse_appends_bands_in_argument_order() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let c = PointCloud::new(vec![[0.5, 0.5, 1.0], [1.5, 0.5, 2.0], [1.5, 1.5, 3.0]]);
    c.save(&dir.join("lidar.csv")).unwrap();
    let g = grid(2, 2);
    let two = RasterGrid::new(
        g,
        2,
        vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
        -9999.0,
    )
    .unwrap();
    save_raster(&dir.join("hsi.asc"), &two).unwrap();
    let one = RasterGrid::new(g, 1, vec![7.0, -9999.0, 9.0, 9.0], -9999.0).unwrap();
    save_raster(&dir.join("rgb.asc"), &one).unwrap();
    let lab = RasterGrid::new(g, 1, vec![1.0, 2.0, -9999.0, 3.0], -9999.0).unwrap();
    save_raster(&dir.join("labels.asc"), &lab).unwrap();

    let out = dir.join("fused.csv");
    let text = ok(&[
        "fuse",
        "--cloud",
        s(&dir.join("lidar.csv")),
        "--raster",
        s(&dir.join("hsi.asc")),
        "--raster",
        s(&dir.join("rgb.asc")),
        "--labels",
        s(&dir.join("labels.asc")),
        "--out",
        s(&out),
    ]);
    assert!(text.contains("raster 2: 1 bands"), "{text}");
    let f = PointCloud::load(&out).unwrap();
    assert_eq!(f.bands(), 3);
    // second point sits on the rgb nodata pixel and takes the band mean (7 + 9) / 2
    assert_eq!(
        f.attrs,
        vec![1.0, 10.0, 7.0, 2.0, 20.0, 8.0, 4.0, 40.0, 9.0]
    );
    assert_eq!(f.labels, Some(vec![1, 2, 3]));

    let unlabelled = hpformer(&[
        "fuse",
        "--cloud",
        s(&dir.join("lidar.csv")),
        "--raster",
        s(&dir.join("rgb.asc")),
        "--out",
        s(&dir.join("plain.csv")),
    ]);
    assert!(unlabelled.status.success());
    assert!(String::from_utf8_lossy(&unlabelled.stderr).contains("warning"));
    assert_eq!(
        PointCloud::load(&dir.join("plain.csv")).unwrap().labels,
        None
    );
}

#[test]
fn fuse_then_project_single_class() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let coords: Vec<[f64; 3]> = (0..30)
        .map(|i| [(i % 6) as f64 * 0.6 + 0.1, (i / 6) as f64 * 0.7, 0.0])
        .collect();
    PointCloud::new(coords)
        .save(&dir.join("lidar.csv"))
        .unwrap();
    let g = grid(4, 4);
    save_raster(&dir.join("r.asc"), &RasterGrid::filled(g, 1, 0.5, -9999.0)).unwrap();
    save_raster(&dir.join("l.asc"), &RasterGrid::filled(g, 1, 2.0, -9999.0)).unwrap();
    ok(&[
        "fuse",
        "--cloud",
        s(&dir.join("lidar.csv")),
        "--raster",
        s(&dir.join("r.asc")),
        "--labels",
        s(&dir.join("l.asc")),
        "--out",
        s(&dir.join("f.csv")),
    ]);
    fs::write(dir.join("gm.toml"), "ground = [0, 1]\nnon_ground = [2]\n").unwrap();
    ok(&[
        "project",
        "--pred-cloud",
        s(&dir.join("f.csv")),
        "--grid",
        s(&dir.join("l.asc")),
        "--ground-map",
        s(&dir.join("gm.toml")),
        "--out",
        s(&dir.join("p.asc")),
    ]);
    let p = hpformer::fuse_io::load_raster(&dir.join("p.asc")).unwrap();
    let covered: Vec<f64> = p
        .values
        .iter()
        .copied()
        .filter(|v| !p.is_nodata(*v))
        .collect();
    assert!(!covered.is_empty());
    assert!(covered.iter().all(|&v| v == 2.0));
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    ok(&[
        "synth",
        "--variant",
        "xor",
        "--out-dir",
        s(&d("a")),
        "--seed",
        "3",
    ]);
    ok(&[
        "synth",
        "--variant",
        "xor",
        "--out-dir",
        s(&d("b")),
        "--seed",
        "3",
    ]);
    ok(&[
        "synth",
        "--variant",
        "xor",
        "--out-dir",
        s(&d("c")),
        "--seed",
        "4",
    ]);
    for f in ["scene.csv", "val.csv", "heldout.csv", "config.toml"] {
        assert_eq!(
            fs::read(d("a").join(f)).unwrap(),
            fs::read(d("b").join(f)).unwrap()
        );
    }
    assert_ne!(
        fs::read(d("a").join("scene.csv")).unwrap(),
        fs::read(d("c").join("scene.csv")).unwrap()
    );
    ok(&["synth", "--variant", "overfit", "--out-dir", s(&d("o"))]);
    assert!(PointCloud::load(&d("o").join("scene.csv")).unwrap().len() >= 8192);
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[model]\nwidthz = [1]\n").unwrap();
    let out = hpformer(&[
        "train",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&tmp.path().join("o")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("widthz"), "{err}");

    let missing = hpformer(&[
        "predict",
        "--checkpoint",
        "nope.hpf",
        "--cloud",
        "x.csv",
        "--out",
        "y.csv",
    ]);
    assert!(!missing.status.success());
    assert_eq!(
        String::from_utf8(missing.stderr)
            .unwrap()
            .trim_end()
            .lines()
            .count(),
        1
    );
}
