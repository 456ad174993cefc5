use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xmcl_core::config::RunConfig;
use xmcl_core::data::AugmentPolicy;
use xmcl_core::gradsuite::check_names;
use xmcl_core::run::tiny_config;

fn xmcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmcl")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Mean row of `eval_acc.csv` as `(acc_i, acc_p, acc_c, acc_s)`.
fn eval_means(path: &Path) -> (f64, f64, f64, f64) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("scene,acc_i,acc_p,acc_c,acc_s,loss"));
    let mean = lines.find(|l| l.starts_with("mean,")).expect("mean row");
    let v: Vec<f64> = mean.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
    assert_eq!(v.len(), 5);
    (v[0], v[1], v[2], v[3])
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&xmcl(&["--help"])), 0);
    assert_eq!(code(&xmcl(&["frobnicate"])), 1);
    assert_eq!(code(&xmcl(&["train", "--loss", "triplet"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"optim": {"learning_rate": 0.1}}"#).unwrap();
    let o = xmcl(&["train", "--config", s(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let mut cfg = tiny_config();
    cfg.loss.d_shared = cfg.feature_dim();
    let inconsistent = write_config(dir.path(), "inconsistent.json", &cfg);
    assert_eq!(code(&xmcl(&["train", "--config", s(&inconsistent)])), 1);
}

#[test]
fn gen_data_is_reproducible_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.data.train_scenes = 3;
    let config = write_config(dir.path(), "c.json", &cfg);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&xmcl(&["gen-data", "--config", s(&config), "--out", s(&a), "--seed", "5"])), 0);
    assert_eq!(code(&xmcl(&["gen-data", "--config", s(&config), "--out", s(&b), "--seed", "5"])), 0);

    let mut dirs: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    dirs.sort();
    assert_eq!(dirs.len(), 5, "4 scene directories plus the manifest: {dirs:?}");
    for name in &dirs {
        let (pa, pb) = (a.join(name), b.join(name));
        if pa.is_dir() {
            for f in fs::read_dir(&pa).unwrap() {
                let f = f.unwrap().file_name();
                assert_eq!(fs::read(pa.join(&f)).unwrap(), fs::read(pb.join(&f)).unwrap(), "{name:?}/{f:?}");
            }
        } else {
            assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
        }
    }
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 5"), "{manifest}");

    cfg.data.dir = Some(a.clone());
    cfg.optim.max_steps = Some(1);
    let from_dir = write_config(dir.path(), "d.json", &cfg);
    let run = dir.path().join("run");
    assert_eq!(code(&xmcl(&["train", "--config", s(&from_dir), "--out", s(&run)])), 0);

    fs::write(a.join("manifest.json"), manifest.replace("\"seed\": 6", "\"seed\": 60")).unwrap();
    let o = xmcl(&["train", "--config", s(&from_dir), "--out", s(&run)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("entry 1"), "{}", stderr(&o));
}

#[test]
fn train_eval_visualize_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "c.json", &tiny_config());
    let run = dir.path().join("run");
    let o = xmcl(&["train", "--config", s(&config), "--out", s(&run), "--loss", "circle"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["final.ckpt", "best.ckpt", "acc_curve.csv", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let echoed = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(echoed.loss.variant, "circle".parse().unwrap());
    let curve = fs::read_to_string(run.join("acc_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    let o = xmcl(&["eval", "--config", s(&config), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (ai, ap, ac, asv) = eval_means(&run.join("eval_acc.csv"));
    for v in [ai, ap, ac, asv] {
        assert!((0.0..=1.0).contains(&v));
    }
    let hist = fs::read_to_string(run.join("mismatch_hist.csv")).unwrap();
    assert!(hist.starts_with("bin_low,bin_high,count\n"), "{hist}");
    let matches = fs::read_to_string(run.join("matches.csv")).unwrap();
    assert_eq!(matches.lines().count(), 1 + 16);

    let (v1, v2) = (dir.path().join("v1"), dir.path().join("v2"));
    let ckpt = run.join("final.ckpt");
    for v in [&v1, &v2] {
        let o = xmcl(&["visualize", "--config", s(&config), "--checkpoint", s(&ckpt), "--out", s(v)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let names = ["image_full.ppm", "points_full.txt", "image_shared.ppm", "points_shared.txt", "image_positional.ppm"];
    for f in names {
        assert_eq!(fs::read(v1.join(f)).unwrap(), fs::read(v2.join(f)).unwrap(), "{f}");
    }
    let o = xmcl(&["visualize", "--config", s(&config), "--checkpoint", s(&ckpt), "--out", s(&v1), "--scene", "9"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn identity_augmentation_matches_within_modality() {
    // Validation scene identical to training scene 0, no augmentation: each
    // modality is compared against an exact copy of itself. The image is
    // small enough that every pixel's receptive field reaches the zero
    // padding at a different offset, so no two pixel features coincide.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.data.scene.height = 16;
    cfg.data.scene.width = 24;
    cfg.data.scene.focal = 20.0;
    cfg.data.val_seed_offset = 0;
    cfg.data.augment = AugmentPolicy::identity();
    cfg.optim.epochs = 0;
    let config = write_config(dir.path(), "c.json", &cfg);
    let run = dir.path().join("run");
    assert_eq!(code(&xmcl(&["train", "--config", s(&config), "--out", s(&run)])), 0);
    let o = xmcl(&["eval", "--config", s(&config), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (ai, ap, _, _) = eval_means(&run.join("eval_acc.csv"));
    assert_eq!((ai, ap), (1.0, 1.0));
}

#[test]
fn checkpoint_errors_are_structured() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let config = write_config(dir.path(), "c.json", &cfg);
    let missing = dir.path().join("nope.ckpt");
    let o = xmcl(&["eval", "--config", s(&config), "--checkpoint", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.ckpt"), "{}", stderr(&o));

    let mut zero = cfg.clone();
    zero.optim.epochs = 0;
    let zero_cfg = write_config(dir.path(), "z.json", &zero);
    let run = dir.path().join("run");
    assert_eq!(code(&xmcl(&["train", "--config", s(&zero_cfg), "--out", s(&run)])), 0);
    let mut wider = cfg;
    wider.model.image.channels = vec![4, 4, 8, 16];
    let wider_cfg = write_config(dir.path(), "w.json", &wider);
    let o = xmcl(&["eval", "--config", s(&wider_cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("does not fit"), "{}", stderr(&o));
}

#[test]
fn nan_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.optim.lr = 1e300;
    cfg.optim.epochs = 3;
    let config = write_config(dir.path(), "c.json", &cfg);
    let o = xmcl(&["train", "--config", s(&config), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("grad norm"), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_each_check_once_and_catches_corruption() {
    let ok = xmcl(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let report = String::from_utf8_lossy(&ok.stdout).into_owned();
    for name in check_names().unwrap() {
        let hits = report.lines().filter(|l| l.split_whitespace().next() == Some(name)).count();
        assert_eq!(hits, 1, "{name}");
    }

    let bad = xmcl(&["gradcheck", "--corrupt", "conv2d"]);
    assert_eq!(code(&bad), 2);
    let report = String::from_utf8_lossy(&bad.stdout).into_owned();
    let failing: Vec<_> = report.lines().filter(|l| l.contains("FAIL")).collect();
    assert_eq!(failing.len(), 1, "{report}");
    assert!(failing[0].starts_with("conv2d "));
    assert!(stderr(&bad).contains("conv2d"));
}
