//! End-to-end runs of the `unialign` binary on a tiny phantom.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unialign::data_io::{load_slice_dataset, write_slice_dataset, DatasetMeta, DomainLabel, Split};

const TINY: &[&str] = &[
    "phantom.volumes_per_domain=5",
    "phantom.slices_per_volume=4",
    "stage1.iters=3",
    "stage1.batch=2",
    "stage2.iters=3",
    "stage2.batch=2",
    "stage2.eval_interval=2",
];

fn unialign(args: &[&str], overrides: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_unialign"));
    cmd.args(args);
    for o in overrides {
        cmd.args(["--set", o]);
    }
    cmd.env_remove("UNIALIGN_OUTPUT_ROOT");
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> Vec<PathBuf> {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(PathBuf::from)
        .filter(|p| p.exists())
        .collect()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn phantom_with_same_seed_writes_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&unialign(&["phantom", "--seed", "7", "--out", s(&a)], TINY));
    ok(&unialign(&["phantom", "--seed", "7", "--out", s(&b)], TINY));
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.keys().any(|k| k.ends_with("manifest.json")));
    assert_eq!(ta, tb);
    let c = dir.path().join("c");
    ok(&unialign(&["phantom", "--seed", "8", "--out", s(&c)], TINY));
    assert_ne!(tree(&c), ta);
}

#[test]
fn full_pipeline_emits_report_and_masks() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&unialign(&["phantom", "--out", s(&data)], TINY));

    let style = root.join("style");
    let written = ok(&unialign(&["train-style", "--data", s(&data), "--out", s(&style)], TINY));
    assert!(written.contains(&style.join("stage1.ckpt")));
    assert!(written.contains(&style.join("config.resolved.toml")));

    let translated = root.join("translated");
    ok(&unialign(
        &["translate", "--ckpt", s(&style.join("stage1.ckpt")), "--data", s(&data), "--out", s(&translated)],
        TINY,
    ));
    let before = load_slice_dataset(&data, DomainLabel::Source, Split::Train).unwrap();
    let after = load_slice_dataset(&translated, DomainLabel::Source, Split::Train).unwrap();
    assert_eq!(before.len(), after.len());
    for (x, y) in before.records.iter().zip(&after.records) {
        assert_eq!(x.label, y.label);
        assert_eq!((&x.volume_id, x.slice_index), (&y.volume_id, y.slice_index));
        assert_eq!(x.image.dim(), y.image.dim());
    }
    assert_ne!(before.records[0].image, after.records[0].image);

    let seg = root.join("seg");
    ok(&unialign(
        &["train-seg", "--source", s(&translated), "--target", s(&data), "--out", s(&seg)],
        TINY,
    ));
    let ckpt = seg.join("stage2_best.ckpt");
    assert!(ckpt.exists() && seg.join("stage2_last.ckpt").exists() && seg.join("stage2_losses.csv").exists());

    let eval = root.join("eval");
    let out = unialign(
        &["evaluate", "--ckpt", s(&ckpt), "--data", s(&data), "--unit", "mm", "--out", s(&eval)],
        TINY,
    );
    let written = ok(&out);
    for name in ["report.csv", "report.txt", "per_volume.csv", "report.json"] {
        assert!(written.contains(&eval.join(name)), "{name} not reported");
    }
    let csv = fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(csv.starts_with("method,dice_class1,dice_class2,dice_average,asd_class1,asd_class2,asd_average\n"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ASD(mm)"));

    let masks = root.join("masks");
    ok(&unialign(&["export-mask", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&masks)], TINY));
    let test = load_slice_dataset(&data, DomainLabel::Target, Split::Test).unwrap();
    let files: Vec<PathBuf> = fs::read_dir(masks.join("masks")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 2 * test.len());
    let (h, w) = test.records[0].image.dim();
    for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == "png")) {
        let raw = fs::read(f.with_extension("bin")).unwrap();
        assert_eq!(raw.len(), 4 * h * w);
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let img = image::open(f).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (w as u32, h as u32));
        let constant = values.iter().all(|&v| v == values[0]);
        let (lo, hi) = img.pixels().fold((255u8, 0u8), |(a, b), p| (a.min(p.0[0]), b.max(p.0[0])));
        if !constant {
            assert_eq!((lo, hi), (0, 255), "{}", f.display());
        }
    }
    let stats = fs::read_to_string(masks.join("mask_stats.csv")).unwrap();
    assert!(stats.starts_with("class,mean_mask\nclass1,"));
}

#[test]
fn evaluate_without_labels_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&unialign(&["phantom", "--out", s(&data)], TINY));
    let test = load_slice_dataset(&data, DomainLabel::Target, Split::Test).unwrap();
    let unlabeled: Vec<_> = test
        .records
        .iter()
        .cloned()
        .map(|mut r| {
            r.label = None;
            r
        })
        .collect();
    let bare = dir.path().join("bare");
    let meta = DatasetMeta {
        num_classes: test.meta.num_classes,
        spacing_mm: test.meta.spacing_mm,
    };
    write_slice_dataset(&bare, Split::Test, &unlabeled, meta, DomainLabel::Target).unwrap();
    let out = unialign(
        &["evaluate", "--ckpt", "missing.ckpt", "--data", s(&bare), "--out", s(&dir.path().join("eval"))],
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("labels"));
}

#[test]
fn configuration_errors_are_usage_errors_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let out = unialign(&["phantom", "--out", s(&out_dir)], &["stage1.lr=abc"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage1.lr"));

    let out = unialign(&["phantom", "--out", s(&out_dir)], &["stage1.learning_rate=0.1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage1.learning_rate"));

    let out = unialign(&["phantom", "--out", s(&out_dir), "--config", s(&dir.path().join("nope.toml"))], &[]);
    assert_eq!(out.status.code(), Some(1));

    let out = unialign(&["no-such-command"], &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = unialign(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn config_file_and_overrides_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 3\n[stage1]\nlr = 0.0005\n").unwrap();
    let out_dir = dir.path().join("o");
    ok(&unialign(
        &["phantom", "--config", s(&cfg), "--out", s(&out_dir)],
        &["phantom.volumes_per_domain=3", "stage1.lr=0.001"],
    ));
    let echoed = unialign::training::resolve_config(&fs::read_to_string(out_dir.join("config.resolved.toml")).unwrap(), &[])
        .unwrap();
    assert_eq!(echoed.seed, 3);
    assert_eq!(echoed.stage1.lr, 0.001);
    assert_eq!(echoed.phantom.volumes_per_domain, 3);
}

#[test]
fn relative_output_resolves_under_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_unialign"))
        .args(["phantom", "--out", "rel", "--set", "phantom.volumes_per_domain=3"])
        .env("UNIALIGN_OUTPUT_ROOT", dir.path())
        .current_dir(dir.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("rel/source/train/manifest.json").exists());
}
