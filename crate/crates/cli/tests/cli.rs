use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use zsldb::autoencoder::AutoencoderConfig;
use zsldb::checkpoint::{Checkpoint, ModelConfig, Stage};
use zsldb::control::AdapterConfig;
use zsldb::denoiser::UNetConfig;
use zsldb::metrics::{mean, median};
use zsldb::perceptual::ExtractorConfig;
use zsldb_cli::report::ExperimentReport;

fn zsldb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsldb"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).to_string()
}

fn ok(o: Output) -> Output {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        autoencoder: AutoencoderConfig {
            widths: vec![8, 8],
            groups: 4,
            ..AutoencoderConfig::default()
        },
        unet: UNetConfig {
            widths: vec![8, 16],
            groups: 4,
            time_features: 8,
            time_dim: 16,
            ..UNetConfig::default()
        },
        adapter: AdapterConfig {
            stem_width: 8,
            time_features: 8,
        },
        extractor: ExtractorConfig {
            widths: vec![4, 8],
            ..ExtractorConfig::default()
        },
        timesteps: 100,
        ..ModelConfig::default()
    }
}

fn write_corpus_config(dir: &Path, ratios: &str) -> PathBuf {
    let path = dir.join("corpus-config.json");
    let text = format!(
        r#"{{"synth": {{"image_size": 32, "shapes": [1, 2], "kernel_size": 5, "blur_length": [2, 4]}}, "scenes": 12, "ratios": {ratios}}}"#
    );
    fs::write(&path, text).unwrap();
    path
}

/// A small corpus and a checkpoint with every stage trained for two steps.
struct Fixture {
    root: PathBuf,
    manifest: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).unwrap();
        let cfg = write_corpus_config(&root, "[0.5, 0.25, 0.25]");
        let corpus = root.join("corpus");
        ok(zsldb(&["synth", "--config", s(&cfg), "--out", s(&corpus), "--jobs", "2"]));
        let model = root.join("model.json");
        fs::write(&model, serde_json::to_string(&tiny_model()).unwrap()).unwrap();
        let manifest = corpus.join("manifest.json");
        let checkpoint = root.join("tiny.safetensors");
        for stage in ["vae", "denoiser", "adapter", "extractor"] {
            ok(zsldb(&[
                "train",
                "--stage",
                stage,
                "--data",
                s(&manifest),
                "--checkpoint",
                s(&checkpoint),
                "--model",
                s(&model),
                "--steps",
                "2",
            ]));
        }
        Fixture {
            root,
            manifest,
            checkpoint,
        }
    })
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_is_deterministic_and_validates_ratios() {
    let f = fixture();
    let again = f.root.join("corpus-again");
    let cfg = write_corpus_config(&f.root, "[0.5, 0.25, 0.25]");
    ok(zsldb(&["synth", "--config", s(&cfg), "--out", s(&again)]));
    let (a, b) = (files(&f.root.join("corpus")), files(&again));
    assert_eq!(a.len(), 12 * 5 + 2);
    assert!(a.contains_key(Path::new("manifest.json")));
    assert!(a == b, "corpus differs between runs");

    let dir = tempfile::tempdir().unwrap();
    let bad = write_corpus_config(dir.path(), "[0.5, 0.5, 0.25]");
    let o = zsldb(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ratios"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(zsldb(&["deblur"]).status.code(), Some(1));
    assert_eq!(zsldb(&["train", "--stage", "ghost", "--data", "x", "--checkpoint", "y"]).status.code(), Some(1));
    assert_eq!(zsldb(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_enforces_order_and_resumes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("partial.safetensors");
    let model = f.root.join("model.json");
    let train = |stage: &str, extra: &[&str]| {
        let mut args = vec!["train", "--stage", stage, "--data", s(&f.manifest), "--checkpoint", s(&ck), "--model", s(&model), "--steps", "2"];
        args.extend_from_slice(extra);
        zsldb(&args)
    };
    let o = train("adapter", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dependency") && stderr(&o).contains("vae"), "{}", stderr(&o));
    ok(train("vae", &[]));
    let o = train("adapter", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("denoiser"), "{}", stderr(&o));
    ok(train("denoiser", &[]));
    ok(train("denoiser", &["--resume"]));
    let c = Checkpoint::load(&ck).unwrap();
    assert!(c.is_complete(Stage::Vae) && c.is_complete(Stage::Denoiser));
    assert_eq!(c.steps(Stage::Denoiser), 4);
    let curves: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("partial.denoiser.curves.json")).unwrap()).unwrap();
    assert_eq!(curves[0]["first_step"], 2);

    let o = zsldb(&["deblur", "--input", s(&f.manifest), "--checkpoint", s(&ck), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dependency"), "{}", stderr(&o));
}

fn deblur(out: &Path, extra: &[&str]) -> Output {
    let f = fixture();
    let mut args = vec![
        "deblur",
        "--input",
        s(&f.manifest),
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(out),
        "--iterations",
        "2",
        "--jobs",
        "2",
    ];
    args.extend_from_slice(extra);
    zsldb(&args)
}

#[test]
fn deblur_echoes_config_and_is_deterministic() {
    let f = fixture();
    let a = f.root.join("deblur-a");
    let b = f.root.join("deblur-b");
    ok(deblur(&a, &[]));
    ok(deblur(&b, &[]));
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa == fb, "deblur outputs differ between runs");
    let test = zsldb::io::Manifest::load(&f.manifest).unwrap().test;
    assert_eq!(fa.len(), 4 * test.len() + 1);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join(&test[0]).join("result.json")).unwrap()).unwrap();
    let c = &meta["config"];
    assert_eq!((c["gamma"].as_f64(), c["lambda"].as_f64()), (Some(0.1), Some(1.5)));
    assert_eq!((c["invert_steps"].as_u64(), c["sample_steps"].as_u64()), (Some(50), Some(10)));
    assert_eq!(c["conditioning"], "depth");

    let none = f.root.join("deblur-none");
    ok(deblur(&none, &["--conditioning", "none", "--sample-steps", "5"]));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(none.join(&test[0]).join("result.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["conditioning"], "none");
    assert_eq!(meta["config"]["sample_steps"], 5);

    let o = deblur(&f.root.join("deblur-bad"), &["--kernel-size", "4"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kernel_size"), "{}", stderr(&o));
}

#[test]
fn evaluate_reports_recomputable_aggregates() {
    let f = fixture();
    let depth = f.root.join("eval-depth");
    let none = f.root.join("eval-none");
    ok(deblur(&depth, &[]));
    ok(deblur(&none, &["--conditioning", "none"]));
    // A method whose output is the ground truth itself.
    let oracle = f.root.join("eval-oracle");
    let test = zsldb::io::Manifest::load(&f.manifest).unwrap().test;
    for scene in &test {
        let d = oracle.join(scene);
        fs::create_dir_all(&d).unwrap();
        for (name, bytes) in files(&depth.join(scene)) {
            fs::write(d.join(name), bytes).unwrap();
        }
        fs::copy(f.manifest.parent().unwrap().join(scene).join("sharp.png"), d.join("deblurred.png")).unwrap();
    }
    let out = f.root.join("report");
    ok(zsldb(&[
        "evaluate",
        "--results",
        &format!("depth={}", s(&depth)),
        "--results",
        &format!("none={}", s(&none)),
        "--results",
        &format!("oracle={}", s(&oracle)),
        "--manifest",
        s(&f.manifest),
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(&out),
    ]));
    let report: ExperimentReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.methods, ["input", "depth", "none", "oracle"]);
    for m in &report.methods {
        let mut scenes: Vec<&String> = report.rows.iter().filter(|r| &r.method == m).map(|r| &r.scene).collect();
        scenes.sort();
        let mut expected: Vec<&String> = test.iter().collect();
        expected.sort();
        assert_eq!(scenes, expected, "method {m}");
    }
    for r in report.rows.iter().filter(|r| r.method == "oracle") {
        assert_eq!(r.perceptual, 0.0);
        assert_eq!(r.psnr, f64::INFINITY);
    }
    // Independent recomputation of every aggregate from the rows.
    let mut checked = 0;
    for a in &report.aggregates {
        let values: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.method == a.method)
            .filter_map(|r| match a.metric.as_str() {
                "perceptual" => Some(r.perceptual),
                "psnr" => Some(r.psnr),
                "ssim" => Some(r.ssim),
                "kernel_tv" => r.kernel_tv,
                other => panic!("unknown metric {other}"),
            })
            .collect();
        let sum: f64 = values.iter().sum();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mid = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
        assert_eq!(a.count, n);
        assert_eq!(a.mean.to_bits(), (sum / n as f64).to_bits(), "{} {}", a.method, a.metric);
        assert_eq!(a.median.to_bits(), mid.to_bits());
        assert_eq!(a.mean.to_bits(), mean(&values).to_bits());
        assert_eq!(a.median.to_bits(), median(&values).to_bits());
        checked += 1;
    }
    assert_eq!(checked, 4 * 3 + 3);
    assert!(report.aggregate("input", "kernel_tv").is_none());
    assert!(report.fingerprints.contains_key("checkpoint") && report.fingerprints.contains_key("depth"));
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("informational"));
    for scene in &test {
        let g = zsldb::io::read_png(&out.join("grids").join(format!("{scene}.png"))).unwrap();
        assert_eq!((g.height, g.width), (2 * 32 + 2, 3 * 32 + 2 * 2));
    }

    fs::remove_dir_all(none.join(&test[0])).unwrap();
    let o = zsldb(&[
        "evaluate",
        "--results",
        s(&none),
        "--manifest",
        s(&f.manifest),
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(&f.root.join("report-missing")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(&test[0]), "{}", stderr(&o));
}
