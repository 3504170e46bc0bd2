//! Persistence formats, config parsing and the `gtaseg` command line.

use std::path::Path;
use std::process::Command;

use gta_seg::harness::{
    decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset, load_checkpoint,
    load_dataset, parse_config, save_checkpoint, save_dataset, RunManifest,
};
use gta_seg::segmodel::{init_model, SegNetConfig};
use gta_seg::synthdata::{generate, split};
use gta_seg::trainer::METRICS_HEADER;
use gta_seg::Error;
use tempfile::tempdir;

const TINY: &str = r#"
epochs = 2
warmup_epochs = 1
image_size = 12
n_samples = 40
n_labeled = 6
n_heldout = 8
batch_labeled = 3
batch_unlabeled = 8
hidden = [4, 4]
"#;

fn tiny_config(method: &str) -> String {
    format!("method = \"{method}\"\n{TINY}")
}

fn gtaseg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gtaseg"))
        .args(args)
        .output()
        .expect("gtaseg runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempdir().unwrap();
    let config = SegNetConfig {
        partition_boundary: Some(2),
        ..SegNetConfig::default()
    };
    let params = init_model(&config, 5).unwrap();
    let (a, b) = (dir.path().join("a.gtas"), dir.path().join("b.gtas"));
    save_checkpoint(&params, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded, params);
    assert_eq!(loaded.boundary(), 2);
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn reference_checkpoint_size_is_parameters_plus_header() {
    let params = init_model(&SegNetConfig::default(), 0).unwrap();
    assert_eq!(params.param_count(), 14_468);
    // magic, version, entry count; then per entry: name length + name,
    // role, layer index, rank, dims, payload.
    let mut expected = 4 + 2 + 4;
    for e in params.iter() {
        expected += 2 + e.name.len() + 1 + 2 + 1 + 4 * e.tensor.shape().len() + 4 * e.tensor.len();
    }
    let bytes = encode_checkpoint(&params).unwrap();
    assert_eq!(bytes.len(), expected);
    // About 55 KB: the payload dominates, the header is a few hundred bytes.
    assert!(bytes.len() - 4 * params.param_count() < 512, "{} bytes", bytes.len());
}

#[test]
fn checkpoint_rejects_bad_magic_version_and_truncation() {
    let bytes = encode_checkpoint(&init_model(&SegNetConfig::default(), 0).unwrap()).unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    let err = decode_checkpoint(&magic).unwrap_err();
    assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    assert_eq!(err.exit_code(), 4);

    let mut version = bytes.clone();
    version[4] = 9;
    let err = decode_checkpoint(&version).unwrap_err();
    assert!(matches!(err, Error::Version { found: 9, expected: 1 }), "{err}");
    assert_eq!(err.exit_code(), 4);

    let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(decode_checkpoint(&trailing).is_err());
}

#[test]
fn dataset_round_trip_is_byte_identical() {
    let dir = tempdir().unwrap();
    let samples = generate(3, 30, 4, 16).unwrap();
    let data = split(samples, 4, 5, 7, 3).unwrap();
    let (a, b) = (dir.path().join("a.gtad"), dir.path().join("b.gtad"));
    save_dataset(&data, &a).unwrap();
    let loaded = load_dataset(&a).unwrap();
    assert_eq!(loaded, data);
    assert_eq!((loaded.labeled.len(), loaded.unlabeled.len(), loaded.heldout.len()), (5, 18, 7));
    save_dataset(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn dataset_rejects_bad_magic_and_version() {
    let data = split(generate(1, 12, 3, 8).unwrap(), 3, 3, 3, 1).unwrap();
    let bytes = encode_dataset(&data).unwrap();

    let mut magic = bytes.clone();
    magic[3] = b'S';
    assert!(matches!(decode_dataset(&magic).unwrap_err(), Error::Format { offset: 0, .. }));

    let mut version = bytes.clone();
    version[4] = 2;
    let err = decode_dataset(&version).unwrap_err();
    assert!(matches!(err, Error::Version { found: 2, .. }), "{err}");
    assert!(err.to_string().contains("re-export"));
}

#[test]
fn config_requires_method() {
    let err = parse_config(TINY, "tiny.toml").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("method"));
}

#[test]
fn config_rejects_unknown_keys_and_names_the_line() {
    let err = parse_config(&format!("{}\nalhpa = 0.9\n", tiny_config("GTA")), "c.toml").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("alhpa"), "{err}");

    let text = "method = \"GTA\"\nepochs = 3\nalpha = 1.5\n";
    let err = parse_config(text, "c.toml").unwrap_err();
    assert!(err.to_string().contains("c.toml:3"), "{err}");
}

#[test]
fn config_rejects_gta_keys_for_other_methods() {
    let err = parse_config("method = \"SUPONLY\"\nema_scope = \"ALL\"\n", "c.toml").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("ema_scope"), "{err}");
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        parse_config(&text, &path.display().to_string()).unwrap();
    }
}

#[test]
fn shape_classes_are_balanced_enough() {
    let samples = generate(0, 200, 4, 32).unwrap();
    let mut pixels = [0usize; 4];
    let mut present = [0usize; 4];
    for s in &samples {
        let mut seen = [false; 4];
        for &c in &s.mask {
            pixels[c as usize] += 1;
            seen[c as usize] = true;
        }
        for (p, s) in present.iter_mut().zip(seen) {
            *p += usize::from(s);
        }
    }
    let total: usize = pixels.iter().sum();
    assert!(pixels[0] * 2 > total, "background is not the majority: {pixels:?}");
    for class in 1..4 {
        assert!(present[class] * 10 >= 200 * 3, "class {class} in only {} images", present[class]);
    }
}

#[test]
fn cli_run_writes_metrics_checkpoints_and_manifest() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("gta.toml");
    std::fs::write(&cfg, tiny_config("GTA")).unwrap();
    let out = dir.path().join("run");
    let res = gtaseg(&["run", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.checkpoints.len(), 3);
    for p in manifest.artifacts() {
        assert!(p.exists(), "{} missing", p.display());
    }
    assert!(manifest.started_unix <= manifest.finished_unix);
    let csv = std::fs::read_to_string(&manifest.metrics_csv).unwrap();
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    for line in csv.lines().skip(1) {
        let model = line.split(',').nth(1).unwrap();
        assert!(["gta", "student", "teacher"].contains(&model), "{line}");
    }
    for p in &manifest.checkpoints {
        load_checkpoint(p).unwrap();
    }
}

#[test]
fn cli_suponly_reports_zero_unlabeled_loss() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("sup.toml");
    std::fs::write(&cfg, tiny_config("SUPONLY")).unwrap();
    let out = dir.path().join("run");
    let res = gtaseg(&["run", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert!(res.status.success());
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let loss_u = METRICS_HEADER.split(',').position(|c| c == "loss_u").unwrap();
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').nth(loss_u).unwrap().parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn cli_exit_codes() {
    let dir = tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    std::fs::write(p("nomethod.toml"), TINY).unwrap();
    let res = gtaseg(&["run", "--config", path_str(&p("nomethod.toml")), "--out", path_str(&p("o1"))]);
    assert_eq!(res.status.code(), Some(2));

    let res = gtaseg(&["run", "--config", path_str(&p("absent.toml")), "--out", path_str(&p("o2"))]);
    assert_eq!(res.status.code(), Some(4));

    std::fs::write(p("nan.toml"), format!("{}\nlr_init = 1e30\n", tiny_config("SUPONLY"))).unwrap();
    let res = gtaseg(&["run", "--config", path_str(&p("nan.toml")), "--out", path_str(&p("o3"))]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("iteration"));

    std::fs::write(p("gen.toml"), tiny_config("GTA")).unwrap();
    let data = p("data.gtad");
    let res = gtaseg(&["gen-data", "--config", path_str(&p("gen.toml")), "--out", path_str(&data)]);
    assert!(res.status.success());
    let mut bad = std::fs::read(&data).unwrap();
    bad[0] = 0;
    std::fs::write(p("bad.gtas"), &bad).unwrap();
    let res = gtaseg(&["eval", "--checkpoint", path_str(&p("bad.gtas")), "--data", path_str(&data)]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn cli_eval_scores_a_saved_model() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, tiny_config("GTA")).unwrap();
    let data = dir.path().join("d.gtad");
    assert!(gtaseg(&["gen-data", "--config", path_str(&cfg), "--out", path_str(&data)]).status.success());
    let ckpt = dir.path().join("m.gtas");
    save_checkpoint(&init_model(&SegNetConfig { hidden: vec![4, 4], ..SegNetConfig::default() }, 0).unwrap(), &ckpt)
        .unwrap();
    let res = gtaseg(&["eval", "--checkpoint", path_str(&ckpt), "--data", path_str(&data)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).to_lowercase().contains("miou"));
}
