use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cwrnn_core::compression::{dequantize_model, QuantizedModel};
use cwrnn_core::data_io::{frame_to_image, load_video, DatasetSpec, FrameSequence};

const SMALL_CONFIG: &str = r#"
[video]
source = "synth:blobs:4x16x16"
[model]
target_params = 6000
[model.budget]
upsample_factors = [2, 2]
min_decoder_width = 4
[train]
epochs = 3
group_len = 2
"#;

fn cwrnn(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("run.toml");
    if !config.exists() {
        std::fs::write(&config, SMALL_CONFIG).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_cwrnn"))
        .arg("--config")
        .arg(&config)
        .args(args)
        .env_remove("CWRNN_OUT")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn out_dir(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn missing_video_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cwrnn(
        dir.path(),
        &[
            "--video",
            "/no/such/clip",
            "--out",
            &out_dir(dir.path(), "o"),
            "train",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn bad_flag_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = out_dir(dir.path(), "o");
    let dup = cwrnn(
        dir.path(),
        &["--out", &o, "sweep-ratio", "--ratios", "0.2,0.2,0.8"],
    );
    assert_eq!(dup.status.code(), Some(2));
    let two = cwrnn(
        dir.path(),
        &["--out", &o, "sweep-ratio", "--ratios", "0.2,0.8"],
    );
    assert_eq!(two.status.code(), Some(2));
    let zero = cwrnn(
        dir.path(),
        &[
            "--out",
            &o,
            "splice-probe",
            "--insert",
            "synth:cartoon:2x16x16",
            "--n",
            "0",
            "--two-n",
            "4",
        ],
    );
    assert_eq!(zero.status.code(), Some(2));
    let variant = cwrnn(dir.path(), &["--variant", "v9", "train"]);
    assert_eq!(variant.status.code(), Some(2));
}

#[test]
fn variant_flag_disables_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = out_dir(dir.path(), "v1");
    ok(cwrnn(
        dir.path(),
        &["--variant", "v1", "--out", &o, "train"],
    ));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(Path::new(&o).join("experiment.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config"]["run"]["model"]["grid_ratio"], 0.0);
    let ckpt: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(Path::new(&o).join("checkpoint/manifest.json")).unwrap(),
    )
    .unwrap();
    assert!(ckpt["config"]["grid"].is_null());
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| {
        let o = out_dir(dir.path(), name);
        ok(cwrnn(dir.path(), &["--seed", "5", "--out", &o, "train"]));
        assert!(Path::new(&o).join("experiment.json").exists());
        std::fs::read(Path::new(&o).join("metrics.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

fn load_frames(dir: &Path) -> FrameSequence {
    load_video(&DatasetSpec {
        divisor: 1,
        ..DatasetSpec::new(dir)
    })
    .unwrap()
}

#[test]
fn compress_then_decode_matches_the_dequantized_model() {
    let dir = tempfile::tempdir().unwrap();
    let train = out_dir(dir.path(), "train");
    ok(cwrnn(dir.path(), &["--out", &train, "train"]));
    let comp = out_dir(dir.path(), "comp");
    let ckpt = PathBuf::from(&train).join("checkpoint");
    ok(cwrnn(
        dir.path(),
        &[
            "--out",
            &comp,
            "compress",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--deflate",
        ],
    ));
    let stream = PathBuf::from(&comp).join("model.cwrn");
    let dec = out_dir(dir.path(), "dec");
    ok(cwrnn(
        dir.path(),
        &["--out", &dec, "decode", "--input", stream.to_str().unwrap()],
    ));

    let q = QuantizedModel::read(std::fs::File::open(&stream).unwrap()).unwrap();
    let expected = dequantize_model(&q)
        .unwrap()
        .decode_video()
        .unwrap()
        .clamp(0.0, 1.0);
    let decoded = load_frames(&Path::new(&dec).join("frames"));
    assert_eq!(decoded.num_frames(), 4);
    for t in 0..4 {
        let want = frame_to_image(&expected.slice_outer(t).unwrap()).unwrap();
        let got = frame_to_image(&decoded.frame(t).unwrap()).unwrap();
        assert_eq!(want.as_raw(), got.as_raw(), "frame {t}");
    }

    let bench = out_dir(dir.path(), "bench");
    let report = ok(cwrnn(
        dir.path(),
        &[
            "--out",
            &bench,
            "bench",
            "--input",
            stream.to_str().unwrap(),
            "--warmup",
            "1",
        ],
    ));
    let json: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(json["warmup_frames"], 1);
    assert_eq!(json["frames_timed"], 3);
    assert!(!json["hardware"].as_str().unwrap().is_empty());
}

#[test]
fn compressed_points_feed_bd_rate() {
    let dir = tempfile::tempdir().unwrap();
    let rd = dir.path().join("rd.csv");
    for budget in ["6000", "9000", "13000", "20000"] {
        let train = out_dir(dir.path(), &format!("t{budget}"));
        ok(cwrnn(
            dir.path(),
            &["--target-params", budget, "--out", &train, "train"],
        ));
        let ckpt = PathBuf::from(&train).join("checkpoint");
        ok(cwrnn(
            dir.path(),
            &[
                "--out",
                &out_dir(dir.path(), &format!("c{budget}")),
                "compress",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--append-rd",
                rd.to_str().unwrap(),
            ],
        ));
    }
    let rd = rd.to_str().unwrap();
    let text = ok(cwrnn(
        dir.path(),
        &["bd-rate", "--anchor", rd, "--test", rd],
    ));
    assert!(
        text.contains("BD-rate 0.0000 %") || text.contains("BD-rate -0.0000 %"),
        "{text}"
    );
}

#[test]
fn ratio_sweep_writes_csv_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let o = out_dir(dir.path(), "sweep");
    ok(cwrnn(
        dir.path(),
        &[
            "--epochs",
            "1",
            "--out",
            &o,
            "sweep-ratio",
            "--ratios",
            "0.1,0.2,0.3",
            "--workers",
            "2",
        ],
    ));
    let csv = std::fs::read_to_string(Path::new(&o).join("sweep_ratio.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let svg = std::fs::read_to_string(Path::new(&o).join("sweep_ratio.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn splice_probe_reports_both_variants() {
    let dir = tempfile::tempdir().unwrap();
    let o = out_dir(dir.path(), "splice");
    ok(cwrnn(
        dir.path(),
        &[
            "--epochs",
            "1",
            "--out",
            &o,
            "splice-probe",
            "--insert",
            "synth:cartoon:2x16x16",
            "--n",
            "1",
            "--two-n",
            "4",
        ],
    ));
    let csv = std::fs::read_to_string(Path::new(&o).join("splice.csv")).unwrap();
    assert!(csv.contains("\nv1,") && csv.contains("\nv3,"), "{csv}");
    assert!(Path::new(&o).join("frames_v3/inserted_00000.png").exists());
}

#[test]
fn synth_writes_frames() {
    let dir = tempfile::tempdir().unwrap();
    let o = out_dir(dir.path(), "s");
    ok(cwrnn(
        dir.path(),
        &[
            "--out", &o, "synth", "--kind", "flower", "--frames", "3", "--height", "16", "--width",
            "32",
        ],
    ));
    let clip = load_frames(&Path::new(&o).join("frames"));
    assert_eq!(
        (clip.num_frames(), clip.height(), clip.width()),
        (3, 16, 32)
    );
}
