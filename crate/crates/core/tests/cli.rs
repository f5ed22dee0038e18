use std::path::Path;
use std::process::{Command, Output};

use rwe::{load_image, save_image, ImageGrid, Plane};

fn rwe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwe")).args(args).env("RWE_THREADS", "1").output().unwrap()
}

fn write_clean(dir: &Path) -> String {
    let p = Plane::from_fn(40, 40, |r, c| 0.2 + 0.6 * (((r / 8 + c / 8) % 2) as f64) + 0.002 * r as f64);
    let path = dir.join("clean.pgm");
    save_image(&ImageGrid::gray(p).unwrap(), &path).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: [&str; 10] = ["--patch", "5", "--k", "8", "--stride", "3", "--window", "11", "--outer", "2"];

#[test]
fn synth_then_denoise_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clean = write_clean(dir.path());
    let out_dir = dir.path().to_string_lossy().into_owned();
    let o = rwe(&[
        "synth", "--in", &clean, "--out", &out_dir, "--sigma", "20", "--spin", "0.3", "--seed", "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let noisy = dir.path().join("clean_s20_sp0.3_rv0_seed3.pgm");
    let mask = dir.path().join("clean_s20_sp0.3_rv0_seed3_mask.pgm");
    assert!(noisy.exists() && mask.exists());

    let restored = dir.path().join("restored.pgm");
    let report = dir.path().join("report.csv");
    let noisy_s = noisy.to_string_lossy().into_owned();
    let restored_s = restored.to_string_lossy().into_owned();
    let report_s = report.to_string_lossy().into_owned();
    let mut args = vec![
        "denoise", "--in", &noisy_s, "--out", &restored_s, "--ref", &clean, "--kind", "spin", "--report", &report_s,
    ];
    args.extend(SMALL);
    let o = rwe(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("iter=2"), "{stdout}");

    let x = load_image(&restored).unwrap();
    let y = load_image(&noisy).unwrap();
    let c = load_image(&clean).unwrap();
    assert!(rwe::psnr(&x, &c).unwrap() > rwe::psnr(&y, &c).unwrap() + 5.0);
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("iter,sigma"));
}

#[test]
fn bench_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    write_clean(dir.path());
    let manifest = dir.path().join("grid.toml");
    std::fs::write(
        &manifest,
        r#"out = "results.csv"
rules = ["pareto", "ones"]

[images]
paths = ["clean.pgm"]

[noise]
sigma = [10.0]
spin = [0.1, 0.2]
seed = 5

[solver]
patch = 5
k = 8
stride = 3
window = 11
outer = 1
inner = 2
"#,
    )
    .unwrap();
    let o = rwe(&["bench", &manifest.to_string_lossy()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut reader = csv::Reader::from_path(dir.path().join("results.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(&headers[0], "image");
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let psnr_col = headers.iter().position(|h| h == "psnr").unwrap();
    for r in &rows {
        let p: f64 = r[psnr_col].parse().unwrap();
        assert!(p.is_finite() && p > 10.0, "{r:?}");
    }
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pgm").to_string_lossy().into_owned();
    let out = dir.path().join("o.pgm").to_string_lossy().into_owned();
    assert_eq!(rwe(&["denoise", "--in", &missing, "--out", &out, "--kind", "spin"]).status.code(), Some(3));
    assert_eq!(rwe(&["denoise", "--in", &missing, "--out", &out, "--kind", "gauss"]).status.code(), Some(2));
    assert_eq!(rwe(&["synth"]).status.code(), Some(2));
}
