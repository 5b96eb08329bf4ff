use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use msc_core::io::{read_matrix, ModelFile, PgmImage};
use msc_core::spatial::KernelFamily;
use msc_core::synth::gaussian_field;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "msc {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in {stdout}"))
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn simulate(dir: &Path, family: &str) {
    ok(&["simulate", "--family", family, "--n", "50", "--m", "12", "--K", "4", "--d", "2", "--seed", "1", "--out", &path(dir, "sim")]);
}

#[test]
fn simulate_writes_data_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "spatial");
    let data = read_matrix(&dir.path().join("sim/data.csv")).unwrap();
    assert_eq!(data.shape(), (50, 12));
    assert_eq!(read_matrix(&dir.path().join("sim/data.loc.csv")).unwrap().shape(), (12, 2));
    assert_eq!(read_matrix(&dir.path().join("sim/truth_dict.csv")).unwrap().shape(), (4, 12));
    assert!(fs::read_to_string(dir.path().join("sim/truth.json")).unwrap().contains("msc-truth-v1"));
}

#[test]
fn fit_then_eval_reports_a_distance() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "gaussian");
    let out = ok(&[
        "fit", "--family", "gaussian", "--K", "4", "--dmax", "2", "--data", &path(dir.path(), "sim/data.csv"),
        "--out-model", &path(dir.path(), "model.json"), "--trace", &path(dir.path(), "trace.csv"),
    ]);
    let d: usize = value(&out, "chosen_d").parse().unwrap();
    assert!((1..=2).contains(&d));
    let model = ModelFile::read(&dir.path().join("model.json")).unwrap();
    assert_eq!((model.n_signals, model.dim, model.n_atoms), (50, 12, 4));
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("kind,d,iteration,value\n"));
    assert!(trace.lines().any(|l| l.starts_with("bic,1,,")));

    let out = ok(&["eval", "--model", &path(dir.path(), "model.json"), "--truth-dict", &path(dir.path(), "sim/truth_dict.csv")]);
    let dist: f64 = value(&out, "subspace_distance").parse().unwrap();
    assert!((0.0..=1.0).contains(&dist));
}

#[test]
fn poisson_fit_reads_counts() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "poisson");
    let out = ok(&[
        "fit", "--family", "poisson", "--K", "4", "--dmax", "2", "--fixed-d", "--data", &path(dir.path(), "sim/data.csv"),
        "--out-model", &path(dir.path(), "model.json"),
    ]);
    assert_eq!(value(&out, "chosen_d"), "2");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "spatial");
    let spatial_without_locations = run(&[
        "fit", "--family", "spatial", "--K", "4", "--data", &path(dir.path(), "sim/data.csv"), "--out-model",
        &path(dir.path(), "m.json"),
    ]);
    assert_eq!(spatial_without_locations.status.code(), Some(2));
    let missing_file = run(&["fit", "--family", "gaussian", "--K", "2", "--data", &path(dir.path(), "nope.csv"), "--out-model", &path(dir.path(), "m.json")]);
    assert_eq!(missing_file.status.code(), Some(2));
    let conflicting = run(&["simulate", "--family", "poisson", "--n", "5", "--m", "4", "--K", "2", "--d", "1", "--snr", "2", "--out", &path(dir.path(), "x")]);
    assert_eq!(conflicting.status.code(), Some(2));
    let bad_suite = run(&["bench", "--suite", "fig9", "--out", &path(dir.path(), "b.csv")]);
    assert_eq!(bad_suite.status.code(), Some(2));
    assert_eq!(run(&["--threads", "0", "eval", "--ref", "a", "--test", "b"]).status.code(), Some(2));
}

#[test]
fn oversized_patch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let img = PgmImage::new(8, 8, vec![100; 64]).unwrap();
    img.write(&dir.path().join("small.pgm")).unwrap();
    let out = run(&["denoise", "--in", &path(dir.path(), "small.pgm"), "--out", &path(dir.path(), "o.pgm"), "--patch", "12"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_identical_images_is_infinite_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let a = path(dir.path(), "a.pgm");
    PgmImage::new(4, 3, (0..12).collect()).unwrap().write(Path::new(&a)).unwrap();
    let out = ok(&["eval", "--ref", &a, "--test", &a]);
    assert_eq!(value(&out, "mse"), "0.000000");
    assert_eq!(value(&out, "psnr"), "inf");
}

#[test]
fn denoise_improves_a_noisy_image() {
    let dir = tempfile::tempdir().unwrap();
    let clean_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/smooth64.pgm");
    let clean = PgmImage::read(&clean_path).unwrap();
    let field = gaussian_field(64, 64, 20.0, KernelFamily::Exponential, 0.25, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let noisy = PgmImage::from_matrix(&(clean.to_matrix() + field));
    let noisy_path = path(dir.path(), "noisy.pgm");
    noisy.write(Path::new(&noisy_path)).unwrap();
    let clean_path = clean_path.to_string_lossy().into_owned();

    let psnr_of = |test: &str| -> f64 { value(&ok(&["eval", "--ref", &clean_path, "--test", test]), "psnr").parse().unwrap() };
    let out_path = path(dir.path(), "out.pgm");
    let out = ok(&["denoise", "--in", &noisy_path, "--out", &out_path, "--kernel", "none", "--K", "8", "--max-iter", "10"]);
    assert_eq!(value(&out, "patches"), "361");
    assert!(psnr_of(&out_path) > psnr_of(&noisy_path));

    let omp_path = path(dir.path(), "omp.pgm");
    ok(&["denoise", "--in", &noisy_path, "--out", &omp_path, "--method", "omp-als", "--K", "8"]);
    assert!(psnr_of(&omp_path) > psnr_of(&noisy_path));
}

#[test]
fn bench_writes_report_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = path(dir.path(), "report.csv");
    let out = ok(&[
        "--threads", "1", "bench", "--suite", "poisson-fig1", "--scaled", "--replicates", "1", "--sizes", "40", "--max-iter",
        "10", "--out", &out_path,
    ]);
    let report = fs::read_to_string(&out_path).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "method,n,replicate,subspace_distance");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("ex-MSC,40,0,") && lines[2].starts_with("OMP-ALS,40,0,"));
    assert!(dir.path().join("report.timing.csv").exists());
    value(&out, "median[ex-MSC,40]");
}

#[test]
fn fit_is_reproducible_with_one_thread() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "gaussian");
    let model = |name: &str| {
        ok(&[
            "--threads", "1", "fit", "--family", "gaussian", "--K", "4", "--seed", "4", "--data", &path(dir.path(), "sim/data.csv"),
            "--out-model", &path(dir.path(), name),
        ]);
        fs::read(dir.path().join(name)).unwrap()
    };
    assert_eq!(model("a.json"), model("b.json"));
}
