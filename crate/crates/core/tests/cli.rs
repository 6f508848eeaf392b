use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use wgeo::checkpoint::{Checkpoint, TrainingMeta};
use wgeo::geoflow::Architecture;
use wgeo::measures::{decode_ppm, encode_ppm, format_csv, load_csv, parse_csv, sample, write_csv};
use wgeo::{CostModel, GeoState, MeasureSpec};

fn wgeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wgeo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

fn gaussian(mean: Vec<f64>) -> MeasureSpec {
    let d = mean.len();
    MeasureSpec::Gaussian { mean, cov: identity(d) }
}

/// A checkpoint whose fields are the constants `m` (forward) and `-m` (backward).
fn constant_checkpoint(m: &[f64], source: MeasureSpec, target: MeasureSpec) -> Checkpoint {
    let d = m.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let arch = Architecture {
        field_width: 4,
        field_hidden: 1,
        phi_width: 4,
        phi_hidden: 1,
    };
    let mut state = GeoState::init(d, CostModel::quadratic(), arch, &mut rng).unwrap();
    for (net, sign) in [(&mut state.f_net, 1.0), (&mut state.g_net, -1.0)] {
        let last = net.layers_mut().last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias = Array1::from_iter(m.iter().map(|v| sign * v));
    }
    Checkpoint {
        state,
        meta: TrainingMeta {
            iterations: 0,
            final_w_ab: 0.0,
            final_w_ba: 0.0,
            seed: 11,
            source: Some(source),
            target: Some(target),
        },
    }
}

fn save_constant(dir: &TempDir, m: &[f64]) -> PathBuf {
    let mut target_mean = vec![0.0; m.len()];
    target_mean.copy_from_slice(m);
    let ck = constant_checkpoint(m, gaussian(vec![0.0; m.len()]), gaussian(target_mean));
    let p = dir.path().join("ck.json");
    ck.save(&p).unwrap();
    p
}

const TINY_CONFIG: &str = r#"
[cost]
alpha = 2.0

[train]
n_interior = 32
n_boundary = 32
n_cycle = 32
outer_iters = 50
min_iters = 3
epsilon = inf
lr = 1e-3
seed = 5

[net]
field_width = 6
field_hidden = 1
phi_width = 6
phi_hidden = 1

[source]
kind = "gaussian"
mean = [0.0, 0.0]
cov = [[1.0, 0.0], [0.0, 1.0]]

[target]
kind = "gaussian"
mean = [3.0, 0.0]
cov = [[1.0, 0.0], [0.0, 1.0]]
"#;

#[test]
fn train_stops_after_min_iters_and_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let ck = dir.path().join("model.json");
    let out = wgeo(&["train", s(&cfg), "--out", s(&ck)]);
    assert!(out.status.success(), "{}", stderr(&out));

    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.meta.iterations, 3);
    assert_eq!(loaded.state.dim(), 2);
    let again = dir.path().join("again.json");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(&again).unwrap());

    let history = std::fs::read_to_string(dir.path().join("model.json.history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "iteration,l_ab,l_ba,k_reg,w_ab,w_ba,hjb_residual_mean");
    assert_eq!(lines.len(), 4);
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY_CONFIG.replace("seed = 5", "seed = 5\nfoo = 1")).unwrap();
    let ck = dir.path().join("model.json");
    let out = wgeo(&["train", s(&cfg), "--out", s(&ck)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.foo"), "{}", stderr(&out));
    assert!(!ck.exists());
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wgeo(&["train", s(&dir.path().join("nope.toml")), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn map_with_zero_field_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[0.0, 0.0]);
    let input = dir.path().join("in.csv");
    let pts = array![[0.25, -1.5], [3.0, 1e-7], [-2.0, 4.5]];
    write_csv(&input, pts.view()).unwrap();
    let out_csv = dir.path().join("out.csv");
    let out = wgeo(&["map", s(&ck), s(&input), "--out", s(&out_csv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&out_csv).unwrap());
}

#[test]
fn map_with_constant_field_shifts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[1.5, -2.0]);
    let input = dir.path().join("in.csv");
    let pts = array![[0.0, 0.0], [1.0, 1.0], [-3.0, 2.5]];
    write_csv(&input, pts.view()).unwrap();
    for (dir_flag, sign) in [("ab", 1.0), ("ba", -1.0)] {
        let out_csv = dir.path().join(format!("out_{dir_flag}.csv"));
        let out = wgeo(&["map", s(&ck), s(&input), "--direction", dir_flag, "--out", s(&out_csv)]);
        assert!(out.status.success(), "{}", stderr(&out));
        let mapped = load_csv(&out_csv).unwrap();
        let expected = &pts + &(array![1.5, -2.0] * sign);
        assert_eq!(mapped.points(), expected.view());
    }
}

#[test]
fn map_rejects_wrong_dimension_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[0.0, 0.0]);
    let input = dir.path().join("in.csv");
    write_csv(&input, array![[1.0, 2.0, 3.0]].view()).unwrap();
    let out_csv = dir.path().join("out.csv");
    let out = wgeo(&["map", s(&ck), s(&input), "--out", s(&out_csv)]);
    assert!(!out.status.success());
    assert!(!out_csv.exists());
}

#[test]
fn bad_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.json");
    std::fs::write(&ck, "{\"version\": \"something-else\"}").unwrap();
    let out_dir = dir.path().join("geo");
    let out = wgeo(&["geodesic", s(&ck), "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(!out_dir.exists());

    std::fs::write(&ck, "not json").unwrap();
    let out = wgeo(&["distance", s(&ck)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn transfer_with_zero_field_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[0.0, 0.0, 0.0]);
    let img = dir.path().join("in.ppm");
    let pixels = Array2::from_shape_fn((12, 3), |(i, c)| ((i * 37 + c * 101) % 256) as f64 / 255.0);
    std::fs::write(&img, encode_ppm(pixels.view(), 4, 3).unwrap()).unwrap();
    let out_img = dir.path().join("out.ppm");
    let out = wgeo(&["transfer", s(&ck), s(&img), "--out", s(&out_img)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(&img).unwrap(), std::fs::read(&out_img).unwrap());
}

#[test]
fn transfer_constant_shift_on_black_image() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[0.2, 0.0, 0.0]);
    let img = dir.path().join("black.ppm");
    std::fs::write(&img, encode_ppm(Array2::zeros((6, 3)).view(), 3, 2).unwrap()).unwrap();
    let out_img = dir.path().join("out.ppm");
    let out = wgeo(&["transfer", s(&ck), s(&img), "--out", s(&out_img)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let bytes = std::fs::read(&out_img).unwrap();
    let header = b"P6\n3 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].chunks(3).all(|px| px == [51, 0, 0]));
    assert_eq!(bytes.len(), header.len() + 18);
}

#[test]
fn transfer_requires_three_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[0.0, 0.0]);
    let img = dir.path().join("in.ppm");
    std::fs::write(&img, encode_ppm(Array2::zeros((1, 3)).view(), 1, 1).unwrap()).unwrap();
    let out_img = dir.path().join("out.ppm");
    let out = wgeo(&["transfer", s(&ck), s(&img), "--out", s(&out_img)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_img.exists());
}

#[test]
fn geodesic_writes_one_file_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[2.0, -1.0]);

    let two = dir.path().join("two");
    let out = wgeo(&["geodesic", s(&ck), "--samples", "50", "--steps", "2", "--out-dir", s(&two)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut names: Vec<String> = std::fs::read_dir(&two)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["geo_ab_t0.csv", "geo_ab_t1.csv"]);

    // The start cloud is drawn with the checkpoint's seed.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let start = sample(&gaussian(vec![0.0, 0.0]), 50, &mut rng).unwrap();
    let t0 = std::fs::read_to_string(two.join("geo_ab_t0.csv")).unwrap();
    assert_eq!(t0, format_csv(start.points()));
    let t1 = load_csv(two.join("geo_ab_t1.csv")).unwrap();
    assert_eq!(t1.points(), (&start.points() + &array![2.0, -1.0]).view());

    let eleven = dir.path().join("eleven");
    let out = wgeo(&["geodesic", s(&ck), "--samples", "20", "--steps", "11", "--direction", "ba", "--out-dir", s(&eleven)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read_dir(&eleven).unwrap().count(), 11);
    let start = load_csv(eleven.join("geo_ba_t0.csv")).unwrap();
    for k in 0..11 {
        let t = k as f64 / 10.0;
        let snap = load_csv(eleven.join(format!("geo_ba_t{k}.csv"))).unwrap();
        let expected = &start.points() + &(array![-2.0, 1.0] * t);
        let err = (&snap.points() - &expected).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        assert!(err < 1e-12, "t={t}: {err}");
    }
}

#[test]
fn geodesic_rejects_single_step() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[0.0, 0.0]);
    let out_dir = dir.path().join("geo");
    let out = wgeo(&["geodesic", s(&ck), "--steps", "1", "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn geodesic_from_input_file() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[1.0, 1.0]);
    let input = dir.path().join("start.csv");
    write_csv(&input, array![[0.0, 0.0], [1.0, -1.0]].view()).unwrap();
    let out_dir = dir.path().join("geo");
    let out = wgeo(&["geodesic", s(&ck), "--steps", "3", "--input", s(&input), "--out-dir", s(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mid = load_csv(out_dir.join("geo_ab_t1.csv")).unwrap();
    assert_eq!(mid.points(), array![[0.5, 0.5], [1.5, -0.5]].view());
}

#[test]
fn distance_of_constant_fields() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[3.0, 4.0]);
    let out = wgeo(&["distance", s(&ck), "--samples", "100"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("W_ab 12.5000000000"), "{text}");
    assert!(text.contains("W_ba 12.5000000000"), "{text}");
    assert!(text.contains("gap 0.0000000000"), "{text}");
}

#[test]
fn eval_gaussian_on_exact_translation() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[3.0, 0.0]);
    let out = wgeo(&["eval", s(&ck), "--oracle", "gaussian", "--samples", "200"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let value = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse::<f64>().unwrap()))
            .unwrap()
    };
    assert!((value("w_oracle ") - 4.5).abs() < 1e-10);
    assert!(value("rel_distance_error ") < 1e-10);
    assert!(value("field_l2_error ") < 1e-20);
}

#[test]
fn eval_discrete_with_translated_clouds() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[5.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = sample(&gaussian(vec![0.0, 0.0]), 16, &mut rng).unwrap();
    let b = &a.points() + &array![5.0, 0.0];
    let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_csv(&pa, a.points()).unwrap();
    write_csv(&pb, b.view()).unwrap();
    let out = wgeo(&[
        "eval",
        s(&ck),
        "--oracle",
        "discrete",
        "--source-csv",
        s(&pa),
        "--target-csv",
        s(&pb),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("oracle_cost 12.5000000000"), "{text}");
    let disc: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("normalized_discrepancy "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(disc < 1e-12, "{text}");
}

#[test]
fn oracle_ot_examples() {
    let dir = tempfile::tempdir().unwrap();
    let a = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]];
    let (pa, pb, assign) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("assign.csv"));
    write_csv(&pa, a.view()).unwrap();

    write_csv(&pb, a.view()).unwrap();
    let out = wgeo(&["oracle-ot", s(&pa), s(&pb), "--out", s(&assign)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("cost 0.0000000000000000e0"));
    assert_eq!(std::fs::read_to_string(&assign).unwrap(), "0,0\n1,1\n2,2\n");

    // Shuffled and shifted copy: the assignment undoes the shuffle.
    let b = array![[1.0, 2.0], [1.0, 4.0], [2.0, 2.0]];
    write_csv(&pb, b.view()).unwrap();
    let out = wgeo(&["oracle-ot", s(&pa), s(&pb), "--out", s(&assign)]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("cost 2.5000000000000000e0"), "{}", stdout(&out));
    assert_eq!(std::fs::read_to_string(&assign).unwrap(), "0,0\n1,2\n2,1\n");

    let out = wgeo(&["oracle-ot", s(&pa), s(&pb), "--alpha", "1.0", "--out", s(&assign)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_ot_rejects_unequal_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb, assign) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("assign.csv"));
    write_csv(&pa, array![[0.0], [1.0]].view()).unwrap();
    write_csv(&pb, array![[0.0]].view()).unwrap();
    let out = wgeo(&["oracle-ot", s(&pa), s(&pb), "--out", s(&assign)]);
    assert!(!out.status.success());
    assert!(!assign.exists());
}

#[test]
fn plot_scatter_writes_fixed_canvas() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pts.csv");
    write_csv(&input, array![[0.0, 0.0], [2.0, 1.0], [1.0, 0.5]].view()).unwrap();
    let out_img = dir.path().join("plot.ppm");
    let out = wgeo(&["plot-scatter", s(&input), "--out", s(&out_img)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (px, w, h) = decode_ppm(&std::fs::read(&out_img).unwrap()).unwrap();
    assert_eq!((w, h), (512, 512));
    let dark = px.points().rows().into_iter().filter(|r| r[0] == 0.0).count();
    assert_eq!(dark, 3);
}

#[test]
fn malformed_csv_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let ck = save_constant(&dir, &[0.0, 0.0]);
    let input = dir.path().join("bad.csv");
    std::fs::write(&input, "1.0,2.0\n3.0,oops\n").unwrap();
    let out = wgeo(&["map", s(&ck), s(&input), "--out", s(&dir.path().join("o.csv"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains(":2:"), "{}", stderr(&out));
    assert!(parse_csv("1,2\n", &input).is_ok());
}
