use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use genegan::synth::{decode_pnm, encode_ppm, load_image, make_dataset, save_image};
use genegan::tensor::Tensor;
use transfig::Model;

const TINY: &str = "image_size = 16\nbase_width = 4\ncode_background = 3\ncode_object = 2\nbatch_size = 4\nsteps = 3\nlr = 0.001\n";

fn transfig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transfig"))
        .args(args)
        .output()
        .expect("spawn transfig")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    ckpt: PathBuf,
    images: Vec<PathBuf>,
}

/// A briefly trained 16x16 model plus a few synthetic images on disk.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let out = transfig(&["train", "--config", s(&cfg), "--synthetic", "12", "--out", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (with, without) = make_dataset(3, 2, 16, 99).unwrap();
    let images = with
        .iter()
        .chain(&without)
        .enumerate()
        .map(|(i, x)| {
            let p = dir.path().join(format!("img{i}.ppm"));
            save_image(&p, &x.image).unwrap();
            p
        })
        .collect();
    Fixture {
        ckpt: run.join("final.ggck"),
        dir,
        images,
    }
}

fn read(p: &Path) -> Tensor<f32> {
    load_image(p).unwrap()
}

fn columns(grid: &Tensor<f32>, panel: usize, i: usize) -> Tensor<f32> {
    let (h, w) = (grid.shape()[1], grid.shape()[2]);
    let mut data = Vec::with_capacity(3 * h * panel);
    for ch in 0..3 {
        for y in 0..h {
            let at = ch * h * w + y * w + i * panel;
            data.extend_from_slice(&grid.data()[at..at + panel]);
        }
    }
    Tensor::new(&[3, h, panel], data).unwrap()
}

#[test]
fn synthetic_zero_step_training_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("init");
    let o = transfig(&["train", "--synthetic", "2000", "--steps", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = Model::load(out.join("final.ggck")).unwrap();
    assert_eq!(m.checkpoint.step, 0);
    assert_eq!(m.image_size(), 32);
    assert!(out.join("config.txt").exists());
}

#[test]
fn configuration_problems_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = dir.path().join("nope.cfg");
    let o = transfig(&["train", "--config", s(&missing), "--synthetic", "4", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "lr = 0.001\nlearning_rate = 3\n").unwrap();
    let o = transfig(&["train", "--config", s(&bad), "--synthetic", "4", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    assert_eq!(transfig(&["train", "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(transfig(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn data_problems_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let empty = dir.path().join("data");
    std::fs::create_dir_all(empty.join("with")).unwrap();
    std::fs::create_dir_all(empty.join("without")).unwrap();
    let o = transfig(&["train", "--data", s(&empty), "--steps", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn folder_training_runs_on_ingested_images() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (with, without) = make_dataset(4, 4, 32, 3).unwrap();
    for (sub, set) in [("with", &with), ("without", &without)] {
        std::fs::create_dir_all(data.join(sub)).unwrap();
        for (i, x) in set.iter().enumerate() {
            save_image(data.join(sub).join(format!("{i}.ppm")), &x.image).unwrap();
        }
    }
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let o = transfig(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn checkpoint_problems_exit_with_code_four() {
    let f = fixture();
    let img = s(&f.images[0]);
    let out = f.dir.path().join("out.ppm");
    let missing = f.dir.path().join("missing.ggck");
    assert_eq!(
        transfig(&["remove", "--ckpt", s(&missing), "--in", img, "--out", s(&out)]).status.code(),
        Some(4)
    );
    let mut bytes = std::fs::read(&f.ckpt).unwrap();
    let at = bytes.len() / 2;
    bytes[at] ^= 0x40;
    let bad = f.dir.path().join("bad.ggck");
    std::fs::write(&bad, bytes).unwrap();
    let o = transfig(&["remove", "--ckpt", s(&bad), "--in", img, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("CRC"));
    assert!(!out.exists());
}

#[test]
fn mismatched_image_sizes_are_refused() {
    let f = fixture();
    let (big, _) = make_dataset(1, 0, 32, 1).unwrap();
    let p = f.dir.path().join("big.ppm");
    save_image(&p, &big[0].image).unwrap();
    let out = f.dir.path().join("o.ppm");
    let o = transfig(&["remove", "--ckpt", s(&f.ckpt), "--in", s(&p), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("32x32"));
    let o = transfig(&["remove", "--ckpt", s(&f.ckpt), "--in", s(&f.dir.path().join("none.ppm")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn remove_writes_a_valid_image_deterministically() {
    let f = fixture();
    let (o1, o2) = (f.dir.path().join("r1.ppm"), f.dir.path().join("r2.ppm"));
    for o in [&o1, &o2] {
        let r = transfig(&["remove", "--ckpt", s(&f.ckpt), "--in", s(&f.images[0]), "--out", s(o)]);
        assert!(r.status.success());
    }
    let bytes = std::fs::read(&o1).unwrap();
    assert_eq!(bytes, std::fs::read(&o2).unwrap());
    assert_eq!(decode_pnm(&bytes).unwrap().shape(), [3, 16, 16]);
}

#[test]
fn scale_endpoints_are_removal_and_reconstruction() {
    let f = fixture();
    let d = f.dir.path();
    let img = s(&f.images[1]);
    transfig(&["remove", "--ckpt", s(&f.ckpt), "--in", img, "--out", s(&d.join("rm.ppm"))]);
    let o = transfig(&["scale", "--ckpt", s(&f.ckpt), "--in", img, "--factors", "0,1,-1,2", "--out", s(&d.join("sc.ppm"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = read(&d.join("sc.ppm"));
    assert_eq!(grid.shape(), [3, 16, 64]);
    assert_eq!(columns(&grid, 16, 0), read(&d.join("rm.ppm")));
    let m = Model::load(&f.ckpt).unwrap();
    let rec = m.reconstruct(&read(&f.images[1])).unwrap();
    assert_eq!(encode_ppm(&columns(&grid, 16, 1)).unwrap(), encode_ppm(&rec).unwrap());
}

#[test]
fn interpolation_endpoints_are_transplants() {
    let f = fixture();
    let d = f.dir.path();
    let (a, b, r) = (s(&f.images[0]), s(&f.images[1]), s(&f.images[3]));
    let ck = s(&f.ckpt);
    transfig(&["transplant", "--ckpt", ck, "--donor", a, "--recipient", r, "--out", s(&d.join("ta.ppm"))]);
    transfig(&["transplant", "--ckpt", ck, "--donor", b, "--recipient", r, "--out", s(&d.join("tb.ppm"))]);
    let o = transfig(&["interpolate", "--ckpt", ck, "--donors", a, b, "--recipient", r, "--steps", "5", "--out", s(&d.join("i.ppm"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = read(&d.join("i.ppm"));
    assert_eq!(grid.shape(), [3, 16, 80]);
    assert_eq!(columns(&grid, 16, 0), read(&d.join("ta.ppm")));
    assert_eq!(columns(&grid, 16, 4), read(&d.join("tb.ppm")));

    let o = transfig(&["interpolate", "--ckpt", ck, "--donors", a, "--recipient", r, "--steps", "1", "--out", s(&d.join("one.ppm"))]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(d.join("one.ppm")).unwrap(), std::fs::read(d.join("ta.ppm")).unwrap());
}

#[test]
fn interpolation_grids_for_three_and_four_donors() {
    let f = fixture();
    let m = Model::load(&f.ckpt).unwrap();
    let imgs: Vec<Tensor<f32>> = f.images.iter().map(|p| read(p)).collect();
    let r = &imgs[4];
    let tri = m.interpolate(&imgs[..3], r, 3).unwrap();
    assert_eq!(tri.iter().map(|row| row.iter().filter(|c| c.is_some()).count()).collect::<Vec<_>>(), [3, 2, 1]);
    assert_eq!(tri[0][0].as_ref().unwrap(), &m.transplant(&imgs[0], r).unwrap());
    assert_eq!(tri[0][2].as_ref().unwrap(), &m.transplant(&imgs[1], r).unwrap());
    assert_eq!(tri[2][0].as_ref().unwrap(), &m.transplant(&imgs[2], r).unwrap());
    let quad = m.interpolate(&imgs[..4], r, 4).unwrap();
    assert_eq!(quad[3][3].as_ref().unwrap(), &m.transplant(&imgs[3], r).unwrap());
    for frame in quad.iter().flatten().flatten() {
        assert!(frame.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(m.interpolate(&imgs, r, 3).is_err());
    assert!(m.interpolate(&imgs[..2], r, 0).is_err());
}

#[test]
fn swap_rows_mirror_each_other() {
    let f = fixture();
    let d = f.dir.path();
    let ck = s(&f.ckpt);
    let (a, b) = (s(&f.images[0]), s(&f.images[3]));
    assert!(transfig(&["swap", "--ckpt", ck, "--a", a, "--b", b, "--outdir", s(&d.join("ab"))]).status.success());
    assert!(transfig(&["swap", "--ckpt", ck, "--a", b, "--b", a, "--outdir", s(&d.join("ba"))]).status.success());
    let ab = read(&d.join("ab/swap.ppm"));
    let ba = read(&d.join("ba/swap.ppm"));
    assert_eq!(ab.shape(), [3, 16, 6 * 16]);
    assert_eq!(columns(&ab, 16, 2), columns(&ba, 16, 3));
    assert_eq!(columns(&ab, 16, 3), columns(&ba, 16, 2));
    assert_eq!(columns(&ab, 16, 0), read(&f.images[0]));
}

#[test]
fn transplant_onto_itself_is_reconstruction() {
    let f = fixture();
    let m = Model::load(&f.ckpt).unwrap();
    let x = read(&f.images[2]);
    assert_eq!(m.transplant(&x, &x).unwrap(), m.reconstruct(&x).unwrap());
}

#[test]
fn evaluation_commands_report_and_log() {
    let f = fixture();
    let logs = f.dir.path().join("logs");
    let ck = s(&f.ckpt);
    let o = transfig(&["eval-probe", "--ckpt", ck, "--samples", "600", "--log-dir", s(&logs)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("r2_object_from_u"));
    let o = transfig(&["eval-drift", "--ckpt", ck, "--pairs", "6", "--log-dir", s(&logs)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("match_rate"));
    assert_eq!(std::fs::read_to_string(logs.join("probe.csv")).unwrap().lines().count(), 2);
    assert_eq!(std::fs::read_to_string(logs.join("drift.csv")).unwrap().lines().count(), 2);
    assert_eq!(transfig(&["eval-probe", "--ckpt", ck, "--samples", "10"]).status.code(), Some(2));
}

#[test]
fn gradcheck_command_passes() {
    let o = transfig(&["gradcheck", "--target", "discriminator"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("-> ok"));
}
