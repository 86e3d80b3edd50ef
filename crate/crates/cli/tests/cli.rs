use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use depthforge::geometry::read_ply;
use depthforge::io::load_checkpoint;
use depthforge::units::{NetConfig, SafeNet};

const SMOKE: &str = "\
[train]
lr = 1e-3
batch_size = 2
height = 32
width = 64
iterations = 4
[net]
disp_bias_init = -3.5
[scenes]
count = 3
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_depthforge"));
    c.env_remove("DEPTHFORGE_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn train(dir: &Path, cfg: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(out);
    let o = run(bin().arg("train").arg("--config").arg(cfg).arg("--out").arg(&out).args(extra));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn zero_iterations_checkpoint_equals_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "s.cfg", SMOKE);
    let out = train(dir.path(), &cfg, "run", &["--iters", "0", "--seed", "7"]);
    let ckpt = load_checkpoint(&out.join("checkpoint.dfck")).unwrap();
    let init = SafeNet::new(
        NetConfig {
            disp_bias_init: -3.5,
            ..NetConfig::tiny()
        },
        7,
    )
    .unwrap();
    assert_eq!(ckpt.params.len(), init.store.len());
    for (_, e) in ckpt.params.entries() {
        let id = init.store.find(&e.name).unwrap();
        assert_eq!(init.store.value(id), &e.value, "{}", e.name);
    }
    assert_eq!(std::fs::read_to_string(out.join("loss.csv")).unwrap(), "iter,photo,smooth,seg,total,valid_px\n");
}

#[test]
fn train_writes_loss_rows_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "s.cfg", SMOKE);
    let out = train(dir.path(), &cfg, "run", &["--mode", "sequence", "--lr", "5e-4"]);
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let meta = json(&out.join("run.json"));
    let train = &meta["config"]["train"];
    assert_eq!(train["mode"], "sequence");
    // flag beats file, file beats default
    assert_eq!(train["lr"], 5e-4);
    assert_eq!(train["batch_size"], 2);
    assert_eq!(train["beta2"], 0.999);
    assert_eq!(meta["end_iteration"], 4);
}

#[test]
fn seed_environment_overrides_file_but_not_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "s.cfg", &format!("{SMOKE}[loss]\nlambda_seg = 1\n"));
    std::fs::write(&cfg, std::fs::read_to_string(&cfg).unwrap().replace("iterations = 4", "iterations = 0\nseed = 3")).unwrap();
    let seed_of = |extra: &[&str], env: Option<&str>| {
        let out = dir.path().join(format!("r{}", extra.len() + env.map_or(0, |_| 10)));
        let mut c = bin();
        c.arg("train").arg("--config").arg(&cfg).arg("--out").arg(&out).args(extra);
        if let Some(v) = env {
            c.env("DEPTHFORGE_SEED", v);
        }
        let o = run(&mut c);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        json(&out.join("run.json"))["config"]["train"]["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&[], None), 3);
    assert_eq!(seed_of(&[], Some("11")), 11);
    assert_eq!(seed_of(&["--seed", "5"], Some("11")), 5);

    let o = run(bin().args(["train", "--iters", "0", "--out"]).arg(dir.path().join("bad")).env("DEPTHFORGE_SEED", "x"));
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    for (text, needle) in [
        ("[train]\nlearning_rat = 1\n", "train.learning_rat"),
        ("[train]\nlr = fast\n", "train.lr"),
        ("[trian]\n", "trian"),
        ("[scenes]\nkind = cube\n", "scenes.kind"),
        ("[train]\nheight = 30\n", "multiples of 32"),
    ] {
        let cfg = write_cfg(dir.path(), "bad.cfg", text);
        let o = run(bin().arg("train").arg("--config").arg(&cfg).arg("--out").arg(dir.path().join("x")));
        assert_eq!(code(&o), 2, "{text}");
        assert!(stderr(&o).contains(needle), "{text}: {}", stderr(&o));
    }
}

#[test]
fn diverging_run_exits_3_and_keeps_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "s.cfg", SMOKE);
    let out = dir.path().join("run");
    let o = run(bin().arg("train").arg("--config").arg(&cfg).arg("--out").arg(&out).args(["--lr", "1e300"]));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
    assert!(std::fs::read_to_string(out.join("loss.csv")).unwrap().lines().count() >= 2);
}

#[test]
fn oracle_eval_is_exact_and_echoes_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "s.cfg", SMOKE);
    let out = dir.path().join("ev");
    let o = run(bin().arg("eval").arg("--config").arg(&cfg).arg("--oracle").arg("--per-class").arg("--out").arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta = json(&out.join("metrics.json"));
    assert_eq!(meta["metrics"]["abs_rel"], 0.0);
    assert_eq!(meta["metrics"]["a1"], 1.0);
    assert_eq!(meta["protocol"]["cap"], 80.0);
    assert_eq!(meta["config"]["eval"]["cap"], 80.0);
    let total = meta["metrics"]["n_pixels"].as_u64().unwrap();
    let per_class: u64 = meta["per_class"].as_object().unwrap().values().map(|m| m["n_pixels"].as_u64().unwrap()).sum();
    assert_eq!(per_class, total);
    assert!(std::fs::read_to_string(out.join("metrics.csv")).unwrap().starts_with("class,abs_rel,sq_rel,rmse,rmse_log,a1,a2,a3,n_pixels\n"));
}

#[test]
fn sweep_rows_match_scales_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "s.cfg", SMOKE);
    let run_dir = train(dir.path(), &cfg, "run", &[]);
    let ckpt = run_dir.join("checkpoint.dfck");

    let sweep = |scales: &str, name: &str| {
        let out = dir.path().join(name);
        let o = run(bin().arg("sweep").arg("--config").arg(&cfg).arg("--checkpoint").arg(&ckpt).args(["--scales", scales]).arg("--out").arg(&out));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        json(&out.join("sweep.json"))["rows"].as_array().unwrap().clone()
    };
    let three = sweep("1.0,0.5,0.1", "s3");
    assert_eq!(three.len(), 3);
    assert_eq!(three.iter().map(|r| r["scale"].as_f64().unwrap()).collect::<Vec<_>>(), vec![1.0, 0.5, 0.1]);
    let one = sweep("1.0", "s1");
    assert_eq!(one.len(), 1);

    let ev = dir.path().join("ev");
    let o = run(bin().arg("eval").arg("--config").arg(&cfg).arg("--checkpoint").arg(&ckpt).arg("--out").arg(&ev));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(one[0]["metrics"], json(&ev.join("metrics.json"))["metrics"]);
}

#[test]
fn oracle_sweep_has_constant_sq_rel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "s.cfg", SMOKE);
    let out = dir.path().join("sw");
    let o = run(bin().arg("sweep").arg("--config").arg(&cfg).arg("--gt").arg("--out").arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("scale,darkness,sq_rel,abs_rel,rmse,rmse_log,a1,a2,a3,n_pixels"));
    let sq: Vec<&str> = lines.map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(sq, vec!["0"; 4]);
}

#[test]
fn bad_sweep_scale_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin().args(["sweep", "--oracle", "--scales", "1.0,1.5", "--out"]).arg(dir.path()));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn checkpoint_problems_exit_4_and_missing_file_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "s.cfg", SMOKE);
    let ckpt = train(dir.path(), &cfg, "run", &["--iters", "0"]).join("checkpoint.dfck");

    let wide = write_cfg(dir.path(), "wide.cfg", &SMOKE.replace("[net]", "[net]\ndec_channels = 8, 8, 16, 16, 64"));
    let eval = |cfg: &Path, ckpt: &Path| {
        run(bin().arg("eval").arg("--config").arg(cfg).arg("--checkpoint").arg(ckpt).arg("--out").arg(dir.path().join("e")))
    };
    let o = eval(&wide, &ckpt);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let corrupt = dir.path().join("corrupt.dfck");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&corrupt, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&eval(&cfg, &corrupt)), 4);

    assert_eq!(code(&eval(&cfg, &dir.path().join("missing.dfck"))), 6);
}

#[test]
fn gradcheck_filter_and_corrupted_fixture() {
    let o = run(bin().args(["gradcheck", "--filter", "apu"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let cases: Vec<&str> = out.lines().skip(1).filter(|l| l.contains('/')).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert!(!cases.is_empty());
    assert!(cases.iter().all(|c| c.contains("apu")), "{cases:?}");

    let o = run(bin().args(["gradcheck", "--filter", "square", "--corrupted"]));
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("fixture/corrupted_square"));

    let o = run(bin().args(["gradcheck", "--filter", "no-such-case"]));
    assert_eq!(code(&o), 2);
}

#[test]
fn full_gradcheck_passes() {
    let o = run(bin().arg("gradcheck"));
    assert_eq!(code(&o), 0, "{}\n{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
}

#[test]
fn ground_truth_plane_exports_coplanar_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "p.cfg", &format!("{SMOKE}kind = plane\n"));
    let ply = dir.path().join("plane.ply");
    let o = run(bin().arg("export-pointcloud").arg("--config").arg(&cfg).arg("--gt").arg("--out").arg(&ply));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let verts = read_ply(&std::fs::read(&ply).unwrap()).unwrap();
    assert_eq!(verts.len(), 32 * 64);
    assert_eq!(json(&ply.with_extension("json"))["vertices"], 32 * 64);

    // least-squares fit of z = a·x + b·y + c
    let (mut m, mut r) = ([[0.0f64; 3]; 3], [0.0f64; 3]);
    for v in &verts {
        let row = [v.position[0], v.position[1], 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += row[i] * row[j];
            }
            r[i] += row[i] * v.position[2];
        }
    }
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    let coef: Vec<f64> = (0..3)
        .map(|k| {
            let mut mk = m;
            for i in 0..3 {
                mk[i][k] = r[i];
            }
            det(&mk) / d
        })
        .collect();
    let worst = verts.iter().map(|v| (coef[0] * v.position[0] + coef[1] * v.position[1] + coef[2] - v.position[2]).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "plane-fit residual {worst}");
    assert!((coef[2] - 10.0).abs() < 1e-6);
}
