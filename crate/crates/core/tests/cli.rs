//! Exit codes and flags of the `trpts` binary.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 1
[model]
image_size = 8
patch_size = 4
embed_dim = 8
num_layers = 3
num_heads = 2
mlp_ratio = 1
[task_a]
family = "shape-class"
num_classes = 2
train = 16
val = 8
test = 8
[task_b]
family = "quadrant-class"
num_classes = 4
train = 16
val = 8
test = 8
[pretrain]
epochs = 1
batch_size = 8
[finetune]
epochs = 1
batch_size = 8
[refine]
num_layers = 1
"#;

fn trpts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trpts"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn stages_run_and_refuse_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for stage in ["gen-data", "pretrain", "score"] {
        let o = trpts(&[stage, "--config", &cfg, "--out", out]);
        assert_eq!(
            code(&o),
            0,
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let o = trpts(&[
        "select", "--config", &cfg, "--out", out, "--top-m", "5", "--c-min", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sel = std::fs::read_to_string(dir.path().join("out/select/selection.json")).unwrap();
    assert!(sel.contains("\"c_min\": 2"));
    assert!(sel.contains("\"top_m_percent\": 5.0"));

    let o = trpts(&[
        "plan", "--config", &cfg, "--out", out, "--rho", "0.5", "--mode", "explicit", "--layers",
        "1,2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let plan = std::fs::read_to_string(dir.path().join("out/plan/plan.json")).unwrap();
    assert!(plan.contains("\"explicit\""));

    let o = trpts(&["gen-data", "--config", &cfg, "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let o = trpts(&[
        "gen-data", "--config", &cfg, "--out", out, "--force", "--seed", "9",
    ]);
    assert_eq!(code(&o), 0);
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let bad = write_config(dir.path(), "[model]\nembed_dimm = 3\n");
    assert_eq!(
        code(&trpts(&["gen-data", "--config", &bad, "--out", out])),
        2
    );
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(
        code(&trpts(&[
            "plan", "--config", &cfg, "--out", out, "--rho", "1.5"
        ])),
        2
    );
    assert_eq!(
        code(&trpts(&[
            "plan", "--config", &cfg, "--out", out, "--mode", "diagonal"
        ])),
        2
    );
    assert_eq!(
        code(&trpts(&[
            "select", "--config", &cfg, "--out", out, "--c-min", "0"
        ])),
        2
    );
    assert_eq!(code(&trpts(&["frobnicate", "--out", out])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace(
        "[pretrain]\n",
        "[pretrain]\nlearning_rate = 1e30\nfinal_learning_rate = 1e30\n",
    );
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(
        code(&trpts(&["gen-data", "--config", &cfg, "--out", out])),
        0
    );
    let o = trpts(&["pretrain", "--config", &cfg, "--out", out]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
