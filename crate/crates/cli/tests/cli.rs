use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neuroute::harness::{load_checkpoint, ExperimentConfig};
use neuroute::problems::io::{read_instances, read_solutions};
use neuroute::problems::{exact_optimal, tour_length, validate_tour};

fn neuroute() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neuroute"));
    for (k, _) in std::env::vars() {
        if k.starts_with("NEUROUTE_") {
            c.env_remove(k);
        }
    }
    c
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, name: &str, kind: &str, n: usize, count: usize, seed: u64) -> PathBuf {
    let p = dir.join(name);
    ok(neuroute()
        .args(["gen-instances", "--kind", kind, "--n", &n.to_string(), "--count", &count.to_string()])
        .args(["--seed", &seed.to_string(), "--out"])
        .arg(&p)
        .output()
        .unwrap());
    p
}

fn train_tiny(dir: &Path, kind: &str, n: usize) -> PathBuf {
    let run = dir.join("run");
    let cfg = dir.join("tiny.toml");
    std::fs::write(
        &cfg,
        format!(
            "kind = \"{kind}\"\nn = {n}\nnum_instances = 8\ntrajectories_per_instance = 2\nembed_dim = 8\nnum_heads = 2\n\
             num_encoder_layers = 1\nfeedforward_dim = 16\nnum_minibatches = 2\nupdate_epochs = 1\neval_size = 8\n\
             total_env_steps = 2000\n"
        ),
    )
    .unwrap();
    ok(neuroute()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--override")
        .arg(format!("output_dir={:?}", run.to_str().unwrap()))
        .output()
        .unwrap());
    run.join("best.ckpt")
}

#[test]
fn gen_instances_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", "cvrp", 6, 4, 11);
    let b = gen(dir.path(), "b.jsonl", "cvrp", 6, 4, 11);
    let c = gen(dir.path(), "c.jsonl", "cvrp", 6, 4, 12);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    let insts = read_instances(&a).unwrap();
    assert_eq!(insts.len(), 4);
    assert!(insts.iter().all(|i| i.n() == 6));
}

#[test]
fn train_eval_solve_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "tsp", 6);
    assert!(load_checkpoint(&ckpt).is_ok());
    let insts = gen(dir.path(), "i.jsonl", "tsp", 6, 3, 5);

    let report = dir.path().join("e.json");
    let stdout = ok(neuroute()
        .args(["eval", "--strategies", "greedy,bnb", "--checkpoint"])
        .arg(&ckpt)
        .arg("--instances")
        .arg(&insts)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap());
    assert!(stdout.contains("reference exact"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["strategies"].as_array().unwrap().len(), 2);
    assert!(v["strategies"][1]["mean_gap"].as_f64().unwrap().abs() < 1e-9);

    for strategy in ["greedy", "sample", "multi-greedy", "beam", "active", "bnb"] {
        let out = dir.path().join(format!("{strategy}.jsonl"));
        ok(neuroute()
            .args(["solve", "--strategy", strategy, "--samples", "8", "--epochs", "2", "--width", "3", "--checkpoint"])
            .arg(&ckpt)
            .arg("--instances")
            .arg(&insts)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap());
        let sols = read_solutions(&out).unwrap();
        assert_eq!(sols.len(), 3);
        for s in &sols {
            assert!(validate_tour(&s.instance, &s.tour).is_feasible());
            assert!((tour_length(&s.instance, &s.tour).unwrap() - s.length).abs() < 1e-9);
            if strategy == "bnb" {
                assert!((exact_optimal(&s.instance).unwrap().0 - s.length).abs() < 1e-9);
            }
        }
        let first: serde_json::Value =
            serde_json::from_str(std::fs::read_to_string(&out).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(first["strategy"], strategy);
    }
}

#[test]
fn environment_fallback_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("env.jsonl");
    ok(neuroute()
        .env("NEUROUTE_KIND", "tsp")
        .env("NEUROUTE_N", "5")
        .env("NEUROUTE_COUNT", "2")
        .env("NEUROUTE_OUT", &p)
        .args(["gen-instances", "--count", "3"])
        .output()
        .unwrap());
    let insts = read_instances(&p).unwrap();
    assert_eq!(insts.len(), 3);
    assert!(insts.iter().all(|i| i.n() == 5));

    let run = dir.path().join("run");
    ok(neuroute()
        .env("NEUROUTE_N", "5")
        .env("NEUROUTE_EMBED_DIM", "8")
        .env("NEUROUTE_TOTAL_ENV_STEPS", "0")
        .env("NEUROUTE_OUTPUT_DIR", &run)
        .args(["train", "--override", "n=4", "--override", "num_heads=2"])
        .output()
        .unwrap());
    let cfg = ExperimentConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(cfg.n, 4);
    assert_eq!(cfg.embed_dim, 8);
    assert_eq!(cfg.total_env_steps, 0);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    ok(neuroute()
        .args(["train", "--override", "total_env_steps=0", "--override", "embed_dim=8", "--override", "num_heads=2"])
        .arg("--override")
        .arg(format!("output_dir={:?}", dir.path().join("r").to_str().unwrap()))
        .output()
        .unwrap());
    let mut bytes = std::fs::read(dir.path().join("r/checkpoint-000000.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let insts = gen(dir.path(), "i.jsonl", "tsp", 5, 1, 0);
    let out = neuroute()
        .args(["solve", "--strategy", "greedy", "--checkpoint"])
        .arg(&ckpt)
        .arg("--instances")
        .arg(&insts)
        .arg("--out")
        .arg(dir.path().join("s.jsonl"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));

    let out = neuroute().args(["train", "--override", "no_such_key=1"]).output().unwrap();
    assert!(!out.status.success());

    let cvrp = gen(dir.path(), "c.jsonl", "cvrp", 5, 1, 0);
    let out = neuroute()
        .args(["solve", "--strategy", "greedy", "--checkpoint"])
        .arg(dir.path().join("r/checkpoint-000000.ckpt"))
        .arg("--instances")
        .arg(&cvrp)
        .arg("--out")
        .arg(dir.path().join("s.jsonl"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}
