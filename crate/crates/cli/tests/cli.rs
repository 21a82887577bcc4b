use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 7
run_name = "tiny"

[data]
synthetic_count = 20
image_size = 32
patch_size_hr = 16

[generators]
specs = ["residual-chain:width=4", "attention-strided:width=4"]

[degrader]
steps = 3
batch_size = 2
disc_width = 4

[sr_model]
width = 4
blocks = 1

[sr]
steps = 4
val_every = 2
p_max = 4
batch_size = 2

[eval]
fidelity_samples = 100
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.toml"), config).unwrap();
        Self { dir }
    }

    fn tiny() -> Self {
        Self::new(TINY)
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run_dir(&self) -> PathBuf {
        self.out().join("tiny")
    }

    fn cmd(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut c = Command::new(env!("CARGO_BIN_EXE_stochsr"));
        c.arg("--config")
            .arg(self.dir.path().join("config.toml"))
            .arg("--out")
            .arg(self.out())
            .args(args)
            .env("RUST_LOG", "warn");
        for (k, v) in env {
            c.env(k, v);
        }
        c.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.cmd(args, &[]);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn prepare_renders_the_corpus_and_is_repeatable() {
    let s = Sandbox::new(&TINY.replace("synthetic_count = 20", "synthetic_count = 64"));
    s.ok(&["prepare"]);
    let run = s.run_dir();
    assert_eq!(pngs(&run.join("corpus/hr")), 64);
    assert_eq!(pngs(&run.join("corpus/lr")), 64);
    let first = json(&run.join("manifests/prepare.json"));
    let splits = fs::read(run.join("splits.json")).unwrap();
    s.ok(&["prepare"]);
    let second = json(&run.join("manifests/prepare.json"));
    assert_eq!(fs::read(run.join("splits.json")).unwrap(), splits);
    for key in ["config_hash", "lineage_hash", "seed", "outputs"] {
        assert_eq!(first[key], second[key], "{key}");
    }
}

#[test]
fn fifty_items_split_forty_five_five() {
    let s = Sandbox::new(&TINY.replace("synthetic_count = 20", "synthetic_count = 50"));
    s.ok(&["prepare"]);
    let m = json(&s.run_dir().join("splits.json"));
    let len = |split: &str, side: &str| m[split][side].as_array().unwrap().len();
    assert_eq!(len("train", "hr") + len("train", "lr"), 40);
    assert_eq!(len("val", "hr"), 5);
    assert_eq!(len("test", "hr"), 5);
    assert_eq!(len("val", "lr"), 5);
    assert_eq!(len("test", "lr"), 5);
}

#[test]
fn full_pipeline_is_reproducible_and_leaves_no_orphans() {
    let run = || {
        let s = Sandbox::tiny();
        s.ok(&["prepare"]);
        s.ok(&["train-degraders"]);
        s.ok(&["train-sr"]);
        s.ok(&["evaluate"]);
        s.ok(&["robustness"]);
        s
    };
    let (a, b) = (run(), run());
    let read = |s: &Sandbox, rel: &str| fs::read(s.run_dir().join(rel)).unwrap();
    for rel in [
        "generators/g0-residual-chain.log.csv",
        "generators/g1-attention-strided.log.csv",
        "generators/g0-residual-chain.json",
        "sr-full/curves.csv",
        "eval-full/metrics.json",
        "robustness-full/curves.json",
    ] {
        assert_eq!(read(&a, rel), read(&b, rel), "{rel}");
    }

    let curves = json(&a.run_dir().join("robustness-full/curves.json"));
    let curves = curves.as_array().unwrap();
    assert_eq!(curves.len(), 3);
    for c in curves {
        assert_eq!(c["psnr_at_sigma"].as_array().unwrap().len(), 5);
    }
    assert!(a.run_dir().join("robustness-full/plot.png").is_file());

    let metrics = json(&a.run_dir().join("eval-full/metrics.json"));
    assert_eq!(metrics["models"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["fidelity"].as_array().unwrap().len(), 2);

    let orphans = stochsr::pipeline::orphans(&a.run_dir()).unwrap();
    assert!(orphans.is_empty(), "{orphans:?}");
}

#[test]
fn zero_step_degraders_save_their_initialization() {
    let s = Sandbox::tiny();
    s.ok(&["prepare"]);
    let o = s.cmd(&["train-degraders"], &[("STOCHSR_DEGRADER__STEPS", "0")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = stochsr::config::load(
        Some(&s.dir.path().join("config.toml")),
        [("STOCHSR_DEGRADER__STEPS".to_string(), "0".to_string())],
        &stochsr::config::Overrides {
            out: Some(s.out()),
            ..Default::default()
        },
    )
    .unwrap();
    let fresh = stochsr::generator::build_ensemble(&cfg.generators.specs, 3, 4, cfg.seed).unwrap();
    for g in fresh.members() {
        let p = s.run_dir().join("generators").join(format!("{}.json", g.arch_id()));
        let (saved, _) = stochsr::generator::DegradationGenerator::load(&p).unwrap();
        assert_eq!(saved.params().checksum(), g.params().checksum(), "{}", g.arch_id());
    }
}

#[test]
fn ablation_flag_sets_loss_weights() {
    let s = Sandbox::tiny();
    let collab = |arm: &str| {
        let overrides = stochsr::config::Overrides {
            ablation: Some(arm.parse().unwrap()),
            ..Default::default()
        };
        stochsr::config::load(Some(&s.dir.path().join("config.toml")), [], &overrides)
            .unwrap()
            .collab()
    };
    let full = collab("full");
    assert!(full.lambda_col > 0.0 && full.lambda_ada > 0.0);
    assert_eq!(collab("cl_no_ada").lambda_ada, 0.0);
    assert_eq!(collab("cl_no_ada").lambda_col, full.lambda_col);
    assert_eq!((collab("naive").lambda_col, collab("naive").lambda_ada), (0.0, 0.0));
    assert_eq!(code(&s.cmd(&["show-config"], &[("STOCHSR_ABLATION", "cl_no_ada")])), 0);
}

#[test]
fn paper_preset_values() {
    let s = Sandbox::new("");
    let o = s.cmd(&["show-config", "--preset", "paper"], &[]);
    assert!(o.status.success());
    let v: toml::Value = toml::from_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(v["sr"]["lambda_sup"].as_float(), Some(1.0));
    assert_eq!(v["sr"]["lambda_col"].as_float(), Some(0.01));
    assert_eq!(v["sr"]["lambda_ada"].as_float(), Some(10.0));
    assert_eq!(v["sr"]["p_max"].as_integer(), Some(1_000_000));
    assert_eq!(v["sr"]["k"].as_integer(), Some(2));
    assert_eq!(v["data"]["patch_size_hr"].as_integer(), Some(64));
}

#[test]
fn exit_codes() {
    let s = Sandbox::new("[sr]\nnot_a_key = 1\n");
    let o = s.cmd(&["show-config"], &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sr.not_a_key"));

    let s = Sandbox::tiny();
    assert_eq!(code(&s.cmd(&["show-config"], &[("STOCHSR_SR__STEPS", "\"many\"")])), 2);
    assert_eq!(code(&s.cmd(&["train-sr", "--ablation", "bogus"], &[])), 2);
    assert_eq!(code(&s.cmd(&["no-such-verb"], &[])), 2);

    let mut c = Command::new(env!("CARGO_BIN_EXE_stochsr"));
    let missing = c.args(["--config", "/nonexistent/config.toml", "show-config"]).output().unwrap();
    assert_eq!(code(&missing), 3);
    assert_eq!(code(&s.cmd(&["train-degraders"], &[])), 3);

    s.ok(&["prepare"]);
    assert_eq!(code(&s.cmd(&["train-sr"], &[])), 3);
    s.ok(&["train-degraders"]);
    // same run directory, generators trained under a different config
    let stale = s.cmd(&["train-sr"], &[("STOCHSR_DEGRADER__CYCLE_WEIGHT", "5.0")]);
    assert_eq!(code(&stale), 5, "{}", String::from_utf8_lossy(&stale.stderr));
}

#[test]
fn identical_hr_scores_perfectly() {
    let s = Sandbox::tiny();
    s.ok(&["prepare"]);
    let hr = s.run_dir().join("corpus/hr/img0000.png");
    let a = stochsr::io::read_png(&hr).unwrap();
    let r = stochsr::metrics::MetricReport::score(
        &["img0000".into()],
        std::slice::from_ref(&a),
        std::slice::from_ref(&a),
        stochsr::metrics::ReportMeta {
            config_hash: String::new(),
            seed: 0,
            dataset: "test".into(),
            model: "identity".into(),
        },
    )
    .unwrap();
    assert_eq!(r.aggregate.ssim, 1.0);
    assert!(r.aggregate.psnr.is_infinite());
    assert!(serde_json::to_string(&r).unwrap().contains("\"inf\""));
}
