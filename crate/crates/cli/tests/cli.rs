use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iaa_core::adaptor::{AdaptorConfig, Variant};
use iaa_core::backbone::BackboneConfig;
use iaa_core::checkpoint::{load_checkpoint, save_checkpoint};
use iaa_core::config::ExperimentConfig;
use iaa_core::data::{gen_caption_pairs, image_to_json, DataConfig};
use iaa_core::trainer::{AblationAxes, EvalConfig, Schedule};
use iaa_core::verify::VerifyConfig;
use tempfile::TempDir;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        backbone: BackboneConfig {
            vocab_size: 512,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_hidden: 32,
            max_seq_len: 64,
            seed: 1,
        },
        adaptor: AdaptorConfig::with_variant(Variant::B, 1, 2).unwrap(),
        data: DataConfig {
            seed: 3,
            n_text: 64,
            n_caption: 64,
            n_instruction: 64,
            n_grounding: 64,
        },
        eval: EvalConfig {
            loss_samples: 8,
            caption_samples: 4,
            grounding_samples: 8,
            text_prompts: 4,
            text_decode_tokens: 6,
        },
        ablation: AblationAxes {
            variants: vec![Variant::C],
            duplicate_embeddings: vec![true],
            n_insertions: vec![1],
            schedules: vec![Schedule::Full, Schedule::SkipStage1],
            seeds: vec![0],
        },
        verify: VerifyConfig {
            grad_coordinates: 20,
            identity_inputs: 3,
            decode_tokens: 8,
            ..VerifyConfig::default()
        },
        ..ExperimentConfig::default()
    };
    cfg.pretrain.steps = 4;
    cfg.pretrain.batch_size = 4;
    for s in &mut cfg.stages {
        s.steps = 3;
        s.batch_size = 4;
    }
    cfg
}

struct Env {
    dir: TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("config.json");
        std::fs::write(&config, tiny_config().to_json().unwrap()).unwrap();
        Env { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_iaa"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn pretrained(&self) -> PathBuf {
        let p = self.path("text.ckpt");
        self.ok(&["pretrain-lm", "--out", s(&p)]);
        p
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn show_config_round_trips() {
    let env = Env::new();
    let text = env.ok(&["show-config"]);
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), tiny_config());
}

#[test]
fn gen_data_writes_every_kind() {
    let env = Env::new();
    let out = env.path("data");
    env.ok(&["gen-data", "--out", s(&out)]);
    for name in ["text", "caption", "instruction", "grounding"] {
        let text = std::fs::read_to_string(out.join(format!("{name}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), 64, "{name}");
    }
    // the written files drive training in place of regenerated data
    let ckpt = env.path("t.ckpt");
    env.ok(&["pretrain-lm", "--out", s(&ckpt), "--data", s(&out)]);
}

#[test]
fn pipeline_then_infer_verify_and_bench() {
    let env = Env::new();
    let text = env.pretrained();
    let out_dir = env.path("run");
    let summary: serde_json::Value = serde_json::from_str(&env.ok(&["pipeline", "--checkpoint", s(&text), "--out-dir", s(&out_dir)])).unwrap();
    assert_eq!(summary["nlp_preserved"], true);
    assert_eq!(summary["stages"].as_array().unwrap().len(), 4);
    assert!(out_dir.join("metrics.jsonl").exists());
    let last = out_dir.join("3_grounding_ft.ckpt");

    let text_out: serde_json::Value =
        serde_json::from_str(&env.ok(&["infer", "--checkpoint", s(&last), "--prompt", "1 8", "--max-new-tokens", "5"])).unwrap();
    assert_eq!(text_out["tokens"].as_array().unwrap().len(), 5);
    assert!(!text_out["components"].to_string().contains("Projector"));

    let image = env.path("image.json");
    let sample = &gen_caption_pairs(1, 1)[0];
    std::fs::write(&image, image_to_json(sample.image.as_ref().unwrap()).unwrap()).unwrap();
    let mm: serde_json::Value = serde_json::from_str(&env.ok(&[
        "infer",
        "--checkpoint",
        s(&last),
        "--mode",
        "multimodal",
        "--image",
        s(&image),
        "--prompt",
        "1 288 3",
        "--max-new-tokens",
        "4",
    ]))
    .unwrap();
    assert!(mm["components"].to_string().contains("InsertionLayers"));

    let verify = env.run(&["verify", "--checkpoint", s(&last)]);
    let lines = String::from_utf8_lossy(&verify.stdout);
    assert!(verify.status.success() && lines.lines().all(|l| l.starts_with("PASS")), "{lines}");

    let bench: serde_json::Value = serde_json::from_str(&env.ok(&["bench", "--checkpoint", s(&last), "--requests", "2"])).unwrap();
    assert_eq!(bench["flops"]["layer_stack_ratio"], 1.5);
}

#[test]
fn train_runs_single_stage() {
    let env = Env::new();
    let text = env.pretrained();
    let out = env.path("s1.ckpt");
    let metrics = env.path("s1.jsonl");
    let rep: serde_json::Value = serde_json::from_str(&env.ok(&[
        "train",
        "--stage",
        "stage1-pt",
        "--checkpoint",
        s(&text),
        "--out",
        s(&out),
        "--metrics",
        s(&metrics),
    ]))
    .unwrap();
    assert_eq!(rep["frozen_unchanged"], true);
    // one line per step plus the held-out line
    assert_eq!(std::fs::read_to_string(&metrics).unwrap().lines().count(), 3 + 1);
    let (model, header) = load_checkpoint(&out).unwrap();
    assert_eq!(header.provenance.stage, "stage1_pt");
    assert_eq!(header.provenance.backbone_hash, model.backbone.freeze_hash());
}

#[test]
fn ablate_emits_one_row_per_cell() {
    let env = Env::new();
    let text = env.pretrained();
    let out = env.path("cells.jsonl");
    env.ok(&["ablate", "--checkpoint", s(&text), "--out", s(&out)]);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
}

#[test]
fn moved_backbone_fails_verification_with_code_1() {
    let env = Env::new();
    let text = env.pretrained();
    let (mut model, header) = load_checkpoint(&text).unwrap();
    model.backbone.final_norm.data_mut()[0] += 0.5;
    let moved = env.path("moved.ckpt");
    save_checkpoint(&model, &header.provenance, &moved).unwrap();
    let out = env.run(&["verify", "--checkpoint", s(&moved)]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL freeze_hash"));
}

#[test]
fn error_classes_map_to_exit_codes() {
    let env = Env::new();
    let text = env.pretrained();

    let mut bytes = std::fs::read(&text).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    let corrupt = env.path("corrupt.ckpt");
    std::fs::write(&corrupt, &bytes).unwrap();
    assert_eq!(code(&env.run(&["verify", "--checkpoint", s(&corrupt)])), 3);
    assert_eq!(code(&env.run(&["verify", "--checkpoint", s(&env.path("missing.ckpt"))])), 3);

    let no_image = env.run(&["infer", "--checkpoint", s(&text), "--mode", "multimodal", "--prompt", "1"]);
    assert_eq!(code(&no_image), 2);
    assert_eq!(code(&env.run(&["infer", "--checkpoint", s(&text), "--prompt", "one"])), 2);
    assert_eq!(code(&env.run(&["no-such-command"])), 2);

    let bad = env.path("bad.json");
    std::fs::write(&bad, r#"{"backbone": {"vocab_size": 512, "extra": 1}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_iaa"))
        .args(["--config", s(&bad), "show-config"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
