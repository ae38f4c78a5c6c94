use std::path::Path;
use std::process::Command;

use oat_cli::checkpoint::MAGIC;
use oat_cli::commands::{
    cmd_saliency, cmd_stats_export, cmd_sweep, cmd_train, eval_attack, run_training, sweep,
    SweepArgs,
};
use oat_cli::export::{parse_sweep_csv, SWEEP_HEADER};
use oat_cli::{Checkpoint, CliError, RunConfig};
use oat_core::Model;
use proptest::prelude::*;

fn tiny(mode: &str, out: &Path) -> RunConfig {
    RunConfig::parse(&format!(
        "mode = {mode}\n\
         lambda = 0.5\n\
         epochs = 1\n\
         batch_size = 8\n\
         max_steps = 2\n\
         steps = 2\n\
         encoder = RO-16\n\
         synth_train_per_class = 2\n\
         synth_test_per_class = 1\n\
         output = {}\n",
        out.display()
    ))
    .unwrap()
}

/// Parameters and running statistics as raw bits.
fn state(m: &Model<f32>) -> Vec<(String, Vec<u32>)> {
    let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut out: Vec<_> = m
        .params()
        .into_iter()
        .map(|(n, t)| (n, bits(t.data())))
        .collect();
    out.extend(m.buffers().into_iter().map(|(n, b)| (n, bits(b))));
    out
}

fn oat_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_oat"))
}

#[test]
fn defaults_carry_the_standard_hyper_parameters() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.attack.epsilon, 8.0 / 255.0);
    assert_eq!(cfg.attack.step_size, 2.0 / 255.0);
    assert_eq!(cfg.attack.steps, 7);
    assert_eq!(cfg.momentum, 0.9);
    assert_eq!(cfg.weight_decay, 5e-4);
    assert_eq!(cfg.encoder.to_string(), "RO-128");
    assert_eq!(cfg.lambdas, vec![0.0, 0.1, 0.2, 0.3, 0.4, 1.0]);
}

#[test]
fn unknown_keys_are_rejected_with_their_line() {
    let err = RunConfig::parse("# header\nmode = oat\nlearning_rate = 0.1\n").unwrap_err();
    match err {
        CliError::Config { line, message } => {
            assert_eq!(line, 3);
            assert!(message.contains("learning_rate"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_values_are_rejected() {
    for text in [
        "epochs = many",
        "epsilon = 8/0",
        "bn = triple",
        "mode = oat\nlambdas = 0,2",
        "random_start = yes",
        "dataset = idx",
    ] {
        assert!(RunConfig::parse(text).is_err(), "{text}");
    }
}

#[test]
fn comments_and_fractions_parse() {
    let cfg = RunConfig::parse("epsilon = 4/255   # half budget\n\n  lr=0.1\n").unwrap();
    assert_eq!(cfg.attack.epsilon, 4.0 / 255.0);
    assert_eq!(cfg.lr, 0.1);
}

proptest! {
    #[test]
    fn canonical_text_round_trips(lr in 1e-4f64..1.0, seed in 0u64..1000, eps in 0.0f64..0.1, oats in any::<bool>()) {
        let mode = if oats { "oats" } else { "oat" };
        let cfg = RunConfig::parse(&format!("mode = {mode}\nlr = {lr}\nseed = {seed}\nepsilon = {eps}\n")).unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["oat", "oats", "pgd_at", "standard"] {
        let (ckpt, _) = run_training(&tiny(mode, dir.path())).unwrap();
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(state(&back.model), state(&ckpt.model), "{mode}");
        assert_eq!(back.model.encoder(), ckpt.model.encoder());
        assert_eq!(back.step, ckpt.step);
        assert_eq!(back.to_bytes(), bytes, "{mode}");
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = run_training(&tiny("oat", dir.path())).unwrap();
    let bytes = ckpt.to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    let msg = Checkpoint::<f32>::from_bytes(&bad).unwrap_err().to_string();
    assert!(msg.contains("OATCKPT1"), "{msg}");

    let msg = Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3])
        .unwrap_err()
        .to_string();
    assert!(msg.contains("truncated"), "{msg}");

    assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());

    // A header whose class count disagrees with the stored dense layer.
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap();
    let edited = header.replace("\nclasses = 10\n", "\nclasses = 9\n");
    assert_ne!(edited, header);
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
    out.extend_from_slice(edited.as_bytes());
    out.extend_from_slice(&bytes[16 + hlen..]);
    let msg = Checkpoint::<f32>::from_bytes(&out).unwrap_err().to_string();
    assert!(msg.contains("shape mismatch"), "{msg}");
}

#[test]
fn train_and_sweep_files_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ta = cmd_train(&tiny("oat", a.path())).unwrap();
    let tb = cmd_train(&tiny("oat", b.path())).unwrap();
    assert_eq!(
        std::fs::read(&ta.checkpoint).unwrap(),
        std::fs::read(&tb.checkpoint).unwrap()
    );
    assert_eq!(
        std::fs::read(&ta.log).unwrap(),
        std::fs::read(&tb.log).unwrap()
    );

    let args = SweepArgs {
        lambdas: vec![0.0, 0.1, 0.2, 0.3, 0.4, 1.0],
        widths: vec![],
        attack: eval_attack("pgd", 8.0 / 255.0, Some(2), 2.0 / 255.0).unwrap(),
        seed: 5,
        count: Some(6),
    };
    let before = std::fs::read(&ta.checkpoint).unwrap();
    let ca = a.path().join("s.csv");
    let cb = b.path().join("s.csv");
    let points = cmd_sweep(&ta.checkpoint, &args, &ca).unwrap();
    cmd_sweep(&tb.checkpoint, &args, &cb).unwrap();
    assert_eq!(std::fs::read(&ca).unwrap(), std::fs::read(&cb).unwrap());
    assert_eq!(
        std::fs::read(&ta.checkpoint).unwrap(),
        before,
        "sweep must not touch the checkpoint"
    );

    let text = std::fs::read_to_string(&ca).unwrap();
    assert_eq!(text.lines().next(), Some(SWEEP_HEADER));
    assert_eq!(points.len(), 6);
    assert_eq!(parse_sweep_csv(&text).unwrap().len(), 6);

    // The in-memory model gives the same table as the stored one.
    let (mem, _) = run_training(&tiny("oat", a.path())).unwrap();
    let test = mem.config.load_test().unwrap();
    assert_eq!(sweep(&mem, &test, &args).unwrap(), points);
}

#[test]
fn sweep_rejects_out_of_range_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let t = cmd_train(&tiny("oat", dir.path())).unwrap();
    let args = SweepArgs {
        lambdas: vec![1.5],
        widths: vec![],
        attack: eval_attack("fgsm", 8.0 / 255.0, None, 2.0 / 255.0).unwrap(),
        seed: 0,
        count: Some(2),
    };
    assert!(cmd_sweep(&t.checkpoint, &args, &dir.path().join("x.csv")).is_err());
}

#[test]
fn saliency_writes_original_plus_one_map_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let t = cmd_train(&tiny("oat", dir.path())).unwrap();
    let out = dir.path().join("maps");
    let lambdas = [0.0, 0.1, 0.2, 0.3, 0.4, 1.0];
    let res = cmd_saliency(&t.checkpoint, &lambdas, 3, 1.0, &out).unwrap();
    assert_eq!(res.files.len(), 3 * (1 + lambdas.len()));
    for f in &res.files {
        let bytes = std::fs::read(f).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"), "{}", f.display());
        assert_eq!(bytes.len(), 13 + 256);
    }
    assert!(cmd_saliency(&t.checkpoint, &lambdas, 1000, 1.0, &out).is_err());
}

#[test]
fn stats_export_lists_both_branches() {
    let dir = tempfile::tempdir().unwrap();
    let t = cmd_train(&tiny("oat", dir.path())).unwrap();
    let out = dir.path().join("stats.csv");
    let sep = cmd_stats_export(&t.checkpoint, &out).unwrap();
    assert_eq!(sep.len(), 2);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().any(|l| l.starts_with("4,1,c,31,")));
    assert!(text.lines().any(|l| l.starts_with("4,1,a,31,")));
}

#[test]
fn binary_reports_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "mode = oat\nbogus = 1\n").unwrap();
    let out = oat_bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]: config line 2"), "{err}");

    let out = oat_bin()
        .args(["sweep", "--checkpoint"])
        .arg(dir.path().join("missing.oat"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]"));
}

#[test]
fn binary_train_then_flops() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, tiny("oats", &dir.path().join("run")).to_text()).unwrap();
    let out = oat_bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--set", "seed=3"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ckpt = dir.path().join("run").join("checkpoint.oat");
    assert!(Checkpoint::<f32>::load(&ckpt).unwrap().config.seed == 3);

    let out = oat_bin()
        .args(["flops", "--checkpoint"])
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let totals: Vec<u64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 3);
    assert!(totals.windows(2).all(|w| w[0] < w[1]), "{text}");
}
