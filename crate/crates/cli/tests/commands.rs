use std::path::Path;
use std::process::Command as Process;

use clap::Parser;
use subpipe_cli::{parse_injection, resolve_config, run, Cli};
use subpipe_core::experiments::Injection;
use subpipe_core::{LossyCodec, Mode, RunConfig};

const TINY: &str = r#"{
    "dims": {"d": 16, "d_ff": 32, "heads": 2, "layers": 3, "vocab": 256, "n_max": 8, "k": 4},
    "plan": {"steps": 10, "microbatches": 2, "batch": 4, "seq": 8, "grassmann_period": 4, "stats_every": 5},
    "stages": 3,
    "synthetic_corpus_bytes": 4096
}"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("subpipe").chain(args.iter().copied())).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn single_stage_training_has_finite_losses() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("run");
    let args = cli(&[
        "train",
        "--config",
        &config,
        "--stages",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let summary = run(&args).unwrap();
    assert!(
        summary.starts_with("train mode=compressed stages=1 steps=10"),
        "{summary}"
    );

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let loss = header.iter().position(|h| *h == "loss").unwrap();
    let losses: Vec<f64> = lines
        .map(|l| l.split(',').nth(loss).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 10);
    assert!(losses.iter().all(|l| l.is_finite()), "{losses:?}");
}

#[test]
fn every_subcommand_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let commands: [&[&str]; 4] = [
        &["train", "--log-frames", "--checkpoint"],
        &["compare-codecs", "--convergence", "--steps", "4"],
        &["rank-diag"],
        &["error-accum", "--trials", "3"],
    ];
    for (i, command) in commands.iter().enumerate() {
        let outputs: Vec<_> = ["a", "b"]
            .iter()
            .map(|run_name| {
                let out = dir.path().join(format!("{i}{run_name}"));
                let mut args = command.to_vec();
                args.extend([
                    "--config",
                    &config,
                    "--seed",
                    "7",
                    "--out",
                    out.to_str().unwrap(),
                ]);
                run(&cli(&args)).unwrap();
                files(&out)
            })
            .collect();
        assert!(outputs[0].len() >= 2, "{command:?} wrote {:?}", outputs[0]);
        assert_eq!(outputs[0], outputs[1], "{command:?} is not reproducible");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let args = cli(&[
        "train",
        "--config",
        &config,
        "--mode",
        "lossy:topk:4",
        "--stages",
        "3",
        "--tcp",
        "127.0.0.1:0",
        "--seed",
        "11",
        "--realtime",
        "--out",
        "elsewhere",
        "--steps",
        "3",
    ]);
    let cfg = resolve_config(&args.common).unwrap();
    assert_eq!(
        cfg.mode,
        Mode::Lossy {
            codec: LossyCodec::TopK,
            ratio: 4.0
        }
    );
    assert_eq!(cfg.stages, 3);
    assert_eq!(cfg.tcp, vec!["127.0.0.1:0".to_string()]);
    assert_eq!(cfg.seed, 11);
    assert!(cfg.realtime);
    assert_eq!(cfg.out_dir, Path::new("elsewhere"));
    assert_eq!(cfg.plan.steps, 3);
    assert_eq!(cfg.dims.d, 16);
}

#[test]
fn invalid_settings_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let err =
        resolve_config(&cli(&["train", "--config", &config, "--stages", "9"]).common).unwrap_err();
    assert!(format!("{err:#}").contains("stages"), "{err:#}");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"dims": {"d": 16, "colour": 3}}"#).unwrap();
    let err =
        resolve_config(&cli(&["train", "--config", bad.to_str().unwrap()]).common).unwrap_err();
    assert!(format!("{err:#}").contains("colour"), "{err:#}");

    assert!(Cli::try_parse_from(["subpipe", "train", "--mode", "lossy:zip:4"]).is_err());
}

#[test]
fn injections_parse() {
    let cfg = RunConfig::default();
    assert_eq!(
        parse_injection("noise:0.01", &cfg).unwrap(),
        Injection::Noise { relative: 0.01 }
    );
    assert_eq!(
        parse_injection("svd", &cfg).unwrap(),
        Injection::Codec {
            codec: LossyCodec::Svd,
            ratio: 8.0
        }
    );
    assert_eq!(
        parse_injection("quantize:2", &cfg).unwrap(),
        Injection::Codec {
            codec: LossyCodec::Quantize,
            ratio: 2.0
        }
    );
    assert!(parse_injection("noise", &cfg).is_err());
    assert!(parse_injection("noise:-1", &cfg).is_err());
    assert!(parse_injection("gzip", &cfg).is_err());
}

#[test]
fn binary_prints_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("bin");
    let output = Process::new(env!("CARGO_BIN_EXE_subpipe"))
        .args([
            "train",
            "--config",
            &config,
            "--steps",
            "2",
            "--out",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert_eq!(
        stdout.trim_end(),
        std::fs::read_to_string(out.join("summary.txt"))
            .unwrap()
            .trim_end()
    );

    let output = Process::new(env!("CARGO_BIN_EXE_subpipe"))
        .args(["train", "--config", &config, "--stages", "0"])
        .output()
        .unwrap();
    assert!(!output.status.success());
}
