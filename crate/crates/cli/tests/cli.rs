//! End-to-end runs of the `prosody-lab` binary at toy scale.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prosody_priors::training::{smoothed_ends, Checkpoint};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prosody-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(args: &[&str]) -> i32 {
    lab(args).status.code().expect("exit code")
}

fn ok(args: &[&str]) {
    let out = lab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file of a directory tree, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    files
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

const TINY_CORPUS: &str = r#"{"corpus": {"n_utterances": 24, "vocab_size": 8, "min_len": 4,
    "max_len": 8, "max_duration": 8}, "heldout": 6}"#;
const TINY_VAE: &str = r#"{"embed_dim": 4, "text_hidden": 6, "enc_hidden": 8,
    "dec_hidden": 8, "prior_hidden": 6, "batch_size": 6, "steps": 30}"#;

/// Runs every command into `root` and returns nothing; paths are fixed
/// relative to `root` so two runs can be compared file by file.
fn pipeline(root: &Path, cfg: &Path, workers: &str) {
    let p = |name: &str| root.join(name);
    let data = p("data");
    let corpus = data.join("corpus.jsonl");
    let heldout = data.join("heldout.jsonl");
    let vae = cfg.join("vae.json");
    ok(&[
        "gen-data",
        "--config",
        s(&cfg.join("corpus.json")),
        "--seed",
        "5",
        "--out",
        s(&data),
    ]);
    ok(&[
        "train",
        "fvae",
        "--config",
        s(&vae),
        "--corpus",
        s(&corpus),
        "--dim",
        "3",
        "--out",
        s(&p("fvae")),
    ]);
    ok(&[
        "train",
        "dvae",
        "--config",
        s(&vae),
        "--corpus",
        s(&corpus),
        "--dim",
        "3",
        "--out",
        s(&p("dvae")),
    ]);
    ok(&[
        "finetune-prior",
        "--checkpoint",
        s(&p("dvae/checkpoint.json")),
        "--corpus",
        s(&corpus),
        "--steps",
        "20",
        "--out",
        s(&p("ft")),
    ]);
    ok(&[
        "extract-latents",
        "--checkpoint",
        s(&p("fvae/checkpoint.json")),
        "--corpus",
        s(&corpus),
        "--workers",
        workers,
        "--out",
        s(&p("lat")),
    ]);
    let lat = p("lat/latents.jsonl");
    ok(&[
        "train",
        "flow",
        "--latents",
        s(&lat),
        "--steps",
        "30",
        "--out",
        s(&p("flow")),
    ]);
    ok(&[
        "train",
        "ar-prior",
        "--latents",
        s(&lat),
        "--steps",
        "30",
        "--out",
        s(&p("ar")),
    ]);
    let fvae = p("fvae/checkpoint.json");
    for (name, ckpt, extra) in [
        ("s_flow", p("flow/checkpoint.json"), Some(&fvae)),
        ("s_ar", p("ar/checkpoint.json"), Some(&fvae)),
        ("s_dvae", p("ft/checkpoint.json"), None),
    ] {
        let out = p("samples").join(name);
        let mut args = vec![
            "sample",
            "--checkpoint",
            s(&ckpt),
            "--corpus",
            s(&heldout),
            "--workers",
            workers,
            "--out",
            s(&out),
        ];
        if let Some(f) = extra {
            args.extend(["--fvae", s(f)]);
        }
        ok(&args);
    }
    let samples: Vec<PathBuf> = ["s_flow", "s_ar", "s_dvae"]
        .iter()
        .map(|n| p("samples").join(n).join("samples.jsonl"))
        .collect();
    ok(&[
        "eval",
        "recon",
        "--checkpoint",
        s(&fvae),
        "--corpus",
        s(&heldout),
        "--workers",
        workers,
        "--out",
        s(&p("e_rec")),
    ]);
    let mut express = vec!["eval", "express", "--corpus", s(&heldout), "--out"];
    let e_exp = p("e_exp");
    express.push(s(&e_exp));
    let mut diversity = vec!["eval", "diversity", "--out"];
    let e_div = p("e_div");
    diversity.push(s(&e_div));
    for f in &samples {
        express.extend(["--samples", s(f)]);
        diversity.extend(["--samples", s(f)]);
    }
    ok(&express);
    ok(&diversity);
    ok(&[
        "report",
        "--input",
        s(&p("e_rec")),
        "--input",
        s(&e_exp),
        "--input",
        s(&e_div),
        "--out",
        s(&p("report")),
    ]);
}

fn configs(dir: &Path) -> PathBuf {
    let cfg = dir.join("cfg");
    fs::create_dir_all(&cfg).unwrap();
    write_config(&cfg, "corpus.json", TINY_CORPUS);
    write_config(&cfg, "vae.json", TINY_VAE);
    cfg
}

#[test]
fn every_command_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&a, &cfg, "1");
    pipeline(&b, &cfg, "3");
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ta {
        assert!(
            bytes == &tb[name],
            "{} differs between runs",
            name.display()
        );
    }
    for step in [
        "data", "fvae", "dvae", "ft", "lat", "flow", "ar", "e_rec", "report",
    ] {
        assert!(ta.contains_key(&Path::new(step).join("config.json")));
        let manifest: serde_json::Value =
            serde_json::from_slice(&ta[&Path::new(step).join("manifest.json")]).unwrap();
        for art in manifest["artifacts"].as_array().unwrap() {
            let file = Path::new(step).join(art["file"].as_str().unwrap());
            let digest = prosody_priors::corpus::hex_digest(&ta[&file]);
            assert_eq!(
                art["sha256"].as_str().unwrap(),
                digest,
                "{}",
                file.display()
            );
        }
    }
    let md = String::from_utf8(ta[Path::new("report/report.md")].clone()).unwrap();
    let order: Vec<usize> = [
        "| Real |",
        "| FVAE std 0.5 |",
        "| DVAE std 0.5 |",
        "| Flow std 0.33 |",
        "| Flow std 0.8 |",
    ]
    .iter()
    .map(|row| md.find(row).unwrap_or_else(|| panic!("{row} missing")))
    .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]), "{md}");
}

#[test]
fn finetune_leaves_encoder_and_decoder_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs(dir.path());
    let root = dir.path();
    let corpus = root.join("data/corpus.jsonl");
    ok(&[
        "gen-data",
        "--config",
        s(&cfg.join("corpus.json")),
        "--out",
        s(&root.join("data")),
    ]);
    ok(&[
        "train",
        "dvae",
        "--config",
        s(&cfg.join("vae.json")),
        "--corpus",
        s(&corpus),
        "--out",
        s(&root.join("dvae")),
    ]);
    let before_bytes = fs::read(root.join("dvae/checkpoint.json")).unwrap();
    ok(&[
        "finetune-prior",
        "--checkpoint",
        s(&root.join("dvae/checkpoint.json")),
        "--corpus",
        s(&corpus),
        "--steps",
        "20",
        "--config",
        s(&write_config(
            root,
            "ft.json",
            r#"{"validation_fraction": 0.0, "lr": 0.005, "batch_size": 6}"#,
        )),
        "--out",
        s(&root.join("ft")),
    ]);
    assert_eq!(
        fs::read(root.join("dvae/checkpoint.json")).unwrap(),
        before_bytes
    );
    let before = Checkpoint::load(&root.join("dvae/checkpoint.json")).unwrap();
    let after = Checkpoint::load(&root.join("ft/checkpoint.json")).unwrap();
    let frozen: Vec<&str> = before
        .params
        .keys()
        .filter(|n| !n.starts_with("prior."))
        .map(String::as_str)
        .collect();
    assert!(!frozen.is_empty());
    assert_eq!(
        before.param_checksum(&frozen),
        after.param_checksum(&frozen)
    );
    assert_ne!(
        before.param_checksum(&["prior."]),
        after.param_checksum(&["prior."])
    );
}

#[test]
fn flow_nll_trace_decreases_on_extracted_latents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs(dir.path());
    let root = dir.path();
    let corpus = root.join("data/corpus.jsonl");
    ok(&[
        "gen-data",
        "--config",
        s(&cfg.join("corpus.json")),
        "--out",
        s(&root.join("data")),
    ]);
    ok(&[
        "train",
        "fvae",
        "--config",
        s(&cfg.join("vae.json")),
        "--corpus",
        s(&corpus),
        "--out",
        s(&root.join("fvae")),
    ]);
    ok(&[
        "extract-latents",
        "--checkpoint",
        s(&root.join("fvae/checkpoint.json")),
        "--corpus",
        s(&corpus),
        "--out",
        s(&root.join("lat")),
    ]);
    ok(&[
        "train",
        "flow",
        "--latents",
        s(&root.join("lat/latents.jsonl")),
        "--steps",
        "300",
        "--out",
        s(&root.join("flow")),
    ]);
    let csv = fs::read_to_string(root.join("flow/loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,term,value"));
    let nll: Vec<f64> = lines
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(nll.len(), 300);
    let (start, end) = smoothed_ends(&nll, 100).unwrap();
    assert!(end < start, "{start} -> {end}");
}

#[test]
fn gen_data_creates_directories_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs(dir.path());
    let (a, b) = (dir.path().join("x/y/a"), dir.path().join("b"));
    ok(&[
        "gen-data",
        "--config",
        s(&cfg.join("corpus.json")),
        "--seed",
        "7",
        "--out",
        s(&a),
    ]);
    ok(&[
        "gen-data",
        "--config",
        s(&cfg.join("corpus.json")),
        "--seed",
        "7",
        "--out",
        s(&b),
    ]);
    assert_eq!(tree(&a), tree(&b));
    let echo: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["corpus"]["seed"], 7);
    assert_eq!(echo["corpus"]["n_utterances"], 24);
    assert_eq!(echo["heldout"], 6);
    ok(&[
        "gen-data",
        "--config",
        s(&cfg.join("corpus.json")),
        "--seed",
        "8",
        "--out",
        s(&b),
    ]);
    assert_ne!(
        fs::read(a.join("corpus.jsonl")).unwrap(),
        fs::read(b.join("corpus.jsonl")).unwrap()
    );
}

#[test]
fn exit_codes_separate_usage_runtime_and_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs(dir.path());
    let root = dir.path();
    let out = |n: &str| root.join(n);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["gen-data"]), 1);
    assert_eq!(code(&["gen-data", "--bogus", "--out", s(&out("g"))]), 1);
    assert_eq!(code(&["train", "nope", "--out", s(&out("g"))]), 1);
    let unknown = write_config(root, "unknown.json", r#"{"heldout": 3, "colour": 1}"#);
    assert_eq!(
        code(&["gen-data", "--config", s(&unknown), "--out", s(&out("g"))]),
        1
    );
    let bad = write_config(root, "bad.json", r#"{"heldout": 500}"#);
    assert_eq!(
        code(&["gen-data", "--config", s(&bad), "--out", s(&out("g"))]),
        1
    );
    assert_eq!(
        code(&[
            "gen-data",
            "--config",
            s(&out("missing.json")),
            "--out",
            s(&out("g"))
        ]),
        1
    );
    assert!(!out("g").exists());
    assert_eq!(code(&["train", "fvae", "--out", s(&out("g"))]), 1);
    assert_eq!(
        code(&["train", "flow", "--dim", "4", "--out", s(&out("g"))]),
        1
    );

    let blocker = out("file");
    fs::write(&blocker, "x").unwrap();
    assert_eq!(
        code(&[
            "gen-data",
            "--config",
            s(&cfg.join("corpus.json")),
            "--out",
            s(&blocker.join("sub"))
        ]),
        2
    );
    let corpus = out("data/corpus.jsonl");
    ok(&[
        "gen-data",
        "--config",
        s(&cfg.join("corpus.json")),
        "--out",
        s(&out("data")),
    ]);
    assert_eq!(
        code(&[
            "train",
            "fvae",
            "--corpus",
            s(&out("nowhere.jsonl")),
            "--out",
            s(&out("g"))
        ]),
        2
    );

    let wild = write_config(
        root,
        "wild.json",
        r#"{"lr": 1e200, "clip_norm": null, "steps": 50}"#,
    );
    assert_eq!(
        code(&[
            "train",
            "fvae",
            "--config",
            s(&wild),
            "--corpus",
            s(&corpus),
            "--out",
            s(&out("div"))
        ]),
        3
    );
    assert!(!out("div").exists());

    ok(&[
        "train",
        "fvae",
        "--config",
        s(&cfg.join("vae.json")),
        "--corpus",
        s(&corpus),
        "--out",
        s(&out("fvae")),
    ]);
    let fvae = out("fvae/checkpoint.json");
    assert_eq!(
        code(&[
            "finetune-prior",
            "--checkpoint",
            s(&fvae),
            "--corpus",
            s(&corpus),
            "--out",
            s(&out("g"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "sample",
            "--checkpoint",
            s(&fvae),
            "--corpus",
            s(&corpus),
            "--temperature",
            "-1",
            "--out",
            s(&out("g")),
        ]),
        1
    );
    let big = write_config(
        root,
        "big.json",
        r#"{"corpus": {"n_utterances": 10, "vocab_size": 50}, "heldout": 2}"#,
    );
    ok(&["gen-data", "--config", s(&big), "--out", s(&out("big"))]);
    assert_eq!(
        code(&[
            "eval",
            "recon",
            "--checkpoint",
            s(&fvae),
            "--corpus",
            s(&out("big/corpus.jsonl")),
            "--out",
            s(&out("g")),
        ]),
        2
    );
    assert!(!out("g").exists());
}

#[test]
fn sampling_rejects_unknown_symbols_and_eval_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs(dir.path());
    let root = dir.path();
    let out = |n: &str| root.join(n);
    let corpus = out("data/corpus.jsonl");
    ok(&[
        "gen-data",
        "--config",
        s(&cfg.join("corpus.json")),
        "--out",
        s(&out("data")),
    ]);
    ok(&[
        "train",
        "dvae",
        "--config",
        s(&cfg.join("vae.json")),
        "--corpus",
        s(&corpus),
        "--out",
        s(&out("dvae")),
    ]);
    let big = write_config(
        root,
        "big.json",
        r#"{"corpus": {"n_utterances": 10, "vocab_size": 50}, "heldout": 2}"#,
    );
    ok(&["gen-data", "--config", s(&big), "--out", s(&out("big"))]);
    let run = lab(&[
        "sample",
        "--checkpoint",
        s(&out("dvae/checkpoint.json")),
        "--corpus",
        s(&out("big/corpus.jsonl")),
        "--out",
        s(&out("s")),
    ]);
    assert_eq!(run.status.code(), Some(2));
    assert!(!out("s").exists());

    fs::create_dir_all(out("empty")).unwrap();
    let run = lab(&[
        "eval",
        "diversity",
        "--samples",
        s(&out("empty")),
        "--out",
        s(&out("e")),
    ]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("no sample files"));
    assert!(!out("e").exists());
    assert_eq!(code(&["eval", "diversity", "--out", s(&out("e"))]), 1);
    assert_eq!(
        code(&["report", "--input", s(&out("empty")), "--out", s(&out("r"))]),
        2
    );
    assert!(!out("r").exists());
}
