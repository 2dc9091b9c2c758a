//! End-to-end exercises of the `asrlab` binary: corpus synthesis, training,
//! decoding, scoring, and the documented exit codes, all through real
//! subprocesses on real files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn asrlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asrlab"))
        .args(args)
        .output()
        .expect("failed to spawn asrlab")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: expected exit {code}\nstdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out),
    );
}

/// Synthesize a small corpus and return (manifest path, reference trn path).
fn make_corpus(dir: &Path, count: usize, seed: u64, vocab: &str) -> (PathBuf, PathBuf) {
    let corpus = dir.join("corpus");
    let out = asrlab(&[
        "synth",
        "--out",
        corpus.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--vocab",
        vocab,
        "--min-tokens",
        "2",
        "--max-tokens",
        "4",
    ]);
    assert_exit(&out, 0, "synth");
    let manifest = corpus.join("manifest.tsv");

    // Reference transcripts are columns 1 and 3 of the manifest.
    let refs: String = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(|line| {
            let fields: Vec<&str> = line.split('\t').collect();
            format!("{}\t{}\n", fields[0], fields[2])
        })
        .collect();
    let ref_path = dir.join("ref.trn");
    fs::write(&ref_path, refs).unwrap();
    (manifest, ref_path)
}

fn write_config(path: &Path, manifest: &Path, out_dir: &Path, body: &str) {
    let text = format!(
        "model = \"aed\"\npreset = \"xs\"\nseed = 11\n\n[data]\ntrain_manifest = \"{}\"\n\
         valid_manifest = \"{}\"\noutput_dir = \"{}\"\n\n{body}",
        manifest.display(),
        manifest.display(),
        out_dir.display(),
    );
    fs::write(path, text).unwrap();
}

const SHORT_RUN: &str = "[training]\nsteps = 30\nframe_budget = 2000\nlog_every = 10\n\
    validate_every = 15\ncheckpoint_every = 20\npatience = 3\n\n\
    [optimizer]\nbase_peak_lr = 5e-3\nwarmup_steps = 20\n";

/// Train a throwaway few-step checkpoint for tests that only need a loadable
/// model, not a good one.
fn quick_checkpoint(dir: &Path, manifest: &Path) -> PathBuf {
    let config = dir.join("quick.toml");
    write_config(
        &config,
        manifest,
        &dir.join("quickrun"),
        "[training]\nsteps = 4\nframe_budget = 2000\nlog_every = 4\nvalidate_every = 10\n\
         checkpoint_every = 10\npatience = 3\n",
    );
    let out = asrlab(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0, "quick train");
    dir.join("quickrun").join("final.ckpt")
}

#[test]
fn end_to_end_overfit_run_recovers_every_transcript() {
    let dir = TempDir::new().unwrap();
    let (manifest, ref_path) = make_corpus(dir.path(), 8, 5, "一二三");
    let config = dir.path().join("run.toml");
    // 300 steps: enough for this corpus to reach zero error under the xs
    // preset (200 leaves an occasional insertion on repeated-token lines).
    write_config(
        &config,
        &manifest,
        &dir.path().join("run"),
        "[training]\nsteps = 300\nframe_budget = 2000\nlog_every = 100\nvalidate_every = 80\n\
         checkpoint_every = 500\npatience = 3\n\n\
         [optimizer]\nbase_peak_lr = 5e-3\nwarmup_steps = 20\n",
    );

    let out = asrlab(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0, "train");
    assert!(stdout(&out).contains("trained 300 steps"), "{}", stdout(&out));
    let ckpt = dir.path().join("run").join("final.ckpt");
    assert!(ckpt.exists());

    let hyp = dir.path().join("hyp.trn");
    let out = asrlab(&[
        "decode",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--output",
        hyp.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "decode");

    // The overfit model must reproduce its own training transcripts exactly.
    assert_eq!(
        fs::read_to_string(&hyp).unwrap(),
        fs::read_to_string(&ref_path).unwrap(),
        "decoded hypotheses differ from training transcripts"
    );

    let out = asrlab(&[
        "score",
        "--ref",
        ref_path.to_str().unwrap(),
        "--hyp",
        hyp.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "score");
    assert!(stdout(&out).contains("CER 0.00"), "{}", stdout(&out));

    // Decoding twice writes byte-identical output.
    let hyp2 = dir.path().join("hyp2.trn");
    let out = asrlab(&[
        "decode",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--output",
        hyp2.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "second decode");
    assert_eq!(fs::read(&hyp).unwrap(), fs::read(&hyp2).unwrap());
}

#[test]
fn resume_reproduces_the_uninterrupted_run_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let (manifest, _) = make_corpus(dir.path(), 8, 5, "一二三");
    let run = dir.path().join("run");
    let config = dir.path().join("run.toml");
    write_config(&config, &manifest, &run, SHORT_RUN);

    let out = asrlab(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0, "uninterrupted train");
    let final_uninterrupted = fs::read(run.join("final.ckpt")).unwrap();
    let log_uninterrupted = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log_uninterrupted.lines().count(), 3, "{log_uninterrupted}");

    // Rewind the output directory to how an interruption after the step-20
    // checkpoint would have left it.
    let kept: String = log_uninterrupted.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(run.join("train.log"), kept).unwrap();
    fs::remove_file(run.join("final.ckpt")).unwrap();

    let out = asrlab(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--resume",
        run.join("step000020.ckpt").to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "resumed train");

    assert_eq!(
        fs::read(run.join("final.ckpt")).unwrap(),
        final_uninterrupted,
        "resumed run produced a different final checkpoint"
    );
    assert_eq!(
        fs::read_to_string(run.join("train.log")).unwrap(),
        log_uninterrupted,
        "resumed run produced a different training log"
    );
}

#[test]
fn resuming_under_a_changed_config_is_refused() {
    let dir = TempDir::new().unwrap();
    let (manifest, _) = make_corpus(dir.path(), 4, 9, "一二");
    let ckpt = quick_checkpoint(dir.path(), &manifest);

    let other = dir.path().join("other.toml");
    write_config(
        &other,
        &manifest,
        &dir.path().join("quickrun"),
        "[training]\nsteps = 8\nframe_budget = 2000\nlog_every = 4\nvalidate_every = 10\n\
         checkpoint_every = 10\npatience = 3\n",
    );
    let out = asrlab(&[
        "train",
        "--config",
        other.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "resume with changed steps");
    assert!(stderr(&out).contains("different config"), "{}", stderr(&out));
}

#[test]
fn rerunning_the_same_config_reproduces_the_log_and_a_new_seed_does_not() {
    let dir = TempDir::new().unwrap();
    let (manifest, _) = make_corpus(dir.path(), 4, 9, "一二");
    let config = dir.path().join("run.toml");
    let run = dir.path().join("run");
    let body = "[training]\nsteps = 6\nframe_budget = 2000\nlog_every = 3\n\
                validate_every = 10\ncheckpoint_every = 10\npatience = 3\n";
    write_config(&config, &manifest, &run, body);

    let out = asrlab(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0, "first run");
    let first = fs::read_to_string(run.join("train.log")).unwrap();

    let out = asrlab(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 0, "second run");
    assert_eq!(fs::read_to_string(run.join("train.log")).unwrap(), first);

    let out = asrlab(&["train", "--config", config.to_str().unwrap(), "--seed", "12"]);
    assert_exit(&out, 0, "reseeded run");
    assert_ne!(
        fs::read_to_string(run.join("train.log")).unwrap(),
        first,
        "a different seed should change the loss trajectory"
    );
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = TempDir::new().unwrap();

    // A data path that does not exist is reported under its field name.
    let config = dir.path().join("missing_data.toml");
    write_config(
        &config,
        Path::new("/nonexistent/manifest.tsv"),
        &dir.path().join("out"),
        "",
    );
    let out = asrlab(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2, "missing data path");
    assert!(stderr(&out).contains("data.train_manifest"), "{}", stderr(&out));

    // An invalid value is reported under its field name.
    let config = dir.path().join("zero_steps.toml");
    fs::write(&config, "[training]\nsteps = 0\n").unwrap();
    let out = asrlab(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2, "zero steps");
    assert!(stderr(&out).contains("training.steps"), "{}", stderr(&out));

    // Unknown keys are rejected with their location.
    let config = dir.path().join("unknown_key.toml");
    fs::write(&config, "bananas = 3\n").unwrap();
    let out = asrlab(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 2, "unknown key");
    assert!(stderr(&out).contains("bananas"), "{}", stderr(&out));
}

#[test]
fn numerical_blowup_aborts_with_exit_3() {
    let dir = TempDir::new().unwrap();
    let (manifest, _) = make_corpus(dir.path(), 4, 9, "一二");
    let config = dir.path().join("explode.toml");
    // A peak learning rate far beyond f32 scale overflows the weights within
    // a step or two; the trainer must stop at the first non-finite loss.
    write_config(
        &config,
        &manifest,
        &dir.path().join("out"),
        "[training]\nsteps = 40\nframe_budget = 2000\nlog_every = 40\nvalidate_every = 100\n\
         checkpoint_every = 100\npatience = 3\n\n\
         [optimizer]\nbase_peak_lr = 1e30\nwarmup_steps = 2\n",
    );
    let out = asrlab(&["train", "--config", config.to_str().unwrap()]);
    assert_exit(&out, 3, "blowup");
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
}

#[test]
fn decode_handles_empty_manifests_and_records_per_utterance_failures() {
    let dir = TempDir::new().unwrap();
    let (manifest, _) = make_corpus(dir.path(), 4, 9, "一二");
    let ckpt = quick_checkpoint(dir.path(), &manifest);

    // Empty manifest: empty output file, success.
    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let out_path = dir.path().join("empty_out.trn");
    let out = asrlab(&[
        "decode",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        empty.to_str().unwrap(),
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "empty manifest decode");
    assert_eq!(fs::read(&out_path).unwrap(), b"");

    // One good utterance plus one unreadable file: the good one is decoded,
    // the bad one becomes an error record, and the exit code reports it.
    // Relative wav paths resolve against the manifest's own directory, so the
    // copied line needs its path made absolute.
    let manifest_text = fs::read_to_string(&manifest).unwrap();
    let fields: Vec<&str> = manifest_text.lines().next().unwrap().split('\t').collect();
    let good_wav = manifest.parent().unwrap().join(fields[1]);
    let mixed = dir.path().join("mixed.tsv");
    fs::write(
        &mixed,
        format!("{}\t{}\t{}\nghost\tghost.wav\t一二\n", fields[0], good_wav.display(), fields[2]),
    )
    .unwrap();
    let out_path = dir.path().join("mixed_out.trn");
    let out = asrlab(&[
        "decode",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        mixed.to_str().unwrap(),
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert_exit(&out, 1, "partial decode");
    assert!(stderr(&out).contains("ghost"), "{}", stderr(&out));
    let written = fs::read_to_string(&out_path).unwrap();
    assert!(written.starts_with("synth0000\t"), "{written}");
    assert_eq!(written.lines().count(), 1);
}

#[test]
fn score_warns_and_intersects_on_id_mismatch_and_rejects_empty_overlap() {
    let dir = TempDir::new().unwrap();
    let refs = dir.path().join("ref.trn");
    let hyps = dir.path().join("hyp.trn");
    fs::write(&refs, "a\t一二\nb\t三四\nc\t五六\n").unwrap();
    fs::write(&hyps, "b\t三四\nc\t五七\nd\t八\n").unwrap();

    let out = asrlab(&[
        "score",
        "--ref",
        refs.to_str().unwrap(),
        "--hyp",
        hyps.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "intersect score");
    let err = stderr(&out);
    assert!(err.contains("warning") && err.contains("a") && err.contains("d"), "{err}");
    // Intersection is {b, c}: 4 reference chars, 1 substitution.
    assert!(stdout(&out).contains("utterances 2"), "{}", stdout(&out));
    assert!(stdout(&out).contains("CER 25.00"), "{}", stdout(&out));

    // Disjoint id sets leave nothing to score.
    fs::write(&hyps, "x\t一\n").unwrap();
    let out = asrlab(&[
        "score",
        "--ref",
        refs.to_str().unwrap(),
        "--hyp",
        hyps.to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "disjoint ids");

    // A reference that normalizes to zero length cannot anchor a rate.
    fs::write(&refs, "a\t...\n").unwrap();
    fs::write(&hyps, "a\t一\n").unwrap();
    let out = asrlab(&[
        "score",
        "--ref",
        refs.to_str().unwrap(),
        "--hyp",
        hyps.to_str().unwrap(),
    ]);
    assert_exit(&out, 2, "zero-length reference");
}

#[test]
fn score_of_a_file_against_itself_is_zero() {
    let dir = TempDir::new().unwrap();
    let refs = dir.path().join("ref.trn");
    fs::write(&refs, "a\t今天 天气 很好\nb\thello world\n").unwrap();
    let out = asrlab(&[
        "score",
        "--ref",
        refs.to_str().unwrap(),
        "--hyp",
        refs.to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "self score");
    assert!(stdout(&out).contains("CER 0.00"), "{}", stdout(&out));

    let out = asrlab(&[
        "score",
        "--ref",
        refs.to_str().unwrap(),
        "--hyp",
        refs.to_str().unwrap(),
        "--unit",
        "word",
    ]);
    assert_exit(&out, 0, "self score words");
    assert!(stdout(&out).contains("WER 0.00"), "{}", stdout(&out));
}

#[test]
fn table_mode_reproduces_the_published_averages() {
    let dir = TempDir::new().unwrap();
    let ours = dir.path().join("ours.tsv");
    let base = dir.path().join("base.tsv");
    fs::write(&ours, "aishell1\t0.76\naishell2\t2.15\nws_net\t4.60\nws_meeting\t4.67\n").unwrap();
    fs::write(&base, "aishell1\t0.55\naishell2\t2.52\nws_net\t4.88\nws_meeting\t4.76\n").unwrap();

    let out = asrlab(&[
        "score",
        "--table",
        ours.to_str().unwrap(),
        "--baseline",
        base.to_str().unwrap(),
        "--json",
    ]);
    assert_exit(&out, 0, "table mode");
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["ours"]["average_display"], "3.05");
    assert_eq!(report["baseline"]["average_display"], "3.18");

    // The same arithmetic in text form carries the Average-4 row.
    let out = asrlab(&["score", "--table", ours.to_str().unwrap()]);
    assert_exit(&out, 0, "table text");
    let text = stdout(&out);
    let avg_line = text.lines().find(|l| l.starts_with("Average-4")).unwrap();
    assert!(avg_line.trim_end().ends_with("3.05"), "{text}");
}

#[test]
fn inspect_checks_param_accounting_for_every_preset_and_reads_checkpoints() {
    let dir = TempDir::new().unwrap();
    // Every preset x model kind: inspect verifies analytic == enumeration
    // internally and fails loudly on a mismatch.
    for preset in ["xs", "s", "m", "l"] {
        for model in ["aed", "llm"] {
            let config = dir.path().join(format!("{model}_{preset}.toml"));
            fs::write(&config, format!("model = \"{model}\"\npreset = \"{preset}\"\n")).unwrap();
            let out = asrlab(&[
                "inspect",
                "--config",
                config.to_str().unwrap(),
                "--vocab-size",
                "32",
                "--json",
            ]);
            assert_exit(&out, 0, &format!("inspect {model} {preset}"));
            let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
            assert_eq!(report["desk"]["enumeration_checked"], true);
            assert!(report["desk"]["total"].as_u64().unwrap() > 0);
            assert!(report["full_scale"]["total"].as_u64().unwrap() > 0);
        }
    }

    let (manifest, _) = make_corpus(dir.path(), 4, 9, "一二");
    let ckpt = quick_checkpoint(dir.path(), &manifest);
    let out = asrlab(&["inspect", "--checkpoint", ckpt.to_str().unwrap(), "--json"]);
    assert_exit(&out, 0, "inspect checkpoint");
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["format_version"], 1);
    assert_eq!(report["step"], 4);
    assert_eq!(report["rng"]["algorithm"], "chacha8");
    assert!(report["params_total"].as_u64().unwrap() > 0);
    assert_eq!(report["optimizer_state"], true);

    // A corrupted checkpoint is a usage error, not a crash.
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, &bytes).unwrap();
    let out = asrlab(&["inspect", "--checkpoint", bad.to_str().unwrap()]);
    assert_exit(&out, 2, "corrupted checkpoint");
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}
