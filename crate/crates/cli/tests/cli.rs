//! Drives the `lowprec` binary and compares its files with direct library
//! calls.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lowprec::data::{decode_dataset, encode_dataset, oriented_patterns, pattern_net};
use lowprec::inference::LayerState;
use lowprec::modelio::{decode_export, encode_model, load_model, save_model, verify_export};
use lowprec::netdesc::{emit_descriptor, parse_descriptor};
use lowprec::profiler::{
    allocate_bits, measure_ranges, profile_indices, sparsity_report, BitAllocation, DegradationReport, RangeStats,
    SparsityMode, SparsityReport,
};
use lowprec::{build_giga1net, count_ops, Model};
use tempfile::TempDir;

fn lowprec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowprec")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = lowprec(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self { dir: TempDir::new().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    /// Small train/test split and a float model trained on it.
    fn trained() -> Self {
        let w = Self::new();
        ok(&["gen-data", "--samples", "160", "--seed", "1", "--out", &w.arg("train.lpds")]);
        ok(&["gen-data", "--samples", "64", "--seed", "2", "--out", &w.arg("test.lpds")]);
        ok(&["pattern-net", "--out", &w.arg("net.txt")]);
        ok(&[
            "finetune", "--net", &w.arg("net.txt"), "--data", &w.arg("train.lpds"), "--eval", &w.arg("test.lpds"),
            "--epochs", "2", "--lr", "0.01", "--seed", "3", "--patience", "0", "--out", &w.arg("float.lpmc"),
        ]);
        w
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&lowprec(&["--help"])), 0);
    assert_eq!(code(&lowprec(&["--version"])), 0);
    assert_eq!(code(&lowprec(&["allocate", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&lowprec(&[])), 1);
    assert_eq!(code(&lowprec(&["frobnicate"])), 1);
    let w = Workspace::new();
    std::fs::write(w.path("stats.json"), "{}").unwrap();
    let out = lowprec(&["allocate", "--stats", &w.arg("stats.json"), "--threshold", "1.5", "--out", &w.arg("a.json")]);
    assert_eq!(code(&out), 1);
    assert!(!w.path("a.json").exists());
    let out = lowprec(&["allocate", "--stats", &w.arg("stats.json"), "--bits", "40", "--out", &w.arg("a.json")]);
    assert_eq!(code(&out), 1);
    let out = lowprec(&["finetune", "--data", &w.arg("x"), "--out", &w.arg("m")]);
    assert_eq!(code(&out), 1, "neither --model nor --net");
}

#[test]
fn stochastic_scheme_requires_a_seed() {
    let w = Workspace::new();
    let out = lowprec(&[
        "finetune", "--net", &w.arg("net.txt"), "--data", &w.arg("d"), "--scheme", "stoch", "--out", &w.arg("m"),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn bad_inputs_exit_two() {
    let w = Workspace::new();
    let missing = lowprec(&["profile", "--model", &w.arg("nope.lpmc"), "--data", &w.arg("nope.lpds"), "--out", &w.arg("s")]);
    assert_eq!(code(&missing), 2);
    std::fs::write(w.path("junk.lpmc"), b"LPMC garbage").unwrap();
    let out = lowprec(&["export", "--model", &w.arg("junk.lpmc"), "--out", &w.arg("x.lpax")]);
    assert_eq!(code(&out), 2);
    let out = lowprec(&["giga1net", "--out", &w.arg("no/such/dir/net.txt")]);
    assert_eq!(code(&out), 2);
}

/// Weights near the top of the f32 range overflow in the first forward pass.
#[test]
fn divergence_exits_three() {
    let w = Workspace::new();
    std::fs::write(w.path("d.lpds"), encode_dataset(&oriented_patterns(32, 1))).unwrap();
    let m = Model::<f32>::init(pattern_net(), 1).unwrap();
    let layers = m
        .layers()
        .iter()
        .map(|s| s.as_ref().map(|s| LayerState::new(s.weights.shadow().scale(1e30), s.bias.shadow().clone(), s.quant)))
        .collect();
    save_model(&Model::from_layers(pattern_net(), layers).unwrap(), w.path("huge.lpmc")).unwrap();
    let out = lowprec(&[
        "finetune", "--model", &w.arg("huge.lpmc"), "--data", &w.arg("d.lpds"), "--epochs", "1", "--out",
        &w.arg("m.lpmc"),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!w.path("m.lpmc").exists());
}

#[test]
fn giga1net_writes_descriptor_and_counts() {
    let w = Workspace::new();
    let out = ok(&["giga1net", "--out", &w.arg("g.net")]);
    let text = String::from_utf8(out.stdout).unwrap();
    let ops: u64 = text.lines().find_map(|l| l.strip_prefix("ops ")).unwrap().parse().unwrap();
    assert_eq!(ops, count_ops(&build_giga1net()));
    assert!((0.85e9..=1.15e9).contains(&(ops as f64)));
    let written = std::fs::read_to_string(w.path("g.net")).unwrap();
    assert_eq!(written, emit_descriptor(&build_giga1net()));
    assert_eq!(parse_descriptor(&written).unwrap(), build_giga1net());
}

#[test]
fn gen_data_matches_library() {
    let w = Workspace::new();
    ok(&["gen-data", "--samples", "10", "--seed", "9", "--out", &w.arg("d.lpds")]);
    let bytes = read(&w.path("d.lpds"));
    assert_eq!(bytes, encode_dataset(&oriented_patterns(10, 9)));
    assert_eq!(decode_dataset(&bytes).unwrap().len(), 10);
}

#[test]
fn pipeline_outputs_equal_library_calls() {
    let w = Workspace::trained();
    let model = load_model(w.path("float.lpmc")).unwrap();
    let train = decode_dataset(&read(&w.path("train.lpds"))).unwrap();
    let test = decode_dataset(&read(&w.path("test.lpds"))).unwrap();

    // profile: byte-identical to the library and across runs
    let profile = |name: &str| {
        ok(&[
            "profile", "--model", &w.arg("float.lpmc"), "--data", &w.arg("train.lpds"), "--samples", "32", "--seed",
            "4", "--out", &w.arg(name),
        ])
    };
    profile("stats.json");
    profile("stats2.json");
    let stats_text = std::fs::read_to_string(w.path("stats.json")).unwrap();
    assert_eq!(read(&w.path("stats.json")), read(&w.path("stats2.json")));
    let idx = profile_indices(train.len(), 32, 4);
    let lib_stats = measure_ranges(&model, &train.images().gather(&idx)).unwrap();
    assert_eq!(stats_text, lib_stats.to_json().unwrap());
    let stats = RangeStats::from_json(&stats_text).unwrap();

    // allocate with defaults, then with a zero threshold
    ok(&["allocate", "--stats", &w.arg("stats.json"), "--out", &w.arg("alloc.json")]);
    let alloc_text = std::fs::read_to_string(w.path("alloc.json")).unwrap();
    assert_eq!(alloc_text, allocate_bits(&stats, 16, 0.01).unwrap().to_json().unwrap());
    ok(&["allocate", "--stats", &w.arg("stats.json"), "--threshold", "0", "--out", &w.arg("alloc0.json")]);
    let strict = BitAllocation::from_json(&std::fs::read_to_string(w.path("alloc0.json")).unwrap()).unwrap();
    for l in &strict.layers {
        assert_eq!(l.act_overflow, 0.0, "{}", l.name);
        assert!(l.weight_overflow.is_none_or(|o| o == 0.0), "{}", l.name);
        let need = stats.layer(l.index).unwrap().activations.max_abs;
        assert!(l.act_fmt.max_value() + l.act_fmt.step() > need || need == 0.0);
    }

    // report on the float model, with the one-shot study
    ok(&[
        "report", "--model", &w.arg("float.lpmc"), "--data", &w.arg("test.lpds"), "--alloc", &w.arg("alloc.json"),
        "--study-out", &w.arg("study.json"), "--out", &w.arg("sparsity.json"),
    ]);
    let rep = std::fs::read_to_string(w.path("sparsity.json")).unwrap();
    assert_eq!(rep, sparsity_report(&model, &test, SparsityMode::Float).unwrap().to_json().unwrap());
    let study = DegradationReport::from_json(&std::fs::read_to_string(w.path("study.json")).unwrap()).unwrap();
    assert_eq!(study.samples, test.len());

    // quantized fine-tune, twice with the same seed
    let tune = |name: &str| {
        ok(&[
            "finetune", "--model", &w.arg("float.lpmc"), "--alloc", &w.arg("alloc.json"), "--data",
            &w.arg("train.lpds"), "--eval", &w.arg("test.lpds"), "--scheme", "stoch", "--seed", "5", "--epochs", "1",
            "--out", &w.arg(name),
        ])
    };
    tune("q.lpmc");
    tune("q2.lpmc");
    assert_eq!(read(&w.path("q.lpmc")), read(&w.path("q2.lpmc")));
    assert!(w.path("q.lpmc.history.jsonl").exists());
    let tuned = load_model(w.path("q.lpmc")).unwrap();
    assert!(tuned.net().any_quantized());

    // export against the allocation, and without it
    ok(&["export", "--model", &w.arg("q.lpmc"), "--alloc", &w.arg("alloc.json"), "--out", &w.arg("q.lpax")]);
    ok(&["export", "--model", &w.arg("q.lpmc"), "--out", &w.arg("q_plain.lpax")]);
    assert_eq!(read(&w.path("q.lpax")), read(&w.path("q_plain.lpax")));
    let x = decode_export(&read(&w.path("q.lpax"))).unwrap();
    verify_export(&x, &tuned).unwrap();

    // the float model has no fixed-point weights to export
    assert_eq!(code(&lowprec(&["export", "--model", &w.arg("float.lpmc"), "--out", &w.arg("f.lpax")])), 2);
}

#[test]
fn zero_epochs_copies_the_model() {
    let w = Workspace::trained();
    ok(&["finetune", "--model", &w.arg("float.lpmc"), "--data", &w.arg("train.lpds"), "--epochs", "0", "--out", &w.arg("copy.lpmc")]);
    assert_eq!(read(&w.path("copy.lpmc")), read(&w.path("float.lpmc")));
    let m = load_model(w.path("copy.lpmc")).unwrap();
    assert_eq!(encode_model(&m), read(&w.path("float.lpmc")));
}

#[test]
fn report_on_untrained_model_has_valid_schema() {
    let w = Workspace::new();
    ok(&["pattern-net", "--out", &w.arg("net.txt")]);
    ok(&["gen-data", "--samples", "16", "--seed", "1", "--out", &w.arg("d.lpds")]);
    ok(&["finetune", "--net", &w.arg("net.txt"), "--data", &w.arg("d.lpds"), "--epochs", "0", "--out", &w.arg("init.lpmc")]);
    ok(&["report", "--model", &w.arg("init.lpmc"), "--data", &w.arg("d.lpds"), "--out", &w.arg("r.json")]);
    let r = SparsityReport::from_json(&std::fs::read_to_string(w.path("r.json")).unwrap()).unwrap();
    assert_eq!(r.samples, 16);
    assert!((0.0..=1.0).contains(&r.mean));
}
