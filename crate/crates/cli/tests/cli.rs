use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nas_cli::{config::ExperimentConfig, Metrics, Run};
use nas_core::allocation::deserialize_allocation;
use nas_core::checkpoint;
use nas_core::genotype::{deserialize_genotype, serialize_genotype, CellGenotype, Entry, Genotype};
use nas_core::seed::stage_rng;
use nas_core::space::{CellType, OperationKind, SpaceId};
use nas_core::supernet::ArchParams;
use nas_core::targetnet::TargetNet;
use tempfile::TempDir;

const TINY: &str = r#"
seed = 3
[dataset]
num_samples = 48
size = 8
[search]
nodes = 2
init_channels = 4
epochs = 2
batch_size = 8
[eval]
init_channels = 8
epochs = 1
batch_size = 8
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Sandbox { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs the binary inside the sandbox with `tiny.toml`.
    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_acanas"))
            .current_dir(self.dir.path())
            .env(nas_cli::RUN_ROOT_ENV, self.path("runs"))
            .arg("--config")
            .arg("tiny.toml")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "acanas {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.path(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn search_writes_its_four_artifacts() {
    let sb = Sandbox::new();
    sb.ok(&["search", "--run.name", "s"]);
    for f in ["config.toml", "search.ckpt", "search.csv", "genotype.txt"] {
        assert!(sb.path("runs/s").join(f).is_file(), "missing {f}");
    }
    let csv = sb.read("runs/s/search.csv");
    assert_eq!(csv.lines().count(), 3);
    let echoed: ExperimentConfig =
        ExperimentConfig::from_table(sb.read("runs/s/config.toml").parse().unwrap()).unwrap();
    assert_eq!(echoed.search.epochs, 2);
    assert_eq!(echoed.run.name, "s");
}

#[test]
fn space_s_trace_has_skip_fraction_column() {
    let sb = Sandbox::new();
    sb.ok(&["search", "--run-dir", "s", "--search.space", "S"]);
    let csv = sb.read("s/search.csv");
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == "skip_fraction")
        .expect("skip_fraction column");
    for l in lines {
        let v: f64 = l.split(',').nth(col).unwrap().parse().unwrap();
        // 2 cells × 2 nodes × 2 entries
        assert!((0.0..=1.0).contains(&v) && (v * 8.0).fract() == 0.0, "{v}");
    }
    assert!(sb.read("s/genotype.txt").contains("space S\n"));
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let sb = Sandbox::new();
    sb.ok(&["pipeline", "--run-dir", "a"]);
    sb.ok(&["pipeline", "--run-dir", "b"]);
    for f in [
        "genotype.txt",
        "search.csv",
        "allocation.txt",
        "eval.csv",
        "metrics.txt",
        "normal.dot",
        "reduce.dot",
    ] {
        assert_eq!(sb.read(&format!("a/{f}")), sb.read(&format!("b/{f}")), "{f} differs");
    }
    assert_eq!(
        fs::read(sb.path("a/target.ckpt")).unwrap(),
        fs::read(sb.path("b/target.ckpt")).unwrap()
    );
}

#[test]
fn echoed_config_reproduces_the_run() {
    let sb = Sandbox::new();
    sb.ok(&[
        "search",
        "--run-dir",
        "a",
        "--seed",
        "11",
        "--search.w_learning_rate",
        "0.02",
    ]);
    let out = Command::new(env!("CARGO_BIN_EXE_acanas"))
        .current_dir(sb.dir.path())
        .args(["--config", "a/config.toml", "--run-dir", "b", "search"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(sb.read("a/genotype.txt"), sb.read("b/genotype.txt"));
    assert_eq!(sb.read("a/search.csv"), sb.read("b/search.csv"));
    assert_eq!(sb.read("a/config.toml"), sb.read("b/config.toml"));
}

fn equal_arch_checkpoint(path: &Path, edges: usize, ops: usize) {
    let arch = ArchParams::zeros(edges, ops);
    let tensors = vec![
        ("arch.normal".to_string(), arch.tensor(CellType::Normal).clone()),
        ("arch.reduce".to_string(), arch.tensor(CellType::Reduction).clone()),
    ];
    checkpoint::save(path, &tensors).unwrap();
}

#[test]
fn aca_on_equal_strength_checkpoint_has_no_refill() {
    let sb = Sandbox::new();
    // two nodes: 2 + 3 edges; S6 has four operations
    equal_arch_checkpoint(&sb.path("eq.ckpt"), 5, 4);
    sb.ok(&["derive", "--run-dir", "d", "--checkpoint", "eq.ckpt"]);
    let alloc = sb.read("d/allocation.txt");
    let entries: Vec<&str> = alloc.lines().filter(|l| l.starts_with("cell=")).collect();
    // five cells, two nodes, two entries
    assert_eq!(entries.len(), 5 * 2 * 2);
    for l in entries {
        assert!(l.ends_with("skip_channels=0"), "{l}");
        assert!(l.contains("p=0.250000"), "{l}");
    }
}

#[test]
fn derive_rejects_checkpoint_of_another_space() {
    let sb = Sandbox::new();
    equal_arch_checkpoint(&sb.path("eq.ckpt"), 5, 4);
    let out = sb.run(&[
        "derive",
        "--run-dir",
        "d",
        "--checkpoint",
        "eq.ckpt",
        "--search.space",
        "S",
    ]);
    assert_eq!(code(&out), 2);
    assert!(!sb.path("d/allocation.txt").exists());
    let bad = sb.path("bad.ckpt");
    fs::write(&bad, b"ACAX").unwrap();
    assert_eq!(
        code(&sb.run(&["derive", "--run-dir", "d", "--checkpoint", "bad.ckpt"])),
        2
    );
}

#[test]
fn darts_s_mode_refills_eight_of_sixteen() {
    let sb = Sandbox::new();
    sb.ok(&["search", "--run-dir", "d"]);
    sb.ok(&[
        "derive",
        "--run-dir",
        "d",
        "--derive.mode",
        "darts_s",
        "--eval.init_channels",
        "16",
    ]);
    let alloc = sb.read("d/allocation.txt");
    assert!(alloc.contains("mode darts_s fixed=8\n"));
    let mut sixteen = 0;
    for l in alloc.lines().filter(|l| l.starts_with("cell=")) {
        assert!(l.ends_with("skip_channels=8"), "{l}");
        if l.contains(" C=16 ") {
            assert!(l.contains("op_channels=8 "), "{l}");
            sixteen += 1;
        }
    }
    // only the first cell runs at 16 channels
    assert_eq!(sixteen, 2 * 2);
    sb.ok(&["export-dot", "--run-dir", "d"]);
    assert!(sb.read("d/normal.dot").contains("c=8/16\""));
}

/// Strength text `0.xxxxxx` as an integer count of millionths.
fn micros(p: &str) -> u64 {
    let (int, frac) = p.split_once('.').unwrap();
    assert_eq!(frac.len(), 6);
    int.parse::<u64>().unwrap() * 1_000_000 + frac.parse::<u64>().unwrap()
}

#[test]
fn allocation_is_rederivable_from_genotype_strengths() {
    let sb = Sandbox::new();
    for (seed, space) in [("1", "S6"), ("2", "S"), ("5", "S7")] {
        let dir = format!("r{seed}");
        sb.ok(&["search", "--run-dir", &dir, "--seed", seed, "--search.space", space]);
        sb.ok(&["derive", "--run-dir", &dir, "--seed", seed, "--search.space", space]);
        let genotype = sb.read(&format!("{dir}/genotype.txt"));
        let alloc = sb.read(&format!("{dir}/allocation.txt"));
        // genotype strengths keyed by cell type, in file order
        let mut strengths: Vec<(String, Vec<u64>)> = Vec::new();
        for l in genotype.lines() {
            if let Some(t) = l.strip_suffix(':') {
                strengths.push((t.to_string(), Vec::new()));
            } else if let Some(p) = l.split(' ').find_map(|t| t.strip_prefix("p=")) {
                strengths.last_mut().unwrap().1.push(micros(p));
            }
        }
        let rows: Vec<Vec<(String, String)>> = alloc
            .lines()
            .filter(|l| l.starts_with("cell="))
            .map(|l| {
                l.split(' ')
                    .map(|t| {
                        let (k, v) = t.split_once('=').unwrap();
                        (k.to_string(), v.to_string())
                    })
                    .collect()
            })
            .collect();
        let get = |row: &[(String, String)], k: &str| row.iter().find(|(key, _)| key == k).unwrap().1.clone();
        let mut checked = 0;
        for cell in rows.chunk_by(|a, b| get(a, "cell") == get(b, "cell")) {
            let ty = get(&cell[0], "type");
            let ps = &strengths.iter().find(|(t, _)| *t == ty).unwrap().1;
            assert_eq!(ps.len(), cell.len());
            for (pair, pp) in cell.chunks(2).zip(ps.chunks(2)) {
                let p_max = pp[0].max(pp[1]);
                for (row, &p) in pair.iter().zip(pp) {
                    assert_eq!(micros(&get(row, "p")), p);
                    let c: u64 = get(row, "C").parse().unwrap();
                    let op: u64 = get(row, "op_channels").parse().unwrap();
                    let skip: u64 = get(row, "skip_channels").parse().unwrap();
                    assert_eq!(op, (p * c).div_ceil(p_max), "{row:?}");
                    assert_eq!(op + skip, c);
                    checked += 1;
                }
                let skips: Vec<String> = pair.iter().map(|r| get(r, "skip_channels")).collect();
                assert!(skips.contains(&"0".to_string()));
            }
        }
        assert_eq!(checked, 5 * 2 * 2);
    }
}

fn equal_strength_genotype() -> Genotype {
    let cell = |ops: [OperationKind; 4]| CellGenotype {
        nodes: vec![
            [
                Entry {
                    source: 1,
                    op: ops[0],
                    strength: 0.3,
                },
                Entry {
                    source: 0,
                    op: ops[1],
                    strength: 0.3,
                },
            ],
            [
                Entry {
                    source: 2,
                    op: ops[2],
                    strength: 0.45,
                },
                Entry {
                    source: 0,
                    op: ops[3],
                    strength: 0.45,
                },
            ],
        ],
    };
    use OperationKind::*;
    Genotype {
        space: SpaceId::S,
        normal: cell([SepConv3x3, SkipConnect, DilSepConv5x5, MaxPool3x3]),
        reduce: cell([AvgPool3x3, SepConv5x5, SkipConnect, DilSepConv3x3]),
    }
}

#[test]
fn no_skip_matches_full_on_equal_strengths() {
    let sb = Sandbox::new();
    fs::write(sb.path("eq.txt"), serialize_genotype(&equal_strength_genotype())).unwrap();
    sb.ok(&["derive", "--run-dir", "full", "--genotype", "eq.txt"]);
    sb.ok(&["derive", "--run-dir", "plain", "--genotype", "eq.txt"]);
    sb.ok(&[
        "train",
        "--run-dir",
        "full",
        "--eval.ablation_mode",
        "full",
        "--eval.epochs",
        "2",
    ]);
    sb.ok(&[
        "train",
        "--run-dir",
        "plain",
        "--eval.ablation_mode",
        "no_skip",
        "--eval.epochs",
        "2",
    ]);
    assert_eq!(sb.read("full/eval.csv"), sb.read("plain/eval.csv"));
    assert_eq!(sb.read("full/metrics.txt"), sb.read("plain/metrics.txt"));
}

#[test]
fn metrics_params_match_parameter_count() {
    let sb = Sandbox::new();
    sb.ok(&["pipeline", "--run-dir", "p", "--search.space", "S7"]);
    let m = Metrics::parse(&sb.read("p/metrics.txt")).unwrap();
    let cfg = ExperimentConfig::from_table(sb.read("p/config.toml").parse().unwrap()).unwrap();
    let run = Run::new(cfg.clone(), sb.path("p"));
    let data = run.dataset().unwrap();
    let g = deserialize_genotype(&sb.read("p/genotype.txt")).unwrap();
    let a = deserialize_allocation(&sb.read("p/allocation.txt"), &g).unwrap();
    let net = TargetNet::build(
        &g,
        &a,
        &cfg.target_config(data.classes, data.channels, data.height),
        &mut stage_rng(0, "other"),
    )
    .unwrap();
    let (params, macs) = net.count_params_flops().unwrap();
    assert_eq!(m.params, params);
    assert_eq!(m.multiply_adds, macs);
    assert!((0.0..=1.0).contains(&m.accuracy));

    // re-evaluating the saved weights reproduces the training metrics
    sb.ok(&["eval", "--run-dir", "p", "--search.space", "S7"]);
    assert_eq!(Metrics::parse(&sb.read("p/metrics.txt")).unwrap(), m);
}

#[test]
fn export_dot_is_deterministic_and_labels_every_entry() {
    let sb = Sandbox::new();
    sb.ok(&["search", "--run-dir", "r"]);
    sb.ok(&["derive", "--run-dir", "r"]);
    sb.ok(&["export-dot", "--run-dir", "r", "--out", "x"]);
    sb.ok(&["export-dot", "--run-dir", "r", "--out", "y"]);
    let g = deserialize_genotype(&sb.read("r/genotype.txt")).unwrap();
    for (name, t) in [("normal.dot", CellType::Normal), ("reduce.dot", CellType::Reduction)] {
        let x = sb.read(&format!("x/{name}"));
        assert_eq!(x, sb.read(&format!("y/{name}")));
        let labels: Vec<&str> = x.lines().filter(|l| l.contains("label=")).collect();
        assert_eq!(labels.len(), 4);
        for (_, e) in g.cell(t).entries() {
            let needle = format!("{} p={:.6} c=", e.op, e.strength);
            assert_eq!(labels.iter().filter(|l| l.contains(&needle)).count(), 1, "{needle}");
        }
        assert!(labels
            .iter()
            .all(|l| l.contains(" p=") && l.contains(" c=") && l.contains('/')));
    }
}

#[test]
fn gen_data_round_trips_through_raw_source() {
    let sb = Sandbox::new();
    sb.ok(&["gen-data", "--images", "data/img.bin", "--labels", "data/lbl.bin"]);
    sb.ok(&["search", "--run-dir", "syn"]);
    sb.ok(&[
        "search",
        "--run-dir",
        "raw",
        "--dataset.source",
        "raw",
        "--dataset.images",
        "data/img.bin",
        "--dataset.labels",
        "data/lbl.bin",
    ]);
    assert_eq!(sb.read("syn/genotype.txt"), sb.read("raw/genotype.txt"));
    assert_eq!(sb.read("syn/search.csv"), sb.read("raw/search.csv"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let sb = Sandbox::new();
    // configuration errors
    assert_eq!(code(&sb.run(&["search", "--search.spcae", "S"])), 2);
    assert_eq!(code(&sb.run(&["search", "--search.space", "S9"])), 2);
    assert_eq!(code(&sb.run(&["search", "--search.epochs", "0"])), 2);
    assert_eq!(code(&sb.run(&["search", "--dataset.size", "10"])), 2);
    assert_eq!(code(&sb.run(&["frobnicate"])), 2);
    // malformed input file
    fs::write(sb.path("broken.txt"), "genotype v1\nspace S6\nnormal:\nnode=2 src=0\n").unwrap();
    assert_eq!(
        code(&sb.run(&["derive", "--run-dir", "b", "--genotype", "broken.txt"])),
        2
    );
    // numerical divergence
    let out = sb.run(&["search", "--run-dir", "div", "--search.alpha_learning_rate", "3e38"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    // i/o failures
    assert_eq!(code(&sb.run(&["train", "--run-dir", "nothing-here"])), 4);
    sb.ok(&["search", "--run-dir", "r"]);
    sb.ok(&["derive", "--run-dir", "r"]);
    fs::write(sb.path("file"), "").unwrap();
    assert_eq!(code(&sb.run(&["export-dot", "--run-dir", "r", "--out", "file"])), 4);
    assert_eq!(code(&sb.run(&["export-dot", "--run-dir", "r", "--out", "r"])), 0);
}
