//! End-to-end tests that drive the compiled binary the way a user would:
//! every stage of the pipeline, the documented exit codes, and byte-level
//! reproducibility of each artifact.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use typolab_core::corpus::TripletDataset;
use typolab_core::detector::SelectionExport;
use typolab_core::harness::ExperimentReport;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_typolab"));
    cmd.env_remove("TYPOLAB_OUT_DIR");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawning typolab")
}

fn assert_ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(cmd: &mut Command) -> (i32, String) {
    let out = run(cmd);
    (out.status.code().expect("signal-free exit"), String::from_utf8_lossy(&out.stderr).into())
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

/// One trained tiny model shared by the tests below. Built once through the
/// binary itself, so the fixture also exercises gen-corpus, build-vocab,
/// train, and build-triplets on the happy path.
struct Fixture {
    dir: PathBuf,
}

impl Fixture {
    fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.tsv")
    }
    fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }
    fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    fn triplets(&self) -> PathBuf {
        self.dir.join("triplets_t1.jsonl")
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::Builder::new()
            .prefix("typolab-cli-fixture")
            .tempdir()
            .unwrap()
            .keep();
        let f = Fixture { dir };
        assert_ok(bin().args(["gen-corpus", "--n", "120", "--seed", "9", "--out"]).arg(f.corpus()));
        assert_ok(
            bin()
                .args(["build-vocab", "--size", "420", "--corpus"])
                .arg(f.corpus())
                .arg("--out")
                .arg(f.vocab()),
        );
        assert_ok(
            bin()
                .args([
                    "train",
                    "--layers",
                    "2",
                    "--heads",
                    "2",
                    "--d-model",
                    "32",
                    "--d-ffn",
                    "48",
                    "--max-seq",
                    "160",
                    "--epochs",
                    "60",
                    "--lr",
                    "2e-3",
                    "--seed",
                    "0",
                    "--target-accuracy",
                    "0.99",
                    "--probe-every",
                    "5",
                    "--quiet",
                ])
                .arg("--corpus")
                .arg(f.corpus())
                .arg("--vocab")
                .arg(f.vocab())
                .arg("--out")
                .arg(f.checkpoint()),
        );
        let out = assert_ok(
            bin()
                .args(["build-triplets", "--t", "1", "--k", "40", "--seed", "0"])
                .arg("--checkpoint")
                .arg(f.checkpoint())
                .arg("--vocab")
                .arg(f.vocab())
                .arg("--corpus")
                .arg(f.corpus())
                .arg("--out")
                .arg(f.triplets()),
        );
        assert!(out.contains("built 40 triplets"), "unexpected build output: {out}");
        f
    })
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("b.tsv");
    assert_ok(bin().args(["gen-corpus", "--n", "50", "--seed", "3", "--out"]).arg(&a));
    assert_ok(bin().args(["gen-corpus", "--n", "50", "--seed", "3", "--out"]).arg(&b));
    let text = read(&a);
    assert_eq!(text, read(&b));
    assert!(text.starts_with("# synthetic corpus: n=50 seed=3\n"));
    assert_eq!(text.lines().count(), 51);
    for line in text.lines().skip(1) {
        assert_eq!(line.split('\t').count(), 2, "bad TSV line: {line}");
    }
}

#[test]
fn build_vocab_is_deterministic() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("vocab2.txt");
    assert_ok(
        bin()
            .args(["build-vocab", "--size", "420", "--corpus"])
            .arg(f.corpus())
            .arg("--out")
            .arg(&again),
    );
    assert_eq!(read(&f.vocab()), read(&again));
}

#[test]
fn triplet_dataset_loads_and_replays_byte_identically() {
    let f = fixture();
    let ds = TripletDataset::load(&f.triplets()).unwrap();
    assert_eq!(ds.samples.len(), 40);
    assert_eq!(ds.meta.t, 1);
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("again.jsonl");
    assert_ok(
        bin()
            .args(["build-triplets", "--t", "1", "--k", "40", "--seed", "0"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--vocab")
            .arg(f.vocab())
            .arg("--corpus")
            .arg(f.corpus())
            .arg("--out")
            .arg(&again),
    );
    assert_eq!(read(&f.triplets()), read(&again));
}

#[test]
fn score_emits_stable_csv_and_selection() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let csv_a = dir.path().join("a.csv");
    let sel_a = dir.path().join("a.json");
    let csv_b = dir.path().join("b.csv");
    let sel_b = dir.path().join("b.json");
    for (csv, sel) in [(&csv_a, &sel_a), (&csv_b, &sel_b)] {
        assert_ok(
            bin()
                .args(["score", "--kind", "neurons", "--fraction", "0.05"])
                .arg("--checkpoint")
                .arg(f.checkpoint())
                .arg("--triplets")
                .arg(f.triplets())
                .arg("--out-csv")
                .arg(csv)
                .arg("--out-selection")
                .arg(sel),
        );
    }
    assert_eq!(read(&csv_a), read(&csv_b));
    assert_eq!(read(&sel_a), read(&sel_b));

    let csv = read(&csv_a);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("kind,layer,index,s_clean,s_typo,s_split,delta"));
    // 2 layers x 48 neurons, all rows tagged as neuron rows.
    assert_eq!(csv.lines().count(), 1 + 96);
    assert!(lines.all(|l| l.starts_with("neuron,")));

    let sel: SelectionExport = serde_json::from_str(&read(&sel_a)).unwrap();
    assert_eq!(sel.kind, "neuron");
    assert_eq!(sel.method, "top_fraction");
    assert_eq!(sel.fraction, Some(0.05));
    assert_eq!(sel.t, 1);
    assert_eq!(sel.units.len(), 5); // ceil(0.05 * 96)
    assert_eq!(sel.checkpoint.len(), 64);
    assert!(sel.checkpoint.chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn score_heads_by_threshold() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("heads.csv");
    let sel = dir.path().join("heads.json");
    assert_ok(
        bin()
            .args(["score", "--kind", "heads", "--threshold", "-1e9"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--triplets")
            .arg(f.triplets())
            .arg("--out-csv")
            .arg(&csv)
            .arg("--out-selection")
            .arg(&sel),
    );
    let sel: SelectionExport = serde_json::from_str(&read(&sel)).unwrap();
    assert_eq!(sel.kind, "head");
    assert_eq!(sel.method, "threshold");
    assert_eq!(sel.units.len(), 4); // every head clears a -1e9 floor
    assert!(read(&csv).lines().skip(1).all(|l| l.starts_with("head,")));
}

#[test]
fn ablate_reports_all_conditions_and_replays() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let rep_a = dir.path().join("a.json");
    let rep_b = dir.path().join("b.json");
    for rep in [&rep_a, &rep_b] {
        let stdout = assert_ok(
            bin()
                .args([
                    "ablate", "--kind", "neurons", "--random", "--identify-n", "20", "--fraction",
                    "0.05", "--seed", "7",
                ])
                .arg("--checkpoint")
                .arg(f.checkpoint())
                .arg("--vocab")
                .arg(f.vocab())
                .arg("--triplets")
                .arg(f.triplets())
                .arg("--out")
                .arg(rep),
        );
        assert!(stdout.contains("unablated"));
        assert!(stdout.contains("typo neurons"));
        assert!(stdout.contains("random neurons"));
    }
    assert_eq!(read(&rep_a), read(&rep_b));

    let report = ExperimentReport::from_json(&read(&rep_a)).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[0].condition, "unablated");
    assert_eq!(report.rows[0].units, 0);
    for row in &report.rows {
        assert!((0.0..=1.0).contains(&row.clean_accuracy));
        assert!((0.0..=1.0).contains(&row.typo_accuracy));
    }
    assert!(report.neuron_delta_stats.is_some());
    assert_eq!(report.distributions.len(), 1);
    assert_eq!(report.seeds.build, 0);
    assert_eq!(report.seeds.experiment, 7);
    assert_eq!(report.seeds.t, 1);
}

#[test]
fn ablate_accepts_a_selection_file() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let sel = dir.path().join("s.json");
    assert_ok(
        bin()
            .args(["score", "--kind", "neurons", "--fraction", "0.05"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--triplets")
            .arg(f.triplets())
            .arg("--out-csv")
            .arg(&csv)
            .arg("--out-selection")
            .arg(&sel),
    );
    let rep = dir.path().join("rep.json");
    let stdout = assert_ok(
        bin()
            .args(["ablate"])
            .arg("--selection")
            .arg(&sel)
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--vocab")
            .arg(f.vocab())
            .arg("--triplets")
            .arg(f.triplets())
            .arg("--out")
            .arg(&rep),
    );
    assert!(stdout.contains("selection file (5 units)"));
    let report = ExperimentReport::from_json(&read(&rep)).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.notes.iter().any(|n| n.contains("selection loaded from file")));
}

#[test]
fn plot_commands_emit_svg_with_matching_csv() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let plots = dir.path().join("plots");

    let csv = dir.path().join("scores.csv");
    let sel = dir.path().join("sel.json");
    assert_ok(
        bin()
            .args(["score", "--kind", "neurons", "--fraction", "0.05"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--triplets")
            .arg(f.triplets())
            .arg("--out-csv")
            .arg(&csv)
            .arg("--out-selection")
            .arg(&sel),
    );
    let rep = dir.path().join("rep.json");
    assert_ok(
        bin()
            .args(["ablate", "--kind", "neurons", "--identify-n", "20", "--seed", "0"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--vocab")
            .arg(f.vocab())
            .arg("--triplets")
            .arg(f.triplets())
            .arg("--out")
            .arg(&rep),
    );

    assert_ok(bin().args(["plot", "layer-hist", "--report"]).arg(&rep).arg("--out-dir").arg(&plots));
    assert_ok(
        bin()
            .args(["plot", "delta-heatmap", "--kind", "neurons", "--scores"])
            .arg(&csv)
            .arg("--out-dir")
            .arg(&plots),
    );
    assert_ok(
        bin()
            .args(["plot", "attention-map", "--sample", "2", "--layer", "1"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--triplets")
            .arg(f.triplets())
            .arg("--out-dir")
            .arg(&plots),
    );
    assert_ok(
        bin()
            .args(["plot", "accuracy-curve", "--k", "10", "--t-values", "0,1", "--seed", "0"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--vocab")
            .arg(f.vocab())
            .arg("--corpus")
            .arg(f.corpus())
            .arg("--out-dir")
            .arg(&plots),
    );

    for stem in ["layer_hist", "delta_heatmap", "attention_map", "accuracy_curve"] {
        let svg = read(&plots.join(format!("{stem}.svg")));
        assert!(svg.starts_with("<svg"), "{stem}.svg is not an svg");
        assert!(svg.trim_end().ends_with("</svg>"));
        let csv = read(&plots.join(format!("{stem}.csv")));
        assert!(csv.lines().count() > 1, "{stem}.csv has no data rows");
    }
    let heat = read(&plots.join("delta_heatmap.csv"));
    assert_eq!(heat.lines().next(), Some("layer,index,delta"));
    assert_eq!(heat.lines().count(), 1 + 96);
    let curve = read(&plots.join("accuracy_curve.csv"));
    assert_eq!(curve.lines().next(), Some("t,accuracy,samples"));
    assert!(curve.lines().nth(1).unwrap().starts_with("0,1,"), "t=0 accuracy must be 1: {curve}");
}

#[test]
fn validation_errors_exit_2() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = exit_code(
        bin()
            .args(["build-vocab", "--size", "100", "--corpus"])
            .arg(f.corpus())
            .arg("--out")
            .arg(dir.path().join("v.txt")),
    );
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("below the minimum"));

    let (code, err) = exit_code(
        bin()
            .args([
                "train", "--layers", "2", "--heads", "3", "--d-model", "32", "--d-ffn", "48",
                "--epochs", "1",
            ])
            .arg("--corpus")
            .arg(f.corpus())
            .arg("--vocab")
            .arg(f.vocab())
            .arg("--out")
            .arg(dir.path().join("m.ckpt")),
    );
    assert_eq!(code, 2, "stderr: {err}");
    assert!(err.contains("not divisible"));

    // clap enforces the fraction/threshold conflict itself.
    let (code, _) = exit_code(
        bin()
            .args(["score", "--kind", "neurons", "--fraction", "0.05", "--threshold", "0.1"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--triplets")
            .arg(f.triplets())
            .arg("--out-csv")
            .arg(dir.path().join("s.csv"))
            .arg("--out-selection")
            .arg(dir.path().join("s.json")),
    );
    assert_eq!(code, 2);

    let (code, err) = exit_code(
        bin()
            .args(["plot", "attention-map", "--sample", "999"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--triplets")
            .arg(f.triplets())
            .arg("--out-dir")
            .arg(dir.path().join("p")),
    );
    assert_eq!(code, 2, "stderr: {err}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "out_dir = [not toml").unwrap();
    let (code, _) = exit_code(bin().args(["run-all", "--config"]).arg(&bad));
    assert_eq!(code, 2);

    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "out_dir = \"x\"\nno_such_key = 1\n").unwrap();
    let (code, err) = exit_code(bin().args(["run-all", "--config"]).arg(&unknown));
    assert_eq!(code, 2, "stderr: {err}");
}

#[test]
fn data_errors_exit_3() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = exit_code(
        bin()
            .args(["score", "--kind", "neurons", "--fraction", "0.05"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--triplets")
            .arg(dir.path().join("missing.jsonl"))
            .arg("--out-csv")
            .arg(dir.path().join("s.csv"))
            .arg("--out-selection")
            .arg(dir.path().join("s.json")),
    );
    assert_eq!(code, 3, "stderr: {err}");

    let (code, err) = exit_code(
        bin()
            .args(["ablate", "--kind", "neurons", "--identify-n", "400"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--vocab")
            .arg(f.vocab())
            .arg("--triplets")
            .arg(f.triplets())
            .arg("--out")
            .arg(dir.path().join("r.json")),
    );
    assert_eq!(code, 3, "stderr: {err}");
    assert!(err.contains("need more samples"));

    // More triplets than the model can answer.
    let (code, err) = exit_code(
        bin()
            .args(["build-triplets", "--t", "1", "--k", "5000", "--seed", "0"])
            .arg("--checkpoint")
            .arg(f.checkpoint())
            .arg("--vocab")
            .arg(f.vocab())
            .arg("--corpus")
            .arg(f.corpus())
            .arg("--out")
            .arg(dir.path().join("t.jsonl")),
    );
    assert_eq!(code, 3, "stderr: {err}");

    let truncated = dir.path().join("trunc.ckpt");
    std::fs::write(&truncated, &std::fs::read(f.checkpoint()).unwrap()[..64]).unwrap();
    let (code, err) = exit_code(
        bin()
            .args(["score", "--kind", "neurons", "--fraction", "0.05"])
            .arg("--checkpoint")
            .arg(&truncated)
            .arg("--triplets")
            .arg(f.triplets())
            .arg("--out-csv")
            .arg(dir.path().join("s.csv"))
            .arg("--out-selection")
            .arg(dir.path().join("s.json")),
    );
    assert_eq!(code, 3, "stderr: {err}");
}

#[test]
fn run_all_replays_byte_identically_and_honors_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("runA");
    let out_b = dir.path().join("runB");
    let config = dir.path().join("pipeline.toml");
    std::fs::write(
        &config,
        format!(
            r#"out_dir = "{}"
seed = 0

[corpus]
n = 110

[vocab]
size = 400

[model]
layers = 2
heads = 2
d_model = 32
d_ffn = 48
max_seq = 160

[train]
epochs = 80
lr = 2e-3
target_accuracy = 0.99
probe_every = 5
quiet = true

[triplets]
t = [1]
k = 25

[score]
neuron_fraction = 0.05
head_fraction = 0.25

[ablate]
identify_n = 15
bins = 4

[plots]
curve_t = [0, 1]
curve_k = 15
"#,
            out_a.display()
        ),
    )
    .unwrap();

    let stdout = assert_ok(bin().args(["run-all", "--config"]).arg(&config));
    assert!(stdout.contains("==> train"));
    assert!(stdout.contains("unablated"));

    // Same config, output redirected through the environment.
    let mut second = bin();
    second.env("TYPOLAB_OUT_DIR", &out_b);
    assert_ok(second.args(["run-all", "--config"]).arg(&config));

    let mut names: Vec<String> = std::fs::read_dir(&out_a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.contains(&"model.ckpt".to_string()));
    assert!(names.contains(&"triplets_t1.jsonl".to_string()));
    assert!(names.contains(&"report_t1.json".to_string()));
    assert!(names.contains(&"accuracy_curve.svg".to_string()));
    for name in &names {
        if name == "pipeline_config.json" {
            continue; // embeds the output path itself
        }
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}
