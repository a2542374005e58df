use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const WORDS: &[&str] = &[
    "casa", "perro", "gato", "árbol", "qwzx", "mesa", "silla", "libro", "agua", "fuego",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lexprobe"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn lexprobe")
}

fn write_words(dir: &Path, words: &[&str]) -> PathBuf {
    let path = dir.join("words.txt");
    std::fs::write(&path, words.join("\n") + "\n").unwrap();
    path
}

fn summary(dir: &Path, prefix: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join(format!("{prefix}.summary.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn mock_run_exports_one_row_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    write_words(dir.path(), WORDS);
    let out = run(&["run", "--words", "words.txt", "--out", "o"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("o.records.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("word,prompt_id,parsed"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 40);
    let mut per_word: HashMap<&str, usize> = HashMap::new();
    for r in &rows {
        *per_word.entry(r.split(',').next().unwrap()).or_default() += 1;
    }
    assert_eq!(per_word.len(), 10);
    assert!(per_word.values().all(|n| *n == 4));
    let s = summary(dir.path(), "o");
    assert_eq!(s["state"], "complete");
    assert_eq!(s["answered"], 40);
}

#[test]
fn missing_word_file_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["run", "--words", "nope.txt", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));
}

#[test]
fn limited_run_resumes_without_repeating_calls() {
    let dir = tempfile::tempdir().unwrap();
    write_words(dir.path(), WORDS);
    let first = run(
        &["run", "--words", "words.txt", "--out", "o", "--limit", "15"],
        dir.path(),
    );
    assert_eq!(
        first.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let s = summary(dir.path(), "o");
    assert_eq!(s["answered"], 15);
    assert_eq!(s["state"], "stopped");

    let second = run(&["run", "--words", "words.txt", "--out", "o"], dir.path());
    assert_eq!(
        second.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&second.stderr)
    );
    let s = summary(dir.path(), "o");
    assert_eq!(s["answered"], 40);
    assert_eq!(s["this_run"]["provider_calls"], 25);
    assert_eq!(s["state"], "complete");

    // a completed experiment only re-exports
    let third = run(&["run", "--words", "words.txt", "--out", "o"], dir.path());
    assert_eq!(third.status.code(), Some(0));
    assert_eq!(summary(dir.path(), "o")["this_run"]["provider_calls"], 0);
}

#[test]
fn changed_settings_do_not_reuse_an_explicit_experiment() {
    let dir = tempfile::tempdir().unwrap();
    write_words(dir.path(), WORDS);
    let a = run(
        &["run", "--words", "words.txt", "--out", "o", "--experiment", "e1"],
        dir.path(),
    );
    assert_eq!(a.status.code(), Some(0));
    let b = run(
        &[
            "run",
            "--words",
            "words.txt",
            "--out",
            "o",
            "--experiment",
            "e1",
            "--temperature",
            "0.5",
        ],
        dir.path(),
    );
    assert_eq!(b.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&b.stderr).contains("already exists"));
}

#[test]
fn mock_outputs_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        write_words(dir.path(), WORDS);
        let out = run(
            &[
                "run",
                "--words",
                "words.txt",
                "--out",
                "o",
                "--seed",
                "7",
                "--mock-unparseable-rate",
                "0.3",
            ],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0));
    }
    for suffix in ["records.csv", "histogram.json", "summary.json"] {
        let x = std::fs::read(a.path().join(format!("o.{suffix}"))).unwrap();
        let y = std::fs::read(b.path().join(format!("o.{suffix}"))).unwrap();
        assert_eq!(x, y, "{suffix} differs");
    }
}

#[cfg(unix)]
#[test]
fn interrupt_leaves_a_resumable_partial_run() {
    let dir = tempfile::tempdir().unwrap();
    let words: Vec<String> = (0..200).map(|i| format!("w{i:03}")).collect();
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    write_words(dir.path(), &refs);
    let child = bin()
        .args(["run", "--words", "words.txt", "--out", "o", "--rate", "50"])
        .current_dir(dir.path())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    std::thread::sleep(std::time::Duration::from_millis(1500));
    let status = Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(status.success());
    let out = child.wait_with_output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let s = summary(dir.path(), "o");
    let answered = s["answered"].as_u64().unwrap();
    assert!(answered > 0 && answered < 800, "answered {answered}");
    assert_eq!(s["state"], "stopped");
    let csv = std::fs::read_to_string(dir.path().join("o.records.csv")).unwrap();
    assert_eq!(csv.lines().count() as u64, answered + 1);
}

fn report(dir: &Path, thresholds: &str, kind: &str) -> String {
    write_words(dir, WORDS);
    let out = run(
        &[
            "run",
            "--words",
            "words.txt",
            "--out",
            "o",
            "--experiment",
            "e",
            "--mock-thresholds",
            thresholds,
        ],
        dir,
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut args = vec!["report", "--store", "o.sqlite", "--experiment", "e"];
    if !kind.is_empty() {
        args.push(kind);
    }
    let out = run(&args, dir);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout(&out)
}

fn bin_line<'a>(table: &'a str, code: &str) -> Vec<&'a str> {
    table
        .lines()
        .find(|l| l.starts_with(code))
        .unwrap()
        .split_whitespace()
        .collect()
}

#[test]
fn report_tables_for_uniform_answers() {
    let dir = tempfile::tempdir().unwrap();
    let table = report(dir.path(), "100,100,100,100", "");
    assert_eq!(table.lines().count(), 1 + 16 + 1);
    assert_eq!(bin_line(&table, "1111"), ["1111", "10", "100.00"]);
    assert_eq!(bin_line(&table, "0000"), ["0000", "0", "0.00"]);
    assert!(table.ends_with("complete 10, excluded 0 (unparseable 0, incomplete 0)\n"));

    let rates = run(
        &["report", "--store", "o.sqlite", "--experiment", "e", "--rates"],
        dir.path(),
    );
    let rates = stdout(&rates);
    for p in ["P1", "P2", "P3", "P4"] {
        assert_eq!(bin_line(&rates, p), [p, "100.00"]);
    }
    let c = run(
        &[
            "report",
            "--store",
            "o.sqlite",
            "--experiment",
            "e",
            "--contradictions",
        ],
        dir.path(),
    );
    assert!(stdout(&c).ends_with("0 contradiction(s) between P2 and P3\n"));
}

#[test]
fn report_code_is_p1_rightmost() {
    let dir = tempfile::tempdir().unwrap();
    let table = report(dir.path(), "100,0,0,0", "");
    assert_eq!(bin_line(&table, "0001"), ["0001", "10", "100.00"]);
    assert_eq!(bin_line(&table, "1000"), ["1000", "0", "0.00"]);
}

#[test]
fn report_lists_contradicting_words() {
    let dir = tempfile::tempdir().unwrap();
    let table = report(dir.path(), "100,0,100,0", "--contradictions");
    let lines: Vec<_> = table.lines().collect();
    assert_eq!(lines.len(), 1 + 10 + 1);
    let mut sorted: Vec<&str> = WORDS.to_vec();
    sorted.sort();
    for (line, word) in lines[1..11].iter().zip(&sorted) {
        assert_eq!(line.split_whitespace().collect::<Vec<_>>(), [*word, "0101"]);
    }
    assert_eq!(lines[11], "10 contradiction(s) between P2 and P3");

    let json_path = dir.path().join("c.json");
    let out = run(
        &[
            "report",
            "--store",
            "o.sqlite",
            "--experiment",
            "e",
            "--contradictions",
            "--json",
            "c.json",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json_path).unwrap()).unwrap();
    assert_eq!(doc.as_array().unwrap().len(), 10);
}

#[test]
fn report_rejects_missing_store_and_unknown_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["report", "--store", "none.sqlite", "--experiment", "e"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("none.sqlite").exists());
    report(dir.path(), "50,50,50,50", "");
    let out = run(
        &["report", "--store", "o.sqlite", "--experiment", "nope"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn words_stats_matches_a_naive_count() {
    let dir = tempfile::tempdir().unwrap();
    let text = "El perro y el gato. ¡El PERRO ladra!\nY el gato, ¿duerme? 42 veces.";
    std::fs::write(dir.path().join("t.txt"), text).unwrap();
    let out = run(
        &[
            "words", "stats", "--text", "t.txt", "--top", "3", "--json", "s.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // oracle: split on anything that is not a letter, lowercase
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for t in &tokens {
        *counts.entry(t).or_default() += 1;
    }
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(doc["total_tokens"], tokens.len() as u64);
    assert_eq!(doc["unique_words"], counts.len() as u64);
    let top = doc["top_n_frequencies"].as_array().unwrap();
    assert_eq!(top[0]["word"], "el");
    assert_eq!(top[0]["count"], counts["el"]);
    let s = stdout(&out);
    assert!(s.starts_with(&format!(
        "total_tokens  {}\nunique_words  {}\n",
        tokens.len(),
        counts.len()
    )));
}

#[test]
fn words_normalize_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("raw.txt"),
        "  Casa\ncasa\n# comment\n\nA\u{301}rbol\nárbol\nPerro\n",
    )
    .unwrap();
    let a = run(
        &["words", "normalize", "--in", "raw.txt", "--out", "a.txt"],
        dir.path(),
    );
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let first = std::fs::read_to_string(dir.path().join("a.txt")).unwrap();
    assert_eq!(first, "casa\nárbol\nperro\n");
    let b = run(
        &["words", "normalize", "--in", "a.txt", "--out", "b.txt"],
        dir.path(),
    );
    assert!(b.status.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("b.txt")).unwrap(), first);
}

#[test]
fn words_normalize_rejects_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.txt"), "# nothing\n\n").unwrap();
    let out = run(
        &["words", "normalize", "--in", "empty.txt", "--out", "x.txt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_form_supplies_model_settings_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    write_words(dir.path(), &WORDS[..2]);
    std::fs::write(
        dir.path().join("form.json"),
        r#"{"template": "Lexical probe", "values": {"model": "gpt-4", "temperature": 0.3, "max_tokens": 5}}"#,
    )
    .unwrap();
    let out = run(
        &[
            "run",
            "--words",
            "words.txt",
            "--out",
            "o",
            "--config",
            "form.json",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let s = summary(dir.path(), "o");
    assert_eq!(s["model"], "gpt-4");
    assert_eq!(s["temperature"], 0.3);

    let out = run(
        &[
            "run",
            "--words",
            "words.txt",
            "--out",
            "p",
            "--config",
            "form.json",
            "--temperature",
            "0.7",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(summary(dir.path(), "p")["temperature"], 0.7);

    std::fs::write(dir.path().join("bad.json"), r#"{"temperature": 3}"#).unwrap();
    let out = run(
        &[
            "run",
            "--words",
            "words.txt",
            "--out",
            "q",
            "--config",
            "bad.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn partial_run_report_partitions_words() {
    let dir = tempfile::tempdir().unwrap();
    write_words(dir.path(), WORDS);
    let out = run(
        &[
            "run",
            "--words",
            "words.txt",
            "--out",
            "o",
            "--experiment",
            "e",
            "--limit",
            "14",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let csv = std::fs::read_to_string(dir.path().join("o.records.csv")).unwrap();
    let mut per_word: HashMap<String, usize> = HashMap::new();
    for line in csv.lines().skip(1) {
        *per_word
            .entry(line.split(',').next().unwrap().to_string())
            .or_default() += 1;
    }
    let complete = per_word.values().filter(|n| **n == 4).count();
    let incomplete = per_word.len() - complete;
    assert!(incomplete > 0, "14 pairs cannot cover whole words only");

    let table = stdout(&run(
        &["report", "--store", "o.sqlite", "--experiment", "e"],
        dir.path(),
    ));
    let expected =
        format!("complete {complete}, excluded {incomplete} (unparseable 0, incomplete {incomplete})\n");
    assert!(table.ends_with(&expected), "{table}");
}
