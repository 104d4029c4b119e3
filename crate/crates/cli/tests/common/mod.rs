#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub const BIN: &str = env!("CARGO_BIN_EXE_promptsearch");

pub fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo")
}

/// Runs the binary with `args` from `dir`.
pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let p = dir.join(name);
    if let Some(parent) = p.parent() {
        std::fs::create_dir_all(parent).unwrap();
    }
    std::fs::write(&p, contents).unwrap();
    p
}

pub fn jsonl(rows: &[Value]) -> String {
    rows.iter().map(|r| r.to_string() + "\n").collect()
}

/// One registry line.
pub fn task(id: &str, split: &str, format: &str, labels: &[&str], metric: &str, data: &str) -> Value {
    json!({
        "task_id": id,
        "task_type": "SENTI",
        "split": split,
        "format": format,
        "label_set": labels,
        "metric": metric,
        "arity": 1,
        "data_path": data,
    })
}

pub fn labeled(id: &str, text: &str, label: &str) -> Value {
    json!({"id": id, "segments": [text], "label": label})
}

/// Single file in the run directory whose name starts with `prefix`.
pub fn find_output(root: &Path, prefix: &str) -> PathBuf {
    let mut hits = Vec::new();
    for run in std::fs::read_dir(root).unwrap() {
        let run = run.unwrap().path();
        for f in std::fs::read_dir(&run).unwrap() {
            let f = f.unwrap().path();
            if f.file_name().unwrap().to_str().unwrap().starts_with(prefix) {
                hits.push(f);
            }
        }
    }
    assert_eq!(hits.len(), 1, "expected one {prefix}* under {}", root.display());
    hits.remove(0)
}

pub fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Minimal registry + config for the text-genome search.
pub fn text_search_fixture(dir: &Path, iterations: usize) -> PathBuf {
    write(
        dir,
        "t.jsonl",
        &jsonl(&[labeled("a", "好", "是"), labeled("b", "坏", "否")]),
    );
    write(
        dir,
        "tasks.jsonl",
        &jsonl(&[task(
            "t",
            "test",
            "classification",
            &["否", "是"],
            "micro_f1",
            "t.jsonl",
        )]),
    );
    write(
        dir,
        "cfg.toml",
        &format!(
            "registry = \"tasks.jsonl\"\nseeds = [0]\n\n[gps]\ngenome = \"text\"\ninitial_prompts = [\"p\"]\n\
             iterations = {iterations}\ntop_k = 2\nsuffixes = [\"a\", \"b\"]\n"
        ),
    )
}
