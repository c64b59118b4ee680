#![allow(dead_code)]

use std::path::{Path, PathBuf};

use annotate_cli::Cli;
use clap::Parser;

/// Runs the CLI in-process with `args` after the program name.
pub fn cli(args: &[&str]) -> anyhow::Result<()> {
    annotate_cli::run(Cli::try_parse_from(std::iter::once("annotate").chain(args.iter().copied()))?)
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic project with `n` instances; returns the config path.
pub fn project(dir: &Path, n: usize) -> PathBuf {
    cli(&["synth", "--n", &n.to_string(), "--seed", "3", "--out", path(dir)]).unwrap();
    dir.join("annotate.json")
}

/// synth → annotate (three variants) → aggregate → triage at `coverage`.
pub fn triaged_project(dir: &Path, n: usize, coverage: f64) -> PathBuf {
    let config = project(dir, n);
    let c = path(&config);
    cli(&[
        "--config", c, "annotate", "--backend", "mock", "--variant", "simple", "--variant", "full_instruction",
        "--variant", "one_shot", "--seed", "7",
    ])
    .unwrap();
    let votes = dir.join("votes.json");
    cli(&["--config", c, "aggregate", "--out", path(&votes)]).unwrap();
    cli(&[
        "--config", c, "triage", "--votes", path(&votes), "--coverage", &coverage.to_string(), "--out",
        path(&dir.join("triage.json")),
    ])
    .unwrap();
    config
}
