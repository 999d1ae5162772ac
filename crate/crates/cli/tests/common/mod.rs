#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

pub fn insgp(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_insgp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn insgp")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file in `dir`, sorted, with its bytes.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<(PathBuf, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p.file_name().unwrap().into(), bytes)
        })
        .collect();
    files.sort();
    files
}
