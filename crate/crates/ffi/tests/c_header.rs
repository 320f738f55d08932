use std::path::{Path, PathBuf};
use std::process::Command;

/// `target/<profile>` holding the static library built alongside this test.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_generated_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = artifact_dir().join("libbh_depletion_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "smoke program exited with {:?}",
        out.status.code()
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
