use std::process::Command;

fn git(args: &[&str]) -> Option<String> {
    let out = Command::new("git").args(args).output().ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!s.is_empty()).then_some(s)
}

fn main() {
    let pkg = std::env::var("CARGO_PKG_VERSION").unwrap_or_default();
    let version = git(&["describe", "--tags", "--always", "--dirty"])
        .map(|d| if d.starts_with('v') { d } else { format!("v{pkg}-g{d}") })
        .unwrap_or_else(|| format!("v{pkg}"));
    println!("cargo:rustc-env=LOWRANK_DESCRIBE={version}");
    println!("cargo:rerun-if-changed=build.rs");
    println!("cargo:rerun-if-changed=../../.git/HEAD");
    println!("cargo:rerun-if-changed=../../.git/index");
}
