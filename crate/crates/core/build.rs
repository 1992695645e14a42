use std::env;
use std::path::Path;

/// The softmax-style kernels spend most of their time in exp over large
/// buffers. When the target is x86_64 linux-gnu and the system ships the
/// glibc vector math library, compile thin shims around its 4- and 8-wide
/// exp and let the library dispatch at runtime; everything falls back to
/// scalar exp otherwise.
fn mvec_available() -> bool {
    [
        "/usr/lib/x86_64-linux-gnu",
        "/usr/lib64",
        "/usr/lib",
        "/lib/x86_64-linux-gnu",
    ]
    .iter()
    .any(|dir| {
        Path::new(dir).join("libmvec.so").exists()
            || Path::new(dir).join("libmvec.so.1").exists()
            || Path::new(dir).join("libmvec.a").exists()
    })
}

fn main() {
    println!("cargo:rustc-check-cfg=cfg(has_mvec)");
    println!("cargo:rerun-if-changed=csrc/vexp_avx2.c");
    println!("cargo:rerun-if-changed=csrc/vexp_avx512.c");

    let arch = env::var("CARGO_CFG_TARGET_ARCH").unwrap_or_default();
    let os = env::var("CARGO_CFG_TARGET_OS").unwrap_or_default();
    let abi = env::var("CARGO_CFG_TARGET_ENV").unwrap_or_default();
    if arch == "x86_64" && os == "linux" && abi == "gnu" && mvec_available() {
        cc::Build::new()
            .file("csrc/vexp_avx2.c")
            .flag("-mavx2")
            .opt_level(2)
            .compile("dsattn_vexp_avx2");
        cc::Build::new()
            .file("csrc/vexp_avx512.c")
            .flag("-mavx512f")
            .opt_level(2)
            .compile("dsattn_vexp_avx512");
        println!("cargo:rustc-link-lib=mvec");
        println!("cargo:rustc-cfg=has_mvec");
    }
}
