fn main() {
    // torch-sys links libtorch dynamically but does not embed a runtime search path.
    if let Ok(dir) = std::env::var("DEP_TCH_LIBTORCH_LIB") {
        println!("cargo:rustc-link-arg=-Wl,-rpath,{dir}");
    }
}
