fn main() {
    std::process::exit(ortho_lasso::cli::run_from(std::env::args_os()));
}
