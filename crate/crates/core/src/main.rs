fn main() {
    std::process::exit(mfg_master::cli::run(std::env::args_os()));
}
