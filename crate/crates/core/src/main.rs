fn main() {
    gss::cli::init_logging();
    std::process::exit(gss::cli::run(std::env::args_os()));
}
