fn main() {
    std::process::exit(autonomy_cluster::cli::run(std::env::args_os()));
}
