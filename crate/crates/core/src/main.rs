fn main() {
    std::process::exit(spatial_transport::cli::main_with_args(std::env::args_os()));
}
