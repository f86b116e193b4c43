fn main() {
    std::process::exit(csa_dpunet::cli::run_command(std::env::args_os()));
}
