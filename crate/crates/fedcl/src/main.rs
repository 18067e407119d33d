fn main() {
    std::process::exit(fedcl::cli::run());
}
