fn main() {
    std::process::exit(dml::cli::main_from_env());
}
