fn main() {
    std::process::exit(layoutdiff_cli::main_with_env());
}
