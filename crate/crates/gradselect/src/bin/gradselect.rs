fn main() { std::process::exit(gradselect::cli::run()); }
