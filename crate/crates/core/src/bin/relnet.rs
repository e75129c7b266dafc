fn main() {
    std::process::exit(relnet_speaker::cli::main());
}
