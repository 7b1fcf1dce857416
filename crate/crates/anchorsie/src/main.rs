fn main() {
    anchorsie_cli::run();
}

mod anchorsie_cli {
    pub fn run() {}
}
