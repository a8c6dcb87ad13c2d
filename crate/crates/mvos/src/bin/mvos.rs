fn main() {
    // placeholder during bring-up; the real dispatch lands with the commands module
    eprintln!("mvos: not wired up yet");
    std::process::exit(2);
}
