use std::io;

fn main() {
    if let Err(e) = vwbound::configure_threads() {
        eprintln!("error: {e}");
        std::process::exit(vwbound::EXIT_USAGE);
    }
    let code = vwbound::run(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
