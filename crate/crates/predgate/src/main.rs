use predgate::{cli, Error};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Err(e) = cli::run(&args) {
        eprintln!("error: {e}");
        // verification failures get their own exit code so scripts can tell
        // "the model is wrong" from "the invocation is wrong"
        let code = if matches!(e, Error::Verification(_)) { 1 } else { 2 };
        std::process::exit(code);
    }
}
