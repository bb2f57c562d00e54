use std::io::{self, BufWriter};

fn main() {
    let stdin = io::stdin();
    let mut input = stdin.lock();
    let mut output = BufWriter::new(io::stdout().lock());
    let code = dualshot_cli::run(std::env::args_os(), &mut input, &mut output);
    drop(output);
    std::process::exit(code);
}
