use ssattn::checks::Library;
use ssattn::cli::{run, Streams};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    let code = run(&args, &Library, &mut Streams { out: &mut out, err: &mut err });
    std::process::exit(code);
}
