use clap::Parser;

fn main() {
    let cli = match mkis_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // help and version requests are not failures; usage errors exit 1
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    std::process::exit(mkis_cli::run(cli));
}
