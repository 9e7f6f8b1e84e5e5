use std::io::Write;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let mut out = stdout.lock();
    let mut err = stderr.lock();
    let code = pianomtl::cli::run(
        std::env::args_os(),
        &|key| std::env::var(key).ok(),
        &mut out,
        &mut err,
    );
    let _ = out.flush();
    std::process::exit(code);
}
