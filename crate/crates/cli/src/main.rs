use std::process::ExitCode;

fn main() -> ExitCode {
    match ssboost_cli::run(std::env::args_os(), std::env::vars().collect()) {
        Ok(text) => {
            println!("{}", text.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message.trim_end());
            ExitCode::from(e.code as u8)
        }
    }
}
