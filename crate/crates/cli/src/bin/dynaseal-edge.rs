//! Example edge device: asks the backend for a token, then calls the
//! provider gateway directly with it.

use std::io::Write;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use dynaseal::edge::{EdgeClient, EdgeConfig, EdgeError};
use dynaseal::protocol::ChatMessage;
use dynaseal_cli::init_logging;

#[derive(Debug, Parser)]
#[command(name = "dynaseal-edge", version, about = "Send one chat request through a dynaseal deployment")]
struct Args {
    /// Base URL of the token-issuing backend.
    #[arg(long)]
    backend: String,
    /// Base URL of the provider gateway.
    #[arg(long)]
    gateway: String,
    #[arg(long, env = "DYNASEAL_DEVICE_ID")]
    device_id: String,
    #[arg(long, env = "DYNASEAL_DEVICE_SECRET", hide_env_values = true)]
    device_secret: String,
    #[arg(long, default_value = "m-small")]
    model: String,
    #[arg(long, default_value_t = 256)]
    max_tokens: u32,
    #[arg(long)]
    message: String,
    /// Print content as it arrives.
    #[arg(long)]
    stream: bool,
    /// Print the full response as JSON instead of its content.
    #[arg(long)]
    json: bool,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    #[arg(long, default_value = "warn")]
    log_level: tracing::Level,
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    init_logging(args.log_level);
    let config = EdgeConfig {
        backend_url: args.backend.clone(),
        gateway_url: args.gateway.clone(),
        device_id: args.device_id.clone(),
        device_secret: args.device_secret.clone(),
        default_model: args.model.clone(),
        request_timeout: Duration::from_millis(args.timeout_ms),
    };
    match chat(config, &args).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(EdgeError::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

async fn chat(config: EdgeConfig, args: &Args) -> Result<(), EdgeError> {
    let client = EdgeClient::new(config)?;
    let messages = vec![ChatMessage::user(args.message.clone())];
    let outcome = if args.stream && !args.json {
        let mut stdout = std::io::stdout();
        let out = client
            .chat_stream(messages, None, args.max_tokens, &mut |delta| {
                let _ = stdout.write_all(delta.as_bytes());
                let _ = stdout.flush();
            })
            .await?;
        println!();
        out
    } else if args.stream {
        client.chat_stream(messages, None, args.max_tokens, &mut |_| {}).await?
    } else {
        client.chat(messages, None, args.max_tokens).await?
    };
    let r = &outcome.response;
    if args.json {
        println!("{}", serde_json::to_string_pretty(r).expect("responses serialize"));
    } else if !args.stream {
        println!("{}", r.content());
    }
    eprintln!(
        "model={} prompt_tokens={} completion_tokens={} finish_reason={:?}",
        r.model, r.usage.prompt_tokens, r.usage.completion_tokens, r.finish_reason
    );
    Ok(())
}
