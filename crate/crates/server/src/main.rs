use std::net::SocketAddr;

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .init();
    let addr: SocketAddr = std::env::var("PRUNEBENCH_ADDR")
        .unwrap_or_else(|_| "127.0.0.1:8077".to_string())
        .parse()
        .expect("PRUNEBENCH_ADDR must be host:port");
    let (local, handle) = prunebench_server::spawn(addr).await.expect("bind failed");
    tracing::info!("listening on http://{local}");
    handle.await.expect("server task failed");
}
