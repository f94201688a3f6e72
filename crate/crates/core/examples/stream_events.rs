//! Starts the websocket stream, subscribes to a region and prints the
//! frames a client receives.
//!
//!     cargo run --example stream_events

use futures::StreamExt;

use transit_idle::model::{IataId, IdlingEvent};
use transit_idle::stream::{serve, Broadcaster};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let hub = Broadcaster::new(["us-east"]);
    let server = serve(hub.clone(), "127.0.0.1:0".parse()?).await?;
    let url = format!("ws://{}/events/us-east", server.local_addr());
    println!("subscribing to {url}");
    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await?;
    while hub.subscriber_count("us-east") == 0 {
        tokio::task::yield_now().await;
    }

    let event = IdlingEvent {
        iata_id: IataId::new("NYC")?,
        vehicle_id: "MTA NYCT_5975".into(),
        route_id: Some("BX9".into()),
        trip_id: Some("KB_D3-Weekday-SDon-011000_BX9_602".into()),
        latitude: 40.84089279174805,
        longitude: -73.87944030761719,
        datetime: 1697178721,
        duration: 60,
    };
    hub.broadcast("us-east", &[]);
    hub.broadcast("us-east", std::slice::from_ref(&event));
    hub.broadcast("us-east", &[IdlingEvent { duration: 90, ..event }]);

    for _ in 0..3 {
        if let Some(msg) = ws.next().await {
            println!("{}", msg?);
        }
    }
    server.shutdown().await;
    if let Some(Ok(msg)) = ws.next().await {
        println!("closed: {msg:?}");
    }
    Ok(())
}
