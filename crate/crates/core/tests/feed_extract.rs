use std::sync::Arc;
use std::time::{Duration, Instant};

use tokio::net::TcpListener;
use tokio_util::sync::CancellationToken;

use transit_idle::clock::{Clock, ScaledClock};
use transit_idle::extract::{RegionPoller, SourceConfig};
use transit_idle::model::IataId;
use transit_idle::sim::{serve_script, FleetScript};

fn script(iata: &str, vehicles: usize) -> Arc<FleetScript> {
    Arc::new(FleetScript::random(11, 1_706_572_800, IataId::new(iata).unwrap(), 30, vehicles, 200))
}

#[tokio::test]
async fn polls_every_r_seconds_on_a_compressed_clock() {
    let s = script("BOS", 5);
    let clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(s.epoch(), 100.0));
    let feed = serve_script(s.clone(), clock.clone(), "127.0.0.1:0".parse().unwrap()).await.unwrap();
    let src = SourceConfig::new("us-east", feed.url(), IataId::new("BOS").unwrap()).unwrap();
    let poller = RegionPoller::new("us-east", vec![src], 30, clock).unwrap();
    let cancel = CancellationToken::new();
    let (mut rx, handle) = poller.spawn(64, cancel.clone());

    let mut times = Vec::new();
    while times.len() < 12 {
        let snap = rx.recv().await.unwrap();
        assert_eq!(snap.len(), 5);
        assert!(snap.failures.is_empty());
        times.push(snap.poll_time);
    }
    cancel.cancel();
    handle.await.unwrap();
    feed.shutdown().await;
    for w in times.windows(2) {
        let gap = w[1] - w[0];
        assert!((29..=31).contains(&gap), "poll gap {gap} s in {times:?}");
    }
}

#[tokio::test]
async fn failed_and_slow_sources_degrade_to_the_rest() {
    let good = script("BOS", 4);
    let down = script("PVD", 3);
    let clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(good.epoch(), 30.0));
    let good_feed = serve_script(good, clock.clone(), "127.0.0.1:0".parse().unwrap()).await.unwrap();
    let down_feed = serve_script(down, clock.clone(), "127.0.0.1:0".parse().unwrap()).await.unwrap();
    down_feed.set_down(true);

    // accepts connections and never answers
    let silent = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let silent_url = format!("http://{}/feed.pb", silent.local_addr().unwrap());
    let hold = tokio::spawn(async move {
        let mut held = Vec::new();
        while let Ok((sock, _)) = silent.accept().await {
            held.push(sock);
        }
    });

    let sources = vec![
        SourceConfig::new("r", good_feed.url(), IataId::new("BOS").unwrap()).unwrap(),
        SourceConfig::new("r", down_feed.url(), IataId::new("PVD").unwrap()).unwrap(),
        SourceConfig::new("r", silent_url, IataId::new("SLO").unwrap()).unwrap(),
    ];
    let poller = RegionPoller::new("r", sources, 30, clock).unwrap();
    // r/2 = 15 simulated seconds = 0.5 s of real time
    assert_eq!(poller.request_timeout(), Duration::from_millis(500));

    let started = Instant::now();
    let snap = poller.poll_once().await;
    let took = started.elapsed();
    assert!(took >= Duration::from_millis(450) && took < Duration::from_millis(1_500), "{took:?}");
    assert_eq!(snap.len(), 4);
    assert!(snap.records.keys().all(|k| k.iata_id.as_str() == "BOS"));
    assert_eq!(snap.failures.len(), 2);
    assert!(snap.failures.iter().any(|f| f.message.contains("503")));
    assert!(snap.failures.iter().any(|f| f.message.contains("timed out")));

    down_feed.set_down(false);
    assert_eq!(poller.poll_once().await.len(), 7);
    hold.abort();
    good_feed.shutdown().await;
    down_feed.shutdown().await;
}
