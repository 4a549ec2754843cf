use std::fs;
use std::sync::Arc;

use espbench::broker::TopicCatalog;
use espbench::clock::{ClockMode, SystemClock};
use espbench::sender::{self, SenderConfig, StreamSpec};

fn paced(rate: u32, duration_s: u64, lines: usize) -> (u64, f64, f64) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let text: String = (0..lines).map(|i| format!("{i},payload\n")).collect();
    fs::write(&path, text).unwrap();
    let catalog = TopicCatalog::new();
    catalog.create_topic("s").unwrap();
    let cfg = SenderConfig {
        input_rate: rate,
        duration_s,
        clock_mode: ClockMode::Real,
        base_ts: 0,
    };
    let spec = StreamSpec {
        path,
        topic: "s".into(),
    };
    let summary = sender::stream(&cfg, &[spec], &catalog, Arc::new(SystemClock::new())).unwrap();
    let log = catalog.topic("s").unwrap();
    let entries = log.snapshot();
    assert!(entries.windows(2).all(|w| w[0].ingestion_ts <= w[1].ingestion_ts));
    for (i, e) in entries.iter().enumerate() {
        assert_eq!(e.text().unwrap(), format!("{i},payload"));
    }
    let s = &summary.streams[0];
    (log.len(), s.achieved_rate.unwrap(), s.wall_time_s)
}

#[test]
fn one_thousand_per_second_for_five_seconds() {
    let (sent, rate, wall) = paced(1_000, 5, 20_000);
    assert!((4_950..=5_050).contains(&sent), "sent {sent}");
    assert!((rate - 1_000.0).abs() <= 50.0, "achieved {rate}/s");
    assert!((4.5..=5.5).contains(&wall), "wall {wall} s");
}

#[test]
fn ten_thousand_per_second_for_two_seconds() {
    let (sent, rate, wall) = paced(10_000, 2, 40_000);
    assert_eq!(sent, 20_000);
    assert!((rate - 10_000.0).abs() <= 500.0, "achieved {rate}/s");
    assert!((1.8..=2.2).contains(&wall), "wall {wall} s");
}
