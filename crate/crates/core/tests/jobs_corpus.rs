use std::collections::HashMap;
use std::io::Cursor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use meshmon::jobsingest::{
    aggregate_bytes_by_destination, geo_annotate, parse_log, GeoTable, GroupBy, UNLOCATED,
};

const GEO: &str = "\
10.0.0.0/8,US-Central,39.0,-95.0
10.2.0.0/16,US-Midwest,41.8,-87.6
10.2.3.0/24,US-Chicago,41.9,-87.7
192.168.0.0/16,EU-West,48.8,2.3
2001:db8::/32,AP-East,35.7,139.7
";

fn corpus(lines: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for i in 0..lines {
        let worker = match rng.random_range(0..4) {
            0 => format!("10.2.3.{}", rng.random_range(0..=255)),
            1 => format!(
                "10.{}.{}.{}",
                rng.random_range(0..=255),
                rng.random_range(0..=255),
                rng.random_range(0..=255)
            ),
            2 => format!("2001:db8::{:x}", rng.random_range(1..0xffffu32)),
            _ => format!(
                "172.16.{}.{}",
                rng.random_range(0..=255),
                rng.random_range(0..=255)
            ),
        };
        out.push_str(&format!(
            "ts=2020-01-{:02}T{:02}:{:02}:{:02}Z submit=s{}.example.org worker={worker} bytes={} lost_pkts={} reorders={} duration_s={}\n",
            1 + i % 28,
            rng.random_range(0..24),
            rng.random_range(0..60),
            rng.random_range(0..60),
            rng.random_range(1..5),
            rng.random_range(0..u64::from(u32::MAX)) * 1000,
            rng.random_range(0..500),
            rng.random_range(0..50),
            f64::from(rng.random_range(1..100_000u32)) / 10.0,
        ));
    }
    out
}

#[test]
fn corpus_round_trip_and_streaming_sum() {
    let text = corpus(100_000, 4);
    let parsed = parse_log(Cursor::new(&text)).unwrap();
    assert!(parsed.errors.is_empty(), "{:?}", &parsed.errors[..1]);
    assert_eq!(parsed.records.len(), 100_000);
    for (line, rec) in text.lines().zip(&parsed.records) {
        assert_eq!(rec.to_line(), line);
    }

    let geo = GeoTable::parse(GEO).unwrap();
    let annotated: Vec<_> = parsed
        .records
        .into_iter()
        .map(|r| geo_annotate(r, &geo))
        .collect();
    let rows = aggregate_bytes_by_destination(&annotated, GroupBy::Region);

    // Streaming oracle: walk the raw text once, resolving regions by a linear
    // scan over the geo lines.
    let prefixes: Vec<(ipnet::IpNet, &str)> = GEO
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1])
        })
        .collect();
    let mut oracle: HashMap<&str, (u128, u64)> = HashMap::new();
    let mut grand = 0u128;
    for line in text.lines() {
        let field = |k: &str| {
            line.split(' ')
                .find_map(|kv| kv.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
                .unwrap()
        };
        let bytes: u128 = field("bytes").parse().unwrap();
        let addr: std::net::IpAddr = field("worker").parse().unwrap();
        let region = prefixes
            .iter()
            .filter(|(p, _)| p.contains(&addr))
            .max_by_key(|(p, _)| p.prefix_len())
            .map_or(UNLOCATED, |(_, r)| r);
        let e = oracle.entry(region).or_default();
        e.0 += bytes;
        e.1 += 1;
        grand += bytes;
    }
    assert_eq!(rows.len(), oracle.len());
    for r in &rows {
        assert_eq!(
            oracle[r.group.as_str()],
            (r.total_bytes, r.count),
            "{}",
            r.group
        );
    }
    assert_eq!(rows.iter().map(|r| r.total_bytes).sum::<u128>(), grand);
    assert!(rows
        .windows(2)
        .all(|w| w[0].total_bytes >= w[1].total_bytes));
}

#[test]
fn bad_lines_are_reported_with_line_numbers() {
    let text = format!(
        "{}ts=2020-01-01T00:00:00Z submit=x worker=10.0.0.1 lost_pkts=0 reorders=0 duration_s=1\n",
        corpus(2, 1)
    );
    let parsed = parse_log(Cursor::new(text)).unwrap();
    assert_eq!(parsed.records.len(), 2);
    assert_eq!(parsed.errors.len(), 1);
    assert_eq!(parsed.errors[0].line, 3);
    assert!(parsed.errors[0].reason.contains("bytes"));
}
