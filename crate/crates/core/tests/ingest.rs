use std::io::Write;

use csi_mopoe::csi_ingest::{default_lltf_indices, load_frames, parse_csi_log, write_csi_log, CsiPacket, N_SUBCARRIERS};
use num_complex::Complex64;

#[test]
fn full_length_log_parses_every_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("csi.log");
    let n = 57_413;
    // raw 64-entry records, as the receiver emits them
    let body = (0..128).map(|i| (i % 7).to_string()).collect::<Vec<_>>().join(",");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).unwrap());
    for i in 0..n {
        writeln!(f, "{i},{},-51,\"[{body}]\"", 1_000 + 10_000 * i as i64).unwrap();
    }
    drop(f);
    let log = parse_csi_log(&path, &default_lltf_indices()).unwrap();
    assert_eq!(log.packets.len(), n);
    assert!(log.skipped.is_empty());
    assert_eq!(log.non_monotone, 0);
    assert!(log.packets.iter().all(|p| p.csi.len() == N_SUBCARRIERS));
}

#[test]
fn written_logs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("csi.log");
    let packets: Vec<CsiPacket> = (0..50)
        .map(|i| CsiPacket {
            timestamp_us: i * 100,
            csi: (0..N_SUBCARRIERS).map(|k| Complex64::new(k as f64 - 3.5, i as f64 * 0.25)).collect(),
            seq_no: Some(i as u64),
            rssi: if i % 2 == 0 { Some(-60) } else { None },
        })
        .collect();
    write_csi_log(std::fs::File::create(&path).unwrap(), &packets).unwrap();
    let identity: Vec<usize> = (0..N_SUBCARRIERS).collect();
    assert_eq!(parse_csi_log(&path, &identity).unwrap().packets, packets);
}

#[test]
fn full_length_manifest_loads_every_frame() {
    let dir = tempfile::tempdir().unwrap();
    let n = 18_261;
    let mut m = String::from("filename,timestamp_us\n");
    for i in 0..n {
        let name = format!("f{i}.png");
        std::fs::File::create(dir.path().join(&name)).unwrap();
        m.push_str(&format!("{name},{}\n", 33_333 * i));
    }
    let path = dir.path().join("manifest.csv");
    std::fs::write(&path, m).unwrap();
    let frames = load_frames(&path).unwrap();
    assert_eq!(frames.len(), n);
}

#[test]
fn manifest_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert!(load_frames(&empty).unwrap().is_empty());

    for name in ["a.png", "b.png", "c.png"] {
        std::fs::File::create(dir.path().join(name)).unwrap();
    }
    let shuffled = dir.path().join("shuffled.csv");
    std::fs::write(&shuffled, "b.png,200\nc.png,300\na.png,100\n").unwrap();
    let ts: Vec<i64> = load_frames(&shuffled).unwrap().iter().map(|f| f.timestamp_us).collect();
    assert_eq!(ts, vec![100, 200, 300]);

    let missing = dir.path().join("missing.csv");
    std::fs::write(&missing, "nope.png,1\n").unwrap();
    assert!(load_frames(&missing).is_err());
}
