use std::fs;

use proptest::prelude::*;
use sha2::{Digest, Sha256};

use mlm_adapt::corpus::{corpus_stats, ingest, SentenceRecord, ShardManifest, MANIFEST_FILE};
use mlm_adapt::split::{split, split_position, Split, SplitRatios, SplitRule, SplitUnit};

fn records(n: usize) -> Vec<SentenceRecord> {
    (0..n)
        .map(|i| SentenceRecord::new(format!("protocol{:04}/{i:06}", i / 50), format!("word{} word{}", i % 7, i % 13), "plenary"))
        .collect()
}

/// The split hash written out from its definition: FNV-1a over the
/// little-endian seed followed by the id bytes, the SplitMix64 finalizer
/// (mixing rounds only, no increment),
/// then the top 53 bits as a fraction.
fn oracle_position(seed: u64, id: &str) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

#[test]
fn thousand_records_reingest_to_identical_digests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = ingest(records(1000), a.path(), 128).unwrap();
    let mb = ingest(records(1000), b.path(), 128).unwrap();
    assert_eq!(ma.shard_count(), 8);
    for (i, (ea, eb)) in ma.shards.iter().zip(&mb.shards).enumerate() {
        assert_eq!(ea.sha256, eb.sha256);
        // independent re-read and hash of the shard file
        let bytes = fs::read(ma.shard_path(i)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), ea.sha256);
    }
    ma.verify().unwrap();
}

#[test]
fn stats_byte_total_matches_file_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let m = ingest(records(1000), dir.path(), 300).unwrap();
    let stats = corpus_stats(&m).unwrap();
    let on_disk: u64 = (0..m.shard_count()).map(|i| fs::metadata(m.shard_path(i)).unwrap().len()).sum();
    assert_eq!(stats.bytes, on_disk);
    assert_eq!((stats.records, stats.shards), (1000, 4));

    let small = tempfile::tempdir().unwrap();
    let m = ingest(records(10), small.path(), 4).unwrap();
    let s = corpus_stats(&m).unwrap();
    assert_eq!((s.records, s.shards), (10, 3));
}

#[test]
fn manifest_reload_matches() {
    let dir = tempfile::tempdir().unwrap();
    let m = ingest(records(25), dir.path(), 10).unwrap();
    let back = ShardManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(back.shards, m.shards);
    assert_eq!(back.read_all().unwrap(), records(25));
}

#[test]
fn test_split_size_at_scale() {
    let dir = tempfile::tempdir().unwrap();
    let m = ingest(records(32_000), dir.path(), 4000).unwrap();
    let a = split(&m, SplitRatios::new(0.8, 0.1, 0.1).unwrap(), 42).unwrap();
    let test = a.counts()[Split::Test as usize];
    assert!((3040..=3360).contains(&test), "test count {test}");
    for s in Split::ALL {
        let want = SplitRatios::default().get(s);
        assert!((a.fraction(s) - want).abs() < 0.005, "{s}: {}", a.fraction(s));
    }
}

#[test]
fn fixed_ids_follow_the_documented_hash() {
    let ids = [
        "protocol0001/000001",
        "protocol0001/000002",
        "committee-finance/17",
        "plenary/2019-03-11/0042",
        "a",
        "",
        "שלום",
        "x/y/z",
        "0000000000",
        "record-with-a-much-longer-identifier-than-usual-0001",
    ];
    let ratios = SplitRatios::default();
    let rule = SplitRule::new(ratios, 42, SplitUnit::Sentence).unwrap();
    for id in ids {
        let u = oracle_position(42, id);
        assert_eq!(split_position(42, id), u, "{id}");
        let want = if u < 0.8 {
            Split::Train
        } else if u < 0.9 {
            Split::Val
        } else {
            Split::Test
        };
        assert_eq!(rule.assign(id), want, "{id}");
    }
}

proptest! {
    #[test]
    fn assignment_is_a_pure_function_of_id_and_seed(ids in prop::collection::vec("[a-z0-9/]{1,24}", 1..40), seed: u64, drop_mask: u64) {
        let rule = SplitRule::new(SplitRatios::default(), seed, SplitUnit::Sentence).unwrap();
        let full: Vec<Split> = ids.iter().map(|i| rule.assign(i)).collect();
        // removing records never changes the rest
        for (k, id) in ids.iter().enumerate() {
            if drop_mask >> (k % 64) & 1 == 0 {
                prop_assert_eq!(rule.assign(id), full[k]);
            }
        }
        let again = SplitRule::new(SplitRatios::default(), seed, SplitUnit::Sentence).unwrap();
        prop_assert_eq!(ids.iter().map(|i| again.assign(i)).collect::<Vec<_>>(), full);
    }

    #[test]
    fn shard_round_trip(texts in prop::collection::vec("[a-z ]{1,30}", 0..60), shard_size in 1usize..20) {
        let recs: Vec<SentenceRecord> = texts
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.trim().is_empty())
            .map(|(i, t)| SentenceRecord::new(format!("r{i}"), t.clone(), ""))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let m = ingest(recs.clone(), dir.path(), shard_size).unwrap();
        prop_assert_eq!(m.read_all().unwrap(), recs.clone());
        prop_assert_eq!(m.total_records as usize, recs.len());
    }
}
