mod common;

use std::fs;
use std::time::Instant;

use proptest::prelude::*;

use mlm_adapt::eval::{read_position_log, replay, write_position_log, EvalReport, TopK};
use mlm_adapt::report::{render_report, Side};

#[test]
fn recorded_logs_render_the_expected_table() {
    let start = Instant::now();
    let table = common::recorded_table().unwrap();
    assert_eq!(table.rows.len(), 4);
    for ((metric, a, b), row) in common::RECORDED_CELLS.iter().zip(&table.rows) {
        assert_eq!(row.metric, *metric);
        assert_eq!((row.a_text.as_str(), row.b_text.as_str()), (*a, *b), "{metric}");
        assert_eq!(row.winner, Some(Side::A), "{metric}");
    }
    let text = table.to_string();
    assert!(text.contains("| Perplexity | **6.60** | 22.87 |"), "{text}");
    assert!(start.elapsed().as_secs() < 10);
}

/// Plain re-parse of the log text, independent of the library reader.
fn parse_sums(name: &str) -> (u64, f64, [u64; 3]) {
    let text = fs::read_to_string(common::fixture(name)).unwrap();
    let (mut n, mut nll, mut hits) = (0u64, 0.0f64, [0u64; 3]);
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("shard")) {
        let f: Vec<&str> = line.split('\t').collect();
        n += 1;
        nll += f[4].parse::<f64>().unwrap();
        let rank: u64 = f[5].parse().unwrap();
        for (h, k) in hits.iter_mut().zip([1, 2, 5]) {
            *h += u64::from(rank <= k);
        }
    }
    (n, nll, hits)
}

#[test]
fn replay_sums_match_a_plain_reparse() {
    for name in ["recorded_a.positions.tsv", "recorded_b.positions.tsv"] {
        let acc = replay(&common::fixture(name)).unwrap();
        let (n, nll, hits) = parse_sums(name);
        assert_eq!(acc.labeled_positions, n);
        assert_eq!(acc.hits, hits);
        assert_eq!(acc.total_nll, nll);
        assert_eq!(acc.ks, vec![1, 2, 5]);
    }
}

#[test]
fn rewriting_a_log_reproduces_its_bytes() {
    let path = common::fixture("recorded_b.positions.tsv");
    let log = read_position_log(&path).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.tsv");
    write_position_log(&out, &log.digest, &log.ks, &log.records).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&path).unwrap());
}

#[test]
fn corrupted_log_is_refused() {
    let text = fs::read_to_string(common::fixture("recorded_a.positions.tsv")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.tsv");
    fs::write(&path, text.replacen("\t6\n", "\tsix\n", 1)).unwrap();
    assert!(replay(&path).is_err());
    fs::write(&path, text.lines().skip(1).collect::<Vec<_>>().join("\n")).unwrap();
    assert!(replay(&path).is_err());
}

fn report(ppl: f64, hits: [u64; 3], n: u64, digest: &str) -> EvalReport {
    EvalReport {
        perplexity: ppl,
        mean_nll: ppl.ln(),
        labeled_positions: n,
        total_nll: n as f64 * ppl.ln(),
        top_k: [1, 2, 5]
            .iter()
            .zip(hits)
            .map(|(&k, h)| TopK { k, hits: h, accuracy: h as f64 / n as f64 })
            .collect(),
        config_digest: digest.into(),
    }
}

#[test]
fn mismatched_digests_are_not_rendered() {
    let a = report(5.0, [1, 2, 3], 10, "x");
    let b = report(6.0, [1, 2, 3], 10, "y");
    assert!(render_report(&a, &b, ("a", "b"), None).is_err());
}

fn sorted3() -> impl Strategy<Value = [u64; 3]> {
    prop::array::uniform3(0u64..=1000).prop_map(|mut h| {
        h.sort();
        h
    })
}

proptest! {
    #[test]
    fn marks_follow_the_better_value(pa in 1.0f64..100.0, pb in 1.0f64..100.0, ha in sorted3(), hb in sorted3(), tie: bool) {
        let pb = if tie { pa } else { pb };
        let a = report(pa, ha, 1000, "d");
        let b = report(pb, hb, 1000, "d");
        let t = render_report(&a, &b, ("a", "b"), Some("cap")).unwrap();
        let expect = |x: f64, y: f64, lower: bool| {
            if x == y { None } else if (x < y) == lower { Some(Side::A) } else { Some(Side::B) }
        };
        prop_assert_eq!(t.rows[0].winner, expect(pa, pb, true));
        for j in 0..3 {
            prop_assert_eq!(t.rows[j + 1].winner, expect(ha[j] as f64, hb[j] as f64, false));
        }
        prop_assert_eq!(t.caption.as_str(), "cap");
    }
}
