use cmtr_harness::table::{read_results, CellResult, Outcome, ResultTable, Scores};

fn table() -> ResultTable {
    let s = |r1: f64, map: f64| Outcome::Ok(Scores { rank1: r1, rank10: 0.75, rank20: 1.0, map, minp: map / 2.0 });
    let cell = |value: &str, seed, outcome| CellResult { value: value.into(), seed, seq_len: 21, outcome };
    ResultTable {
        axis: "lambda".into(),
        cells: vec![
            cell("0", 1, s(0.25, 0.5)),
            cell("0", 2, s(0.5, 0.25)),
            cell("4", 1, s(0.375, 0.5)),
            cell("4", 2, Outcome::Failed("loss became non-finite".into())),
        ],
    }
}

#[test]
fn results_csv_matches_golden_file() {
    let mut buf = Vec::new();
    table().write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), include_str!("golden/results.csv"));
}

#[test]
fn golden_file_reads_back() {
    let rows = read_results(include_str!("golden/results.csv").as_bytes()).unwrap();
    assert_eq!(rows, table().rows());
    assert_eq!(rows.iter().filter(|r| r.is_mean()).count(), 2);
    assert!(rows.iter().any(|r| r.status.starts_with("failed")));
}
