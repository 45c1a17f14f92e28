use tdg::data::{generate_benchmark, leave_one_domain_out, separability_probe, BenchmarkSpec};
use tdg::rng::RngStream;

#[test]
fn default_benchmark_is_neither_trivial_nor_impossible() {
    let ds = generate_benchmark(&BenchmarkSpec::default()).unwrap();
    let floor = 1.0 / ds.num_classes() as f64 + 0.1;
    for t in 0..ds.num_domains() {
        let p = separability_probe(&ds, &leave_one_domain_out(&ds, t).unwrap().0).unwrap();
        assert!(p > floor && p < 0.95, "target {t}: probe {p}");
    }
}

#[test]
fn permuted_labels_probe_at_chance() {
    let mut ds = generate_benchmark(&BenchmarkSpec::default()).unwrap();
    let mut labels: Vec<usize> = ds.samples.iter().map(|s| s.label).collect();
    RngStream::new(0, "test/permute").shuffle(&mut labels);
    for (s, y) in ds.samples.iter_mut().zip(labels) {
        s.label = y;
    }
    let chance = 1.0 / ds.num_classes() as f64;
    for t in 0..ds.num_domains() {
        let n = ds.domain_indices(t).len() as f64;
        let sigma = (chance * (1.0 - chance) / n).sqrt();
        let p = separability_probe(&ds, &leave_one_domain_out(&ds, t).unwrap().0).unwrap();
        assert!((p - chance).abs() <= 3.0 * sigma, "target {t}: probe {p}");
    }
}

#[test]
fn text_format_survives_a_file_round_trip() {
    let ds = generate_benchmark(&BenchmarkSpec { samples_per_cell: 5, ..BenchmarkSpec::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.txt");
    ds.write_text(std::fs::File::create(&path).unwrap()).unwrap();
    let back = tdg::data::MultiDomainDataset::read_text(std::io::BufReader::new(
        std::fs::File::open(&path).unwrap(),
    ))
    .unwrap();
    assert_eq!(back, ds);
}
