use pwafit::objective::Dataset;
use pwafit::simulate::{generate, preset, read_csv, read_csv_file, write_csv, write_csv_file, Preset};

#[test]
fn presets_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for p in Preset::ALL {
        let data = generate(&preset(p, 3).unwrap()).unwrap();
        let path = dir.path().join(format!("{p}.csv"));
        write_csv_file(&data, &path).unwrap();
        assert_eq!(read_csv_file(&path).unwrap(), data);
    }
}

#[test]
fn extreme_values_are_bit_exact() {
    let y = vec![1e-300, -0.0, f64::MAX, f64::MIN_POSITIVE, 0.1 + 0.2];
    let data = Dataset::from_flat(1, vec![1.0, -1.0, 0.5, 5e-324, -0.3], y).unwrap();
    let mut buf = Vec::new();
    write_csv(&data, &mut buf).unwrap();
    let back = read_csv(buf.as_slice()).unwrap();
    for (a, b) in data.responses().iter().chain(data.predictors()).zip(back.responses().iter().chain(back.predictors())) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn ragged_rows_are_rejected() {
    let err = read_csv("x1,x2,y\n1,2,3\n1,2\n".as_bytes()).unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
}
