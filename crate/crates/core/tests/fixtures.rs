//! The datasets under `fixtures/` are exactly what the generators produce.
//! Set `DPSYNTH_WRITE_FIXTURES=1` to rewrite them.

use std::path::PathBuf;

use dpsynth::dataio::{load_dataset, save_dataset, split_dataset, three_gaussians, toy_digits, toy_public, Dataset, FIXTURE_SPLIT};

fn bundled() -> Vec<(&'static str, Dataset)> {
    vec![
        ("toy_digits", split_dataset(&toy_digits(2000, 0), FIXTURE_SPLIT, 0, true).unwrap()),
        ("three_gaussians", split_dataset(&three_gaussians(600, 0), FIXTURE_SPLIT, 0, true).unwrap()),
        ("toy_public", toy_public(2000, 0)),
    ]
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

#[test]
fn bundled_fixtures_match_generators() {
    let write = std::env::var("DPSYNTH_WRITE_FIXTURES").is_ok_and(|v| v == "1");
    for (name, ds) in bundled() {
        let dir = root().join(name);
        if write {
            save_dataset(&ds, &dir).unwrap();
        }
        let loaded = load_dataset(&dir).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(loaded, ds, "{name} differs from its generator");
    }
}

#[test]
fn bundled_digits_shape() {
    let ds = load_dataset(root().join("toy_digits")).unwrap();
    assert_eq!((ds.len(), ds.dims(), ds.num_classes()), (2000, [8, 8, 1], 10));
    assert_eq!(ds.split().n_train() + ds.split().n_val() + ds.split().n_test(), 2000);
}
