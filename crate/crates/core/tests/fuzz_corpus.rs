//! Every checked-in fuzz seed runs through its entry point without panicking.

use std::path::PathBuf;

use dpsynth::fuzz_entry::TARGETS;

#[test]
fn corpus_seeds_do_not_panic() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    for (name, entry) in TARGETS {
        let dir = root.join(name);
        let mut seeds = 0;
        for file in std::fs::read_dir(&dir).unwrap_or_else(|e| panic!("{dir:?}: {e}")) {
            let bytes = std::fs::read(file.unwrap().path()).unwrap();
            entry(&bytes);
            for cut in [0, 1, bytes.len() / 2] {
                entry(&bytes[..cut.min(bytes.len())]);
            }
            seeds += 1;
        }
        assert!(seeds > 0, "no seeds for {name}");
    }
}

#[test]
fn hostile_headers_are_rejected() {
    // rank-4 image tensor with N = 0 and enormous other dims
    let mut t = b"DPSL0001".to_vec();
    t.extend([1u8, 4]);
    for d in [0u64, 1 << 40, 1 << 40, 1 << 20] {
        t.extend(d.to_le_bytes());
    }
    let mut labels = b"DPSL0001".to_vec();
    labels.extend([1u8, 1]);
    labels.extend(0u64.to_le_bytes());
    let manifest = br#"{"train_idx":[],"val_idx":[],"test_idx":[],"K":1}"#;
    let mut input = (t.len() as u32).to_le_bytes().to_vec();
    input.extend(&t);
    input.extend((labels.len() as u32).to_le_bytes());
    input.extend(&labels);
    input.extend(manifest);
    dpsynth::fuzz_entry::dataset(&input);

    let sidecar = br#"{"spec":{"layer_sizes":[18446744073709551615,3],"activation":"relu","output_head":"linear"},"step":0,"rng_state":0,"meta":{}}"#;
    let mut input = (sidecar.len() as u32).to_le_bytes().to_vec();
    input.extend(sidecar);
    input.extend(b"DPSL0001\x00\x01\x00\x00\x00\x00\x00\x00\x00\x00");
    dpsynth::fuzz_entry::checkpoint(&input);
}
