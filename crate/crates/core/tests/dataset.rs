use std::fs;

use crowdslam::dataset::{
    extract_samples, generate_dataset, read_episode, write_episode, DatasetManifest, Split, MANIFEST_FILE,
};
use crowdslam::simulator::{run_episode, SimConfig};
use proptest::prelude::*;

fn short_config(len: usize) -> SimConfig {
    SimConfig {
        episode_length: len,
        ped_count_min: 2,
        ped_count_max: 5,
        ..SimConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn episode_file_round_trip_is_exact(seed in any::<u64>(), len in 5usize..40) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.jsonl");
        let ep = run_episode(&short_config(len), seed);
        write_episode(&ep, &path).unwrap();
        let back = read_episode(&path).unwrap();
        prop_assert_eq!(&back, &ep);
        // Bit-exact floats, not just equal within tolerance.
        for (a, b) in ep.steps.iter().zip(&back.steps) {
            prop_assert_eq!(a.robot.x().to_bits(), b.robot.x().to_bits());
            for (o, p) in a.observations.iter().zip(&b.observations) {
                prop_assert_eq!(o.z.bearing.to_bits(), p.z.bearing.to_bits());
            }
        }
    }

    #[test]
    fn sample_count_formula(seed in any::<u64>(), len in 12usize..40, h in 2usize..8) {
        let ep = run_episode(&short_config(len), seed);
        let peds = ep.ped_ids().len();
        prop_assert_eq!(extract_samples(&ep, h).len(), peds * (len - h - 1));
    }
}

#[test]
fn generated_dataset_is_reproducible_and_split() {
    let cfg = short_config(15);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_dataset(&cfg, 3, 2, 77, a.path()).unwrap();
    let mb = generate_dataset(&cfg, 3, 2, 77, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(DatasetManifest::load(&a.path().join(MANIFEST_FILE)).unwrap(), ma);
    assert_eq!(ma.entries(Split::Train).count(), 3);
    assert_eq!(ma.entries(Split::Test).count(), 2);
    let mut seeds: Vec<u64> = ma.episodes.iter().map(|e| e.seed).collect();
    seeds.dedup();
    assert_eq!(seeds.len(), 5);
    for e in &ma.episodes {
        let x = fs::read(a.path().join(&e.path)).unwrap();
        let y = fs::read(b.path().join(&e.path)).unwrap();
        assert_eq!(x, y, "{}", e.path);
        assert_eq!(read_episode(&a.path().join(&e.path)).unwrap().seed, e.seed);
    }
    assert!(generate_dataset(&cfg, 0, 2, 1, a.path()).is_err());
}

#[test]
fn different_seeds_give_different_crowds() {
    let cfg = short_config(10);
    assert_ne!(run_episode(&cfg, 1), run_episode(&cfg, 2));
}
