use chunkflow_core::audio::{load_track, save_track, synth_features, AudioMask, AudioTrack, MaskPattern};
use chunkflow_core::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn talking_and_listening_partition_features(seed in any::<u64>(), frames in 1usize..40, period in 1usize..6) {
        let t = synth_features(seed, frames, 5, &MaskPattern::Alternating { period }).unwrap();
        let (talk, listen) = t.apply_mask();
        for f in 0..frames {
            let on = t.mask().is_talking(f);
            for j in 0..5 {
                let (a, b, x) = (talk.at2(f, j), listen.at2(f, j), t.features().at2(f, j));
                prop_assert_eq!(a + b, x);
                // exactly one stream carries each frame
                prop_assert_eq!(if on { b } else { a }, 0.0);
            }
        }
    }

    #[test]
    fn track_bytes_round_trip(seed in any::<u64>(), frames in 1usize..30, mask in proptest::collection::vec(0u8..2, 30)) {
        let features = Tensor::from_fn(&[frames, 3], |i| (seed as f64).sin() * i as f64);
        let t = AudioTrack::new(features, AudioMask::new(mask[..frames].to_vec()).unwrap()).unwrap();
        // features are stored as f32: one trip quantises, later trips are exact
        let once = AudioTrack::from_bytes(&t.to_bytes()).unwrap();
        let f32_values: Vec<f64> = t.features().data().iter().map(|&v| f64::from(v as f32)).collect();
        prop_assert_eq!(once.features().data(), &f32_values[..]);
        prop_assert_eq!(once.mask(), t.mask());
        prop_assert_eq!(AudioTrack::from_bytes(&once.to_bytes()).unwrap(), once);
    }

    #[test]
    fn slices_keep_rows_and_mask(seed in any::<u64>(), start in 0usize..20, len in 1usize..10) {
        let t = synth_features(seed, 30, 4, &MaskPattern::Alternating { period: 3 }).unwrap();
        let s = t.slice(start, len).unwrap();
        for f in 0..len {
            prop_assert_eq!(s.features().row(f), t.features().row(start + f));
            prop_assert_eq!(s.mask().is_talking(f), t.mask().is_talking(start + f));
        }
    }
}

#[test]
fn bad_tracks_are_rejected() {
    assert!(AudioMask::new(vec![0, 2]).is_err());
    assert!(AudioTrack::new(Tensor::zeros(&[3, 2]), AudioMask::new(vec![1, 0]).unwrap()).is_err());
    assert!(AudioTrack::from_bytes(b"junk").is_err());
    let t = synth_features(1, 4, 2, &MaskPattern::Talking).unwrap();
    assert!(t.slice(3, 2).is_none());
    assert!(MaskPattern::Explicit(vec![1, 0]).materialize(3).is_err());
}

#[test]
fn track_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.track");
    let t = synth_features(9, 12, 8, &MaskPattern::Listening).unwrap();
    save_track(&t, &path).unwrap();
    let back = load_track(&path).unwrap();
    assert_eq!(back.mask(), t.mask());
    assert!(back.features().max_abs_diff(t.features()) < 1e-6);
}
