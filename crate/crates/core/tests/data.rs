use std::collections::BTreeSet;
use std::path::Path;

use avparse::data::annotations::{
    format_full, format_weak, parse_full_str, parse_predictions_str, parse_weak_str, Vocabulary,
};
use avparse::data::container::{decode, encode, read_container, write_container, Dtype};
use avparse::data::synth::{gen_video, Prototypes};
use avparse::data::{gen_synthetic, Dataset, SyntheticSpec};
use avparse::metrics::Modality;
use avparse::tensorgrad::{rng, Tensor};
use avparse::Error;
use proptest::prelude::*;

fn vocab() -> Vocabulary {
    Vocabulary::new(["Speech", "Dog", "Car"]).unwrap()
}

#[test]
fn container_roundtrip_is_bit_exact() {
    let mut r = rng::seeded(1);
    let big = Tensor::randn(&[10, 512], 1.0, &mut r);
    let odd = Tensor::new(vec![3], vec![f64::MIN_POSITIVE, -0.0, 1e300]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.avft");
    write_container(&path, [("big", &big), ("odd", &odd)], Dtype::F64).unwrap();
    let back = read_container(&path).unwrap();
    assert_eq!(back.dtype, Dtype::F64);
    let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(back.get("big", &path).unwrap()), bits(&big));
    assert_eq!(bits(back.get("odd", &path).unwrap()), bits(&odd));
    assert_eq!(back.entries.keys().collect::<Vec<_>>(), ["big", "odd"]);

    let narrow = big.map(|x| x as f32 as f64);
    write_container(&path, [("big", &narrow)], Dtype::F32).unwrap();
    let back = read_container(&path).unwrap();
    assert_eq!(bits(back.get("big", &path).unwrap()), bits(&narrow));
}

#[test]
fn empty_container_is_valid() {
    let bytes = encode(std::iter::empty(), Dtype::F32).unwrap();
    assert_eq!(bytes.len(), 14);
    assert!(decode(&bytes, Path::new("e")).unwrap().entries.is_empty());
}

#[test]
fn duplicate_names_rejected_on_write() {
    let t = Tensor::ones(&[2]);
    assert!(encode([("a", &t), ("a", &t)], Dtype::F64).is_err());
}

#[test]
fn corrupted_header_bytes_are_rejected() {
    let t = Tensor::from_fn(&[10, 512], |i| i as f64 * 0.5);
    let bytes = encode([("feat", &t)], Dtype::F32).unwrap();
    // File header, name length, ndim and both dims.
    let structural: Vec<usize> = (0..18).chain(22..42).collect();
    for pos in structural {
        for flip in [0x01u8, 0x80, 0xff] {
            let mut bad = bytes.clone();
            bad[pos] ^= flip;
            match decode(&bad, Path::new("bad")) {
                Err(Error::Format { .. }) => {}
                other => panic!("byte {pos} ^ {flip:#x} was accepted: {:?}", other.map(|c| c.entries.len())),
            }
        }
    }
    assert!(decode(&bytes[..bytes.len() - 1], Path::new("short")).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode(&long, Path::new("long")).is_err());
}

#[test]
fn weak_annotation_rows() {
    let p = Path::new("weak.tsv");
    let rows = parse_weak_str("video_id\tevents\nv1\tSpeech,Dog\nv2\t\n", &vocab(), p).unwrap();
    assert_eq!(rows[0].events, BTreeSet::from([0, 1]));
    assert!(rows[1].events.is_empty());
    let text = format_weak(&rows, &vocab());
    assert_eq!(parse_weak_str(&text, &vocab(), p).unwrap(), rows);
    match parse_weak_str("video_id\tevents\nv1\tSpeech\nv2\tCat\n", &vocab(), p) {
        Err(Error::Annotation { line, .. }) => assert_eq!(line, 3),
        other => panic!("unknown category accepted: {other:?}"),
    }
    assert!(parse_weak_str("id\tevents\n", &vocab(), p).is_err());
}

#[test]
fn full_annotation_rows() {
    let p = Path::new("full.tsv");
    let header = "video_id\tcategory\tmodality\tstart\tend\n";
    let rows = parse_full_str(&format!("{header}v1\tSpeech\ta\t2\t4\n"), &vocab(), 10, p).unwrap();
    assert_eq!((rows[0].category, rows[0].modality, rows[0].start, rows[0].end), (0, Modality::Audio, 2, 4));
    assert_eq!(parse_full_str(&format_full(&rows, &vocab()), &vocab(), 10, p).unwrap(), rows);
    for bad in ["v1\tSpeech\ta\t4\t2", "v1\tSpeech\ta\t2\t10", "v1\tSpeech\tav\t2\t4", "v1\tSpeech\ta\t2"] {
        match parse_full_str(&format!("{header}{bad}\n"), &vocab(), 10, p) {
            Err(Error::Annotation { line, .. }) => assert_eq!(line, 2, "{bad}"),
            other => panic!("{bad:?} accepted: {other:?}"),
        }
    }
}

#[test]
fn prediction_rows_accept_audio_visual() {
    let p = Path::new("pred.tsv");
    let rows = parse_predictions_str("video_id\tmodality\tcategory\tstart\tend\nv1\tav\tCar\t0\t9\n", &vocab(), 10, p).unwrap();
    assert_eq!(rows[0].modality, Modality::AudioVisual);
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = SyntheticSpec {
        num_videos: 20,
        ..Default::default()
    };
    assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
    let other = SyntheticSpec { seed: 2, ..spec.clone() };
    assert_ne!(gen_synthetic(&spec).unwrap()[0].audio, gen_synthetic(&other).unwrap()[0].audio);
}

#[test]
fn weak_labels_are_union_of_full_annotations_and_av_is_conjunction() {
    let spec = SyntheticSpec::default();
    for v in gen_synthetic(&spec).unwrap() {
        let union: BTreeSet<usize> = v.full.iter().map(|a| a.category).collect();
        assert_eq!(v.weak.events, union);
        assert!(v.full.iter().all(|a| a.start <= a.end && a.end < spec.snippets));
        let truth = v.truth(spec.num_categories);
        for t in 0..spec.snippets {
            for c in 0..spec.num_categories {
                assert_eq!(truth.audio_visual[t][c], truth.audio[t][c] && truth.visual[t][c]);
            }
        }
    }
}

#[test]
fn noiseless_full_span_event_equals_its_prototype() {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        min_events: 1,
        max_events: 1,
        audio_only_prob: 1.0,
        visual_only_prob: 0.0,
        num_videos: 200,
        ..Default::default()
    };
    let protos = Prototypes::generate(&spec);
    let v = (0..spec.num_videos)
        .map(|i| gen_video(&spec, &protos, i))
        .find(|v| v.full[0].start == 0 && v.full[0].end == spec.snippets - 1)
        .expect("some video spans every snippet");
    let c = v.full[0].category;
    for t in 0..spec.snippets {
        assert_eq!(v.audio.row(t), protos.audio.row(c));
        assert!(v.visual.row(t).iter().all(|&x| x == 0.0));
    }
}

#[test]
fn linear_probe_separates_noiseless_features() {
    let spec = SyntheticSpec {
        noise_sigma: 0.0,
        ..Default::default()
    };
    let protos = Prototypes::generate(&spec);
    let mut correct = 0;
    let mut total = 0;
    for v in gen_synthetic(&spec).unwrap() {
        let truth = v.truth(spec.num_categories);
        for (feats, grid, p) in [(&v.audio, &truth.audio, &protos.audio), (&v.visual, &truth.visual, &protos.visual)] {
            for t in 0..spec.snippets {
                for c in 0..spec.num_categories {
                    let score: f64 = feats.row(t).iter().zip(p.row(c)).map(|(x, w)| x * w).sum();
                    total += 1;
                    if (score > 0.5) == grid[t][c] {
                        correct += 1;
                    }
                }
            }
        }
    }
    assert_eq!(correct, total);
}

#[test]
fn batching_covers_every_video_once() {
    let spec = SyntheticSpec {
        num_videos: 130,
        ..Default::default()
    };
    let ds = Dataset::from_synthetic(spec.vocabulary().unwrap(), gen_synthetic(&spec).unwrap()).unwrap();
    let b = ds.batches(64, 1, 0).unwrap();
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 64, 2]);
    assert_eq!(b, ds.batches(64, 1, 0).unwrap());
    assert_ne!(b, ds.batches(64, 1, 1).unwrap());
    let mut seen: Vec<usize> = b.concat();
    seen.sort_unstable();
    assert_eq!(seen, (0..130).collect::<Vec<_>>());
    let batch = ds.batch(&b[2]).unwrap();
    assert_eq!(batch.len(), 2);
}

#[test]
fn dataset_directory_roundtrip() {
    let spec = SyntheticSpec {
        num_videos: 12,
        ..Default::default()
    };
    let ds = Dataset::from_synthetic(spec.vocabulary().unwrap(), gen_synthetic(&spec).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), Dtype::F64).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert!(Dataset::load(&dir.path().join("missing")).is_err());
}

proptest! {
    #[test]
    fn arbitrary_tensors_roundtrip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let t = Tensor::randn(&shape, 3.0, &mut rng::seeded(seed));
        let bytes = encode([("t", &t)], Dtype::F64).unwrap();
        let back = decode(&bytes, Path::new("p")).unwrap();
        prop_assert_eq!(back.get("t", Path::new("p")).unwrap(), &t);
    }

    #[test]
    fn decode_never_panics_on_garbage(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode(&bytes, Path::new("g"));
    }
}
