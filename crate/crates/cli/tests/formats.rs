use std::fs;

use hound::{SampleFormat, WavSpec, WavWriter};
use mfcl::manifest::{self, ClipRecord};
use mfcl::wav::{self, Encoding};
use mfcl_core::synth::{LabelVector, Waveform};
use proptest::prelude::*;
use tempfile::tempdir;

fn record(path: &str, bits: &str, dur: f64) -> ClipRecord {
    ClipRecord {
        path: path.into(),
        labels: LabelVector::parse(bits).unwrap(),
        duration_s: dur,
    }
}

#[test]
fn float32_round_trip_is_exact() {
    let d = tempdir().unwrap();
    let p = d.path().join("a.wav");
    let x: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.013).sin() * 0.9).collect();
    wav::write_samples(&p, &x, 16_000, Encoding::Float32).unwrap();
    let w = wav::read_wav(&p).unwrap();
    assert_eq!(w.samples(), &x[..]);
    assert_eq!(w.sample_rate(), 16_000);
    assert!((wav::header_duration(&p).unwrap() - 1000.0 / 16_000.0).abs() < 1e-12);
}

#[test]
fn pcm16_extremes() {
    let d = tempdir().unwrap();
    let p = d.path().join("a.wav");
    wav::write_samples(&p, &[-1.0, 1.0, 0.0], 8000, Encoding::Pcm16).unwrap();
    let w = wav::read_wav(&p).unwrap();
    assert_eq!(w.samples(), &[-1.0, 32767.0 / 32768.0, 0.0]);
}

#[test]
fn rejects_stereo_and_other_codecs() {
    let d = tempdir().unwrap();
    let stereo = d.path().join("s.wav");
    let spec = WavSpec {
        channels: 2,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(&stereo, spec).unwrap();
    for _ in 0..8 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let e = wav::read_wav(&stereo).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("mono"), "{e}");

    let pcm24 = d.path().join("p.wav");
    let spec = WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 24,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(&pcm24, spec).unwrap();
    w.write_sample(5i32).unwrap();
    w.finalize().unwrap();
    let e = wav::read_wav(&pcm24).unwrap_err();
    assert!(e.to_string().contains("unsupported codec"), "{e}");

    let garbage = d.path().join("g.wav");
    fs::write(&garbage, b"not a wav file at all").unwrap();
    assert_eq!(wav::read_wav(&garbage).unwrap_err().exit_code(), 3);
}

#[test]
fn refuses_empty_or_clipped_writes() {
    let d = tempdir().unwrap();
    let p = d.path().join("a.wav");
    assert!(wav::write_samples(&p, &[], 16_000, Encoding::Pcm16).is_err());
    let e = wav::write_samples(&p, &[0.5, 1.5], 16_000, Encoding::Float32).unwrap_err();
    assert!(e.to_string().contains("sample 1"), "{e}");
    assert!(wav::write_samples(&p, &[f32::NAN], 16_000, Encoding::Float32).is_err());
}

#[test]
fn manifest_text_round_trip() {
    let recs = vec![
        record("pool/a.wav", "10000001", 10.0),
        record("b c/d.wav", "00000000", 2.5),
    ];
    let text = manifest::format_manifest(&recs);
    assert!(text.starts_with("path,labels,duration_s\n"));
    assert_eq!(manifest::parse_manifest(&text).unwrap(), recs);
}

#[test]
fn manifest_errors_name_the_line() {
    let text = "path,labels,duration_s\na.wav,0100,1\nb.wav,01x0,1\n";
    let e = manifest::parse_manifest(text).unwrap_err();
    assert!(e.to_string().contains("line 3"), "{e}");
    assert!(manifest::parse_manifest("wrong,header\n").is_err());
    assert!(manifest::parse_manifest("path,labels,duration_s\na.wav,01,-1\n").is_err());
    assert!(manifest::parse_manifest("path,labels,duration_s\na.wav\n").is_err());
    let d = tempdir().unwrap();
    let e = manifest::write_manifest(&d.path().join("m.csv"), &[record("a,b.wav", "1", 1.0)]).unwrap_err();
    assert!(e.to_string().contains("separator"), "{e}");
}

#[test]
fn load_resolves_paths_and_checks_durations() {
    let d = tempdir().unwrap();
    fs::create_dir(d.path().join("clips")).unwrap();
    let w = Waveform::new(vec![0.1; 1600], 16_000).unwrap();
    wav::write_wav(&d.path().join("clips/x.wav"), &w, Encoding::Pcm16).unwrap();
    let m = d.path().join("m.csv");
    manifest::write_manifest(&m, &[record("clips/x.wav", "0010", 0.1)]).unwrap();
    let ds = manifest::load(&m).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.waves[0].len(), 1600);
    assert!(ds.labels[0].get(2));

    manifest::write_manifest(&m, &[record("clips/x.wav", "0010", 0.2)]).unwrap();
    let e = manifest::load(&m).unwrap_err();
    assert!(e.to_string().contains("manifest says"), "{e}");
    manifest::write_manifest(&m, &[record("clips/missing.wav", "0010", 0.1)]).unwrap();
    assert_eq!(manifest::load(&m).unwrap_err().exit_code(), 3);
}

#[test]
fn split_sizes_and_determinism() {
    let recs: Vec<ClipRecord> = (0..200).map(|i| record(&format!("{i}.wav"), "01", 1.0)).collect();
    let (t, v) = manifest::split(&recs, 0.05, 7);
    assert_eq!((t.len(), v.len()), (190, 10));
    assert_eq!(manifest::split(&recs, 0.05, 7), (t.clone(), v.clone()));
    assert_ne!(manifest::split(&recs, 0.05, 8).1, v);
    assert!(v.iter().all(|r| !t.contains(r)));
    assert_eq!(manifest::split(&recs, 0.0, 1).1.len(), 0);
}

proptest! {
    #[test]
    fn pcm16_quantization_error_is_bounded(x in prop::collection::vec(-1.0f32..=1.0, 1..300)) {
        let d = tempdir().unwrap();
        let p = d.path().join("a.wav");
        wav::write_samples(&p, &x, 16_000, Encoding::Pcm16).unwrap();
        let w = wav::read_wav(&p).unwrap();
        prop_assert_eq!(w.len(), x.len());
        for (a, b) in w.samples().iter().zip(&x) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0 + 1e-7);
        }
    }

    #[test]
    fn split_partitions_records(n in 0usize..120, frac in 0.0f64..0.9, seed in any::<u64>()) {
        let recs: Vec<ClipRecord> = (0..n).map(|i| record(&format!("{i}.wav"), "1", 1.0)).collect();
        let (t, v) = manifest::split(&recs, frac, seed);
        prop_assert_eq!(v.len(), manifest::val_count(n, frac));
        prop_assert_eq!(t.len() + v.len(), n);
        let mut all: Vec<String> = t.iter().chain(&v).map(|r| r.path.display().to_string()).collect();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
    }
}
