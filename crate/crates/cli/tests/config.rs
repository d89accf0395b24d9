use mfcl::config::{Axis, RunConfig};
use mfcl_core::views::Format;

#[test]
fn empty_file_gives_defaults() {
    let (cfg, warnings) = RunConfig::parse("", true).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.train.steps, 3000);
    assert_eq!(cfg.train.batch, 128);
    assert_eq!(cfg.train.temperature, 0.1);
    assert_eq!(cfg.crop_len_s, 3.0);
    assert_eq!(cfg.synth.n_clips, 2000);
    assert_eq!(cfg.synth.n_eval, 500);
    assert_eq!(cfg.model.formats.branch_a, Format::Waveform);
    assert_eq!(cfg.model.formats.branch_b, Format::LogMel);
}

#[test]
fn effective_text_reparses_to_the_same_config() {
    let (cfg, _) = RunConfig::parse(
        "train.temperature = 0.5 # comment\nviews.formats = logmel+logmel\naugment.freq_shift_max = 0\n",
        true,
    )
    .unwrap();
    let text = cfg.to_text();
    for key in RunConfig::KEYS {
        assert_eq!(text.matches(&format!("\n{key} = ")).count() + text.starts_with(&format!("{key} = ")) as usize, 1, "{key}");
    }
    let (again, _) = RunConfig::parse(&text, true).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.to_text(), text);
}

#[test]
fn negative_temperature_names_the_key() {
    let e = RunConfig::parse("train.temperature = -1", false).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("train.temperature"), "{e}");
}

#[test]
fn unknown_keys_warn_or_fail() {
    let (_, w) = RunConfig::parse("train.colour = blue", false).unwrap();
    assert_eq!(w.len(), 1);
    assert!(w[0].contains("train.colour"));
    let e = RunConfig::parse("train.colour = blue", true).unwrap_err();
    assert!(e.to_string().contains("line 1"), "{e}");
    assert!(RunConfig::parse("no equals sign", false).is_err());
}

#[test]
fn mismatched_branch_sizes_cite_the_shared_projector() {
    let e = RunConfig::parse("model.spec_out_channels = 32", true).unwrap_err();
    assert!(e.to_string().contains("shared projector"), "{e}");
}

#[test]
fn cross_field_checks() {
    let e = RunConfig::parse("views.crop_len_s = 12", true).unwrap_err();
    assert!(e.to_string().contains("views.crop_len_s"), "{e}");
    let e = RunConfig::parse("views.crop_len_s = 0.01", true).unwrap_err();
    assert!(e.to_string().contains("too short"), "{e}");
    let e = RunConfig::parse("augment.freq_shift_max = 81", true).unwrap_err();
    assert!(e.to_string().contains("augment"), "{e}");
    let e = RunConfig::parse("eval.mode = single", true).unwrap_err();
    assert!(e.to_string().contains("events_max"), "{e}");
    assert!(RunConfig::parse("eval.mode = single\nsynth.events_min = 1\nsynth.events_max = 1", true).is_ok());
    let e = RunConfig::parse("ablate.axis = temperature", true).unwrap_err();
    assert!(e.to_string().contains("ablate.values"), "{e}");
}

#[test]
fn ablation_axes_map_to_keys() {
    let (base, _) = RunConfig::parse("ablate.axis = crop_size\nablate.values = 1;3;10", true).unwrap();
    assert_eq!(base.ablate.axis, Some(Axis::CropSize));
    assert_eq!(base.ablate.values, ["1", "3", "10"]);
    assert_eq!(base.ablate.seeds, [0, 1, 2]);
    for (axis, value) in [
        (Axis::Formats, "waveform+waveform"),
        (Axis::CropSize, "10"),
        (Axis::FreqShift, "0"),
        (Axis::Temperature, "1.0"),
        (Axis::LatentSize, "64"),
        (Axis::BatchSize, "16"),
        (Axis::ConvDepth, "4"),
    ] {
        let c = base.with(axis.key(), value).unwrap();
        assert_ne!(c, base, "{}", axis.name());
        assert_eq!(Axis::parse(axis.name()), Some(axis));
    }
    assert!(base.with("train.temperature", "0").is_err());
}
