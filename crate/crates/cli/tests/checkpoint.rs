use mfcl::checkpoint::{self, Checkpoint};
use mfcl::config::RunConfig;
use mfcl::run;
use mfcl_core::dsp::FrontEnd;
use mfcl_core::encoders::ContrastiveModel;
use mfcl_core::tensor::Tensor;
use mfcl_core::train::{TrainState, Trainer};
use mfcl_core::views::ViewSettings;
use tempfile::tempdir;

const TINY: &str = "
synth.n_clips = 12
synth.n_eval = 6
synth.clip_len_s = 4
synth.event_len_s = 0.5, 1.5
model.precision = f64
model.conv_channels = 8
model.conv_groups = 4
model.spec_channels = 4
model.spec_groups = 4
model.spec_out_channels = 8
model.proj_hidden = 16
model.latent_size = 8
train.steps = 2
train.batch = 4
train.val_every = 1
eval.probe_steps = 10
eval.probe_hidden = 8
";

fn tiny() -> RunConfig {
    RunConfig::parse(TINY, true).unwrap().0
}

#[test]
fn encode_decode_round_trip() {
    let c = Checkpoint {
        config_text: "a = 1\ncheckpoint.dtype = f64\n".into(),
        tensors: vec![
            ("w".into(), Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
            ("b".into(), Tensor::new(vec![1], vec![0.25]).unwrap()),
        ],
    };
    let bytes = c.encode();
    assert_eq!(&bytes[..4], b"MFCL");
    assert_eq!(Checkpoint::<f64>::decode(&bytes).unwrap(), c);
    let e = Checkpoint::<f32>::decode(&bytes).unwrap_err();
    assert!(e.to_string().contains("f64"), "{e}");
}

#[test]
fn corrupt_files_are_data_errors() {
    let c = Checkpoint::<f32> {
        config_text: "x = 1\n".into(),
        tensors: vec![("w".into(), Tensor::new(vec![4], vec![1.0; 4]).unwrap())],
    };
    let bytes = c.encode();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let e = Checkpoint::<f32>::decode(&bad).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("magic"), "{e}");
    for cut in [2, 7, 12, bytes.len() - 1] {
        assert_eq!(Checkpoint::<f32>::decode(&bytes[..cut]).unwrap_err().exit_code(), 3, "cut {cut}");
    }
    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(Checkpoint::<f32>::decode(&v2).unwrap_err().to_string().contains("version"));
}

#[test]
fn shape_mismatch_names_the_parameter() {
    let cfg = tiny();
    let model = ContrastiveModel::<f64>::new(cfg.model.clone(), 0).unwrap();
    let state = TrainState::fresh(model);
    let ckpt = checkpoint::from_training(&cfg.to_text(), &state.model.params, &state.adam, 0, None);
    let wider = cfg.with("model.latent_size", "16").unwrap();
    let mut other = ContrastiveModel::<f64>::new(wider.model, 0).unwrap();
    let e = checkpoint::load_params(&ckpt, &mut other.params).unwrap_err();
    assert!(e.to_string().contains("parameter `"), "{e}");
    assert!(e.to_string().contains("shape"), "{e}");
}

#[test]
fn probe_checkpoint_round_trip() {
    let cfg = tiny();
    let data = run::synth_in_memory(&cfg).unwrap();
    let model = ContrastiveModel::<f64>::new(cfg.model.clone(), 0).unwrap();
    let probe = run::fit_probe(&cfg, &model, &data.train).unwrap();
    let d = tempdir().unwrap();
    let p = d.path().join("probe.ckpt");
    checkpoint::from_probe(&cfg.to_text(), &probe).save(&p).unwrap();
    let back = checkpoint::to_probe(&Checkpoint::load(&p).unwrap(), probe.config).unwrap();
    let a = run::score(&cfg, &model, &probe, &data.eval).unwrap();
    let b = run::score(&cfg, &model, &back, &data.eval).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_is_bit_exact() {
    let cfg = tiny();
    let data = run::synth_in_memory(&cfg).unwrap();
    let front = FrontEnd::new(cfg.dsp.clone()).unwrap();
    let settings = ViewSettings {
        formats: cfg.model.formats,
        policy: &cfg.augment,
        crop_len_s: cfg.crop_len_s,
        front: &front,
    };
    let fresh = || TrainState::fresh(ContrastiveModel::<f64>::new(cfg.model.clone(), 0).unwrap());

    let mut straight = Trainer::new(cfg.train, fresh(), settings.clone(), &data.train.waves, &data.val.waves).unwrap();
    straight.step().unwrap();
    let second = straight.step().unwrap();

    let mut first = Trainer::new(cfg.train, fresh(), settings.clone(), &data.train.waves, &data.val.waves).unwrap();
    first.step().unwrap();
    let st = &first.state;
    let bytes = checkpoint::from_training(&cfg.to_text(), &st.model.params, &st.adam, st.step, None).encode();
    let ckpt = Checkpoint::<f64>::decode(&bytes).unwrap();
    let restored = checkpoint::restore_training(&ckpt, ContrastiveModel::new(cfg.model.clone(), 99).unwrap()).unwrap();
    assert_eq!(restored.step, 1);
    let mut resumed = Trainer::new(cfg.train, restored, settings, &data.train.waves, &data.val.waves).unwrap();
    let again = resumed.step().unwrap();

    assert_eq!(again.train_loss.to_bits(), second.train_loss.to_bits());
    assert_eq!(again.val_loss.map(f64::to_bits), second.val_loss.map(f64::to_bits));
    assert_eq!(resumed.state.model.params.checksum(), straight.state.model.params.checksum());
    for (a, b) in resumed.state.model.params.iter().zip(straight.state.model.params.iter()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{}", a.name);
    }
}
