//! Full-recipe shape checks: the default configurations reproduce the
//! published architecture dimensions without training anything.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptn_lid::dsp::{fbank, splice, FeatureMatrix, FrontendConfig, Waveform};
use ptn_lid::lstmp::{DEFAULT_CELL_DIM, DEFAULT_PROJ_DIM, DEFAULT_RESET_EVERY};
use ptn_lid::tdnn::{svd_bottleneck, Tap, TdnnConfig, TdnnLayerSpec, TdnnStack};

#[test]
fn default_front_end_dims() {
    let cfg = FrontendConfig::default();
    let wave = Waveform::new(
        (0..16_000)
            .map(|i| 0.3 * (2.0 * std::f64::consts::PI * 300.0 * i as f64 / 16_000.0).sin())
            .collect(),
        16_000,
    );
    let f = fbank(&wave, &cfg).unwrap();
    assert_eq!(f.dim(), 23);
    // symmetric 2-frame window for the recurrent classifier input
    assert_eq!(splice(&f, 2, 2).dim(), 115);
    // symmetric 4-frame window for the time-delay network input
    assert_eq!(splice(&f, 4, 4).dim(), 207);
}

#[test]
fn default_recurrent_sizes() {
    assert_eq!(DEFAULT_CELL_DIM, 1024);
    assert_eq!(DEFAULT_PROJ_DIM, 256);
    assert_eq!(DEFAULT_RESET_EVERY, 20);
    let spec = ptn_lid::ModelSpec::default();
    assert_eq!(spec.cells, 1024);
    assert_eq!(spec.proj, 256);
    assert_eq!(spec.reset_every, 20);
}

#[test]
fn default_phonetic_network_matches_recipe() {
    let stack = TdnnStack::new(TdnnConfig::default(), "", 3).unwrap();
    assert_eq!(stack.layers.len(), 6);
    // last hidden width equals the recurrent projection width
    assert_eq!(stack.tap_dim(Tap::LastHidden).unwrap(), DEFAULT_PROJ_DIM);

    // forward at full scale stays frame-aligned
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let feats = FeatureMatrix {
        data: Array2::from_shape_fn((30, 23), |_| rng.gen_range(-1.0..1.0)),
        kind: ptn_lid::FeatureKind::Fbank,
        frame_shift: 0.01,
    };
    let phi = stack
        .read_phonetic_feature(&feats, Tap::LastHidden)
        .unwrap();
    assert_eq!(phi.num_frames(), 30);
    assert_eq!(phi.dim(), 256);
}

#[test]
fn rank_400_bottleneck_on_a_1200_square_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Array2::from_shape_fn((1200, 1200), |_| rng.gen_range(-0.05..0.05));
    let (a, b) = svd_bottleneck(&w, 400).unwrap();
    assert_eq!(a.dim(), (1200, 400));
    assert_eq!(b.dim(), (400, 1200));

    // wired into a stack, the tap dimension drops to the rank
    let cfg = TdnnConfig {
        input_dim: 1200,
        input_splice_left: 0,
        input_splice_right: 0,
        layers: vec![TdnnLayerSpec {
            context_offsets: vec![0],
            hidden_dim: 1200,
            pnorm_group: 4,
        }],
        phone_classes: 10,
        lid_classes: None,
        svd_rank: None,
    };
    let mut stack = TdnnStack::new(cfg, "", 6).unwrap();
    stack.apply_svd_bottleneck(400).unwrap();
    assert_eq!(stack.tap_dim(Tap::LowRank).unwrap(), 400);

    let feats = FeatureMatrix {
        data: Array2::from_shape_fn((4, 1200), |_| rng.gen_range(-0.5..0.5)),
        kind: ptn_lid::FeatureKind::Fbank,
        frame_shift: 0.01,
    };
    let phi = stack.read_phonetic_feature(&feats, Tap::LowRank).unwrap();
    assert_eq!(phi.dim(), 400);
    assert_eq!(phi.num_frames(), 4);
}
