use proptest::prelude::*;

use textseg::autodiff::Tape;
use textseg::models::{Architecture, FfpConfig, Model, Network, SspConfig, SspVariant};
use textseg::nn::Mode;
use textseg::Tensor;

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn conv_bn(cin: usize, cout: usize) -> usize {
    conv(cin, cout, 3) + 2 * cout
}

fn ffp_count(cfg: &FfpConfig) -> usize {
    let mut total = 0;
    let mut cin = 3;
    for _ in 0..cfg.n_stages {
        total += conv_bn(cin, cfg.stage_channels) + conv_bn(cfg.stage_channels, cfg.stage_channels);
        cin += cfg.stage_channels;
    }
    total + conv(cin, cfg.out_classes, 1)
}

fn ssp_count(cfg: &SspConfig) -> usize {
    let w = |i: usize| cfg.base_channels << i;
    let block = |cin, cout| conv_bn(cin, cout) + conv_bn(cout, cout);
    let mut total = 0;
    let mut cin = 3;
    for i in 0..cfg.depth {
        total += block(cin, w(i));
        cin = w(i);
    }
    for i in (0..cfg.depth).rev() {
        let out = w(i.saturating_sub(1));
        total += block(cin + w(i), out);
        cin = out;
    }
    total + conv(cin, cfg.out_classes, 1)
}

#[test]
fn standard_ffp_parameter_count() {
    let cfg = FfpConfig::standard(4);
    let m = Model::<f32>::new(&Architecture::Ffp(cfg.clone()), 0).unwrap();
    assert_eq!(m.parameter_count(), ffp_count(&cfg));
    assert_eq!(m.parameter_count(), 378_128);
}

#[test]
fn ssp_light_lands_in_band() {
    for classes in [3, 4] {
        let cfg = SspConfig::light(classes);
        let m = Model::<f32>::new(&Architecture::Ssp(cfg.clone()), 0).unwrap();
        assert_eq!(m.parameter_count(), ssp_count(&cfg));
        assert!((250_000..=350_000).contains(&m.parameter_count()), "{}", m.parameter_count());
    }
    let residual = SspConfig { variant: SspVariant::MiniResidual, ..SspConfig::light(4) };
    let m = Model::<f32>::new(&Architecture::Ssp(residual.clone()), 0).unwrap();
    assert_eq!(m.parameter_count(), ssp_count(&residual));
}

#[test]
fn mfm_count_is_branches_plus_fusion() {
    let (ffp, ssp) = (FfpConfig::standard(4), SspConfig::light(4));
    let m = Model::<f32>::new(&Architecture::Mfm { ffp: ffp.clone(), ssp: ssp.clone() }, 0).unwrap();
    let fusion = 2 * (2 * 4) + conv(8, 4, 1);
    assert_eq!(m.parameter_count(), ffp_count(&ffp) + ssp_count(&ssp) + fusion);
}

#[test]
fn ffp_stage_one_at_full_resolution() {
    let m = Model::<f32>::new(&Architecture::Ffp(FfpConfig::standard(4)), 0).unwrap();
    let Network::Ffp(net) = m.network() else { unreachable!() };
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[1, 3, 256, 256], 0.25));
    let out = net.forward(&mut tape, m.store(), x, Mode::Eval).unwrap();
    assert_eq!(tape.value(out.stages[0]).dims(), &[1, 67, 256, 256]);
    assert_eq!(tape.value(out.logits).dims(), &[1, 4, 256, 256]);
}

#[test]
fn ssp_bottleneck_extent() {
    let m = Model::<f32>::new(&Architecture::Ssp(SspConfig::light(4)), 0).unwrap();
    let Network::Ssp(net) = m.network() else { unreachable!() };
    for (side, bottom) in [(256, 16), (64, 4)] {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 3, side, side], 0.5));
        let out = net.forward(&mut tape, m.store(), x, Mode::Eval).unwrap();
        assert_eq!(&tape.value(out.bottleneck).dims()[2..], &[bottom, bottom]);
        assert_eq!(tape.value(out.logits).dims(), &[1, 4, side, side]);
    }
}

#[test]
fn softmax_of_dominant_logit() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec(&[1, 4, 1, 1], vec![10.0, -10.0, -10.0, -10.0]).unwrap());
    let p = tape.softmax_channels(x).unwrap();
    assert!(tape.value(p).data()[0] > 0.999);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_network_preserves_extent(h in 1usize..6, w in 1usize..6, kind in 0usize..3, classes in 3usize..5) {
        let ffp = FfpConfig { n_stages: 2, stage_channels: 3, out_classes: classes };
        let ssp = SspConfig {
            variant: if kind == 1 { SspVariant::MiniResidual } else { SspVariant::Light },
            depth: 2,
            base_channels: 2,
            out_classes: classes,
            skip_connections: true,
        };
        let arch = match kind {
            0 => Architecture::Ffp(ffp),
            1 => Architecture::Ssp(ssp),
            _ => Architecture::Mfm { ffp, ssp },
        };
        let (h, w) = (4 * h, 4 * w);
        let m = Model::<f32>::new(&arch, 1).unwrap();
        let p = m.predict(&Tensor::from_fn(&[1, 3, h, w], |i| (i % 7) as f32 / 7.0)).unwrap();
        prop_assert_eq!(p.dims(), &[1, classes, h, w]);
        for i in 0..h * w {
            let s: f32 = (0..classes).map(|c| p.data()[c * h * w + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }
}
