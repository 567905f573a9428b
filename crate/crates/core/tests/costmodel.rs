use std::collections::BTreeMap;

use attnprof_core::costmodel::*;
use attnprof_core::modelzoo::{pad_input, EncoderModel, ModelConfig};
use attnprof_core::instrument::measure_peak_memory;
use attnprof_core::numkernel::{tally_ops, Graph};
use attnprof_core::workloads::{make_input, make_text_of_length, text_grid};
use attnprof_core::{Family, LayerTag, Mode, Preset, TagKind};

fn nonzero(m: BTreeMap<LayerTag, u64>) -> BTreeMap<LayerTag, u64> {
    m.into_iter().filter(|(_, v)| *v > 0).collect()
}

/// Runs the model and compares the kernel tallies against the closed form.
fn check_counts(c: &ModelConfig, size: usize, batch: usize) {
    let model = EncoderModel::new(c, 1).unwrap();
    let input = make_input(c.modality(), size, 3);
    let (out, tally) = tally_ops(|| {
        let g = Graph::inference();
        model.forward(&g, &input, batch).map(|_| ())
    });
    out.unwrap();
    let cost = cost_of(c, size, Mode::Inference, batch);
    let macs = nonzero(cost.entries.iter().map(|(t, e)| (*t, e.macs)).collect());
    let elem = nonzero(cost.entries.iter().map(|(t, e)| (*t, e.elementwise)).collect());
    assert_eq!(macs, nonzero(tally.macs.clone()), "{} size {size} batch {batch}: MACs", c.name);
    assert_eq!(elem, nonzero(tally.elementwise.clone()), "{} size {size} batch {batch}: elementwise", c.name);
    let flops: u64 = tally.flops().values().sum();
    assert_eq!(cost.total_flops(), flops);
}

fn desk(f: Family) -> ModelConfig {
    ModelConfig::preset(f, Preset::DeskDims)
}

#[test]
fn tiny_config_matches_counting_oracle() {
    let mut c = desk(Family::TextFull);
    c.d_model = 8;
    c.n_heads = 1;
    c.n_layers = 1;
    c.d_ff = 32;
    c.vocab_size = 3000;
    c.max_positions = 16;
    let cost = flops_of(&c, 4, Mode::Inference);
    // projections 4·n·d², scores and context 2·n²·d, FFN 2·n·d·ff, pooler d²
    let expect = 4 * 4 * 64 + 2 * 16 * 8 + 2 * 4 * 8 * 32 + 64;
    assert_eq!(cost.total().macs, expect);
    check_counts(&c, 4, 1);
}

#[test]
fn text_models_match_tallies() {
    for size in [1, 7, 33, 64] {
        check_counts(&desk(Family::TextFull), size, 1);
        check_counts(&desk(Family::TextNystrom), size, 1);
    }
    check_counts(&desk(Family::TextFull), 20, 2);
    let mut sliding = desk(Family::TextSlidingWindow);
    sliding.pad_multiple = Some(16);
    sliding.attention_window = Some(8);
    for size in [3, 17, 64] {
        check_counts(&sliding, size, 1);
    }
    check_counts(&sliding, 30, 2);
    let mut nys = desk(Family::TextNystrom);
    nys.n_landmarks = Some(8);
    check_counts(&nys, 61, 2);
}

#[test]
fn padded_sliding_preset_matches_tallies() {
    check_counts(&desk(Family::TextSlidingWindow), 40, 1);
}

#[test]
fn speech_models_match_tallies() {
    for frames in [1, 9, 40] {
        let samples = 400 + 320 * (frames - 1);
        check_counts(&desk(Family::SpeechFull), samples, 1);
        let mut s = desk(Family::SpeechSlidingWindow);
        s.attention_window = Some(6);
        check_counts(&s, samples + 17, 1);
    }
    check_counts(&desk(Family::SpeechFull), 5000, 2);
}

#[test]
fn vision_models_match_tallies() {
    check_counts(&desk(Family::VisionFull), 64, 1);
    check_counts(&desk(Family::VisionFull), 50, 2);
    let mut swin = desk(Family::VisionShiftedWindow);
    swin.pad_multiple = None;
    swin.swin.as_mut().unwrap().window = 2;
    check_counts(&swin, 28, 1);
    check_counts(&swin, 40, 2);
}

#[test]
fn swin_preset_matches_tallies() {
    check_counts(&desk(Family::VisionShiftedWindow), 100, 1);
}

#[test]
fn token_counts_follow_padding() {
    assert_eq!(tokens_for(&desk(Family::TextSlidingWindow), 100), 512);
    assert_eq!(tokens_for(&desk(Family::TextFull), 100), 100);
    assert_eq!(tokens_for(&desk(Family::VisionShiftedWindow), 100), 56 * 56);
    assert_eq!(tokens_for(&desk(Family::VisionFull), 1024), 4097);
    assert_eq!(tokens_for(&desk(Family::SpeechFull), 16_000), 49);
    assert_eq!(tokens_for(&desk(Family::SpeechFull), 100), 0);
    assert_eq!(pad_input(100, 512), 512);
}

#[test]
fn score_term_quadruples_when_length_doubles() {
    let c = ModelConfig::preset(Family::TextFull, Preset::PaperDims);
    let sa = |n: usize| {
        let macs = flops_of(&c, n, Mode::Inference).get(LayerTag::attention(0)).macs;
        macs - 4 * n as u64 * 768 * 768
    };
    assert_eq!(sa(2000), 4 * sa(1000));
}

fn slope(c: &ModelConfig, lo: usize, hi: usize) -> f64 {
    let sa = |n| {
        flops_of(c, n, Mode::Inference)
            .by_kind(|e| e.flops)[&TagKind::SelfAttention] as f64
    };
    (sa(hi) / sa(lo)).ln() / (hi as f64 / lo as f64).ln()
}

#[test]
fn asymptotic_exponents() {
    let full = ModelConfig::preset(Family::TextFull, Preset::PaperDims);
    let sliding = ModelConfig::preset(Family::TextSlidingWindow, Preset::PaperDims);
    let s = slope(&full, 1_000_000, 10_000_000);
    assert!((s - 2.0).abs() <= 0.05, "full slope {s}");
    let s = slope(&sliding, 1_000_448, 10_000_384);
    assert!((s - 1.0).abs() <= 0.05, "sliding slope {s}");
}

#[test]
fn whole_model_cost_is_sum_over_layers() {
    for c in ModelConfig::all_presets(Preset::PaperDims) {
        let size = match c.modality() {
            attnprof_core::Modality::Speech => 48_000,
            attnprof_core::Modality::Vision => 224,
            attnprof_core::Modality::Text => 300,
        };
        let cost = flops_of(&c, size, Mode::Inference);
        let by_layer: u64 = (0..=c.n_layers)
            .map(|i| cost.entries.iter().filter(|(t, _)| t.layer_index == i).map(|(_, e)| e.flops).sum::<u64>())
            .sum();
        assert_eq!(by_layer, cost.total_flops(), "{}", c.name);
        let kinds: u64 = cost.by_kind(|e| e.flops).values().sum();
        assert_eq!(kinds, cost.total_flops());
    }
}

#[test]
fn training_cost_is_three_times_inference() {
    for c in ModelConfig::all_presets(Preset::DeskDims) {
        let size = match c.modality() {
            attnprof_core::Modality::Speech => 16_000,
            attnprof_core::Modality::Vision => 64,
            attnprof_core::Modality::Text => 100,
        };
        let i = flops_of(&c, size, Mode::Inference);
        let t = flops_of(&c, size, Mode::Training);
        assert_eq!(t.total_flops(), 3 * i.total_flops());
        assert!(t.peak_bytes > i.peak_bytes);
    }
}

#[test]
fn analytic_text_crossover_lies_above_one_window() {
    let full = desk(Family::TextFull);
    let sliding = desk(Family::TextSlidingWindow);
    let sizes = text_grid().sizes();
    for metric in [CostMetric::Flops, CostMetric::Bytes] {
        let tp = predict_tipping_point(&full, &sliding, metric, Mode::Inference, &sizes).unwrap();
        let tp = tp.unwrap_or_else(|| panic!("no {metric} crossover"));
        assert!(tp > 512, "{metric} crossover at {tp}");
    }
    let paper_full = ModelConfig::preset(Family::TextFull, Preset::PaperDims);
    let paper_sliding = ModelConfig::preset(Family::TextSlidingWindow, Preset::PaperDims);
    let tp = predict_tipping_point(&paper_full, &paper_sliding, CostMetric::Flops, Mode::Inference, &sizes).unwrap();
    assert!(tp.is_some_and(|t| t > 512));
}

#[test]
fn no_crossover_for_identical_or_worse_models() {
    let full = desk(Family::TextFull);
    let sizes = text_grid().sizes();
    assert_eq!(predict_tipping_point(&full, &full, CostMetric::Flops, Mode::Inference, &sizes).unwrap(), None);
    let sliding = desk(Family::TextSlidingWindow);
    assert_eq!(predict_tipping_point(&sliding, &full, CostMetric::Flops, Mode::Inference, &sizes).unwrap(), None);
    assert!(predict_tipping_point(&full, &desk(Family::VisionFull), CostMetric::Flops, Mode::Inference, &sizes).is_err());
}

#[test]
fn non_attention_share() {
    let bert = ModelConfig::preset(Family::TextFull, Preset::PaperDims);
    assert!(non_sa_share(&bert, 1000, CostMetric::Flops) > 0.5);
    assert!(non_sa_share(&bert, 1_000_000, CostMetric::Flops) < 0.2);
    let mut bare = desk(Family::TextFull);
    bare.n_layers = 1;
    bare.d_ff = 0;
    let cost = flops_of(&bare, 2000, Mode::Inference);
    let by = cost.by_kind(|e| e.macs);
    let encoder: u64 = by[&TagKind::SelfAttention] + by[&TagKind::Intermediate] + by[&TagKind::Output];
    assert_eq!(by[&TagKind::SelfAttention], encoder);
}

#[test]
fn short_input_under_padding_costs_as_much_as_a_full_window() {
    let c = desk(Family::TextSlidingWindow);
    let short = flops_of(&c, 100, Mode::Inference);
    let mut unpadded = c.clone();
    unpadded.pad_multiple = None;
    let long = flops_of(&unpadded, 512, Mode::Inference);
    assert!(short.total_flops() >= long.total_flops());
    assert_eq!(make_text_of_length(100).len(), 100);
}

#[test]
fn inference_peak_matches_accountant() {
    for c in ModelConfig::all_presets(Preset::DeskDims) {
        let sizes: &[usize] = match c.modality() {
            attnprof_core::Modality::Text => &[5, 300],
            attnprof_core::Modality::Speech => &[400, 20_000],
            attnprof_core::Modality::Vision => &[64, 230],
        };
        let model = EncoderModel::new(&c, 1).unwrap();
        for &size in sizes {
            for batch in [1, 2] {
                let input = make_input(c.modality(), size, 3);
                let (out, peak) = measure_peak_memory(|| {
                    let g = Graph::inference();
                    model.forward(&g, &input, batch).map(|_| ())
                });
                out.unwrap();
                let cost = cost_of(&c, size, Mode::Inference, batch);
                assert_eq!(cost.activation_peak_bytes(), peak.peak_bytes, "{} size {size} batch {batch}", c.name);
                assert_eq!(cost.resident_bytes, model.resident_bytes());
            }
        }
    }
}
