use metok_core::accounting::{kv_bytes, pipeline_flops};
use metok_core::io::{gen_synthetic, EventProfile, RunConfig};
use metok_core::model::{ModelConfig, ToyModel};
use metok_core::pipeline::{decode_mask, run_once, SimulateOptions};
use metok_core::schedule::PruneSchedule;
use metok_core::vision::run_vision_stage;
use proptest::prelude::*;

fn small(r: f64, boundaries: [usize; 3]) -> RunConfig {
    RunConfig {
        k: 3,
        r,
        layers: 6,
        heads: 2,
        d_model: 16,
        mlp_ratio: 2,
        layer_boundaries: boundaries,
        ..RunConfig::default()
    }
}

#[test]
fn kv_bytes_match_stored_entries() {
    let syn = gen_synthetic(10, 4, 4, 8, 21, EventProfile::new(3).with_prompt_len(7)).unwrap();
    for cfg in [
        small(0.6, [1, 3, 5]),
        small(0.6, [1, 3, 5]).baseline(),
        small(0.9, [2, 4, 9]),
    ] {
        let (stream, _) = run_vision_stage(&syn.frames, &syn.text, &cfg).unwrap();
        let model = ToyModel::new(ModelConfig::from_run(&cfg, 8)).unwrap();
        let input = model.build_input(&stream, &syn.text).unwrap();
        let pre = model
            .prefill(&input, &PruneSchedule::from_config(&cfg).unwrap())
            .unwrap();
        let cache = pre
            .cache
            .apply_mask(&decode_mask(&cfg, &input.text_positions(), &input.visual_positions()));
        let brute: u128 = cache
            .layers()
            .iter()
            .map(|l| ((l.keys().len() + l.values().len()) * 2) as u128)
            .sum();

        let run = run_once(&syn.frames, &syn.text, &cfg, &SimulateOptions::default()).unwrap();
        assert_eq!(kv_bytes(&run.trace, 2), brute);
    }
}

#[test]
fn identical_across_thread_counts() {
    let syn = gen_synthetic(12, 4, 4, 8, 4, EventProfile::new(3)).unwrap();
    let cfg = small(0.7, [1, 3, 5]);
    let opts = SimulateOptions::default();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| run_once(&syn.frames, &syn.text, &cfg, &opts).unwrap());
    let b = four.install(|| run_once(&syn.frames, &syn.text, &cfg, &opts).unwrap());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.decode, b.decode);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn later_boundaries_select_among_survivors(seed in 0u64..1000, r in 0.2f64..1.0, l1 in 0usize..3) {
        let syn = gen_synthetic(8, 3, 3, 8, seed, EventProfile::new(2).with_prompt_len(4)).unwrap();
        let cfg = small(r, [l1, l1 + 1, l1 + 3]);
        let (stream, _) = run_vision_stage(&syn.frames, &syn.text, &cfg).unwrap();
        let model = ToyModel::new(ModelConfig::from_run(&cfg, 8)).unwrap();
        let input = model.build_input(&stream, &syn.text).unwrap();
        let sched = PruneSchedule::from_config(&cfg).unwrap();
        let pre = model.prefill(&input, &sched).unwrap();
        prop_assert_eq!(&pre.lengths, &sched.expected_lengths(input.visual_counts(), 4));
        for w in pre.cache.layers().windows(2) {
            let earlier = w[0].positions();
            prop_assert!(w[1].positions().iter().all(|p| earlier.contains(p)));
        }
    }

    #[test]
    fn flops_reduction_monotone_in_r(seed in 0u64..1000, lo in 0.05f64..1.0, hi in 0.05f64..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let syn = gen_synthetic(8, 4, 4, 8, seed, EventProfile::new(2)).unwrap();
        let opts = SimulateOptions { analytic: true, ..SimulateOptions::default() };
        let flops = |r| {
            let t = run_once(&syn.frames, &syn.text, &small(r, [1, 3, 5]), &opts).unwrap().trace;
            pipeline_flops(&t).unwrap()
        };
        prop_assert!(flops(lo) <= flops(hi));
    }
}
