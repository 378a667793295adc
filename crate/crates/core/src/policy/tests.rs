use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::taskgen::{render_pool, Raster, SceneConfig};

fn tiny_config(seed: u64) -> PolicyConfig {
    PolicyConfig {
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_dim: 16,
        max_seq_len: 24,
        patch_count: 4,
        image_height: 8,
        image_width: 8,
        seed,
    }
}

fn bare(n: usize) -> Vocabulary {
    Vocabulary::bare((0..n).map(|i| format!("t{i}")).collect()).unwrap()
}

fn random_raster(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Raster {
    Raster {
        height: h,
        width: w,
        data: (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
    }
}

fn tiny_prompt(policy: &Policy, rng: &mut ChaCha8Rng, len: usize) -> PromptInput {
    let raster = random_raster(rng, 8, 8);
    PromptInput {
        tokens: (0..len).map(|_| rng.gen_range(0..policy.vocab_size())).collect(),
        patches: policy.patchify(&raster).unwrap(),
    }
}

fn standard_policy() -> (Policy, PromptInput) {
    let policy = Policy::new(PolicyConfig::default(), Vocabulary::standard()).unwrap();
    let pool = render_pool(3, 5).unwrap();
    let s = &pool[1];
    let input = policy
        .prompt_input(&s.prompt_text, &s.raster(SceneConfig::default().px_per_cell))
        .unwrap();
    (policy, input)
}

#[test]
fn config_validation() {
    let mut c = PolicyConfig::default();
    c.num_heads = 3;
    assert!(c.validate().is_err());
    let mut c = PolicyConfig::default();
    c.patch_count = 12;
    assert!(c.validate().is_err());
    let mut c = PolicyConfig::default();
    c.patch_count = 9;
    assert!(c.validate().is_err(), "64 does not split into 3 patch rows");
    assert!(PolicyConfig::default().validate().is_ok());
}

#[test]
fn greedy_group_is_identical() {
    let (policy, input) = standard_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let group = policy.sample(&input, 4, 0.0, 12, &mut rng).unwrap();
    assert!(group.iter().all(|c| c == &group[0]));
    // greedy equals argmax of the logits at each step
    let dists = policy
        .position_logprobs(&input, &group[0].token_ids, 1.0)
        .unwrap();
    for (d, &t) in dists.iter().zip(&group[0].token_ids) {
        assert_eq!(argmax(d), t);
    }
}

#[test]
fn seeded_sampling_is_reproducible() {
    let (policy, input) = standard_policy();
    let a = policy
        .sample(&input, 4, 0.9, 12, &mut ChaCha8Rng::seed_from_u64(7))
        .unwrap();
    let b = policy
        .sample(&input, 4, 0.9, 12, &mut ChaCha8Rng::seed_from_u64(7))
        .unwrap();
    assert_eq!(a, b);
    for c in &a {
        assert_eq!(c.token_logprobs.len(), c.token_ids.len());
        assert_eq!(c.length, c.token_ids.len());
        assert!(c.token_logprobs.iter().all(|&v| v <= 0.0));
        assert_eq!(c.text, policy.vocab.decode(&c.token_ids));
    }
}

#[test]
fn sampling_contract_errors() {
    let (policy, input) = standard_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(policy.sample(&input, 4, 0.9, 0, &mut rng).is_err());
    assert!(policy.sample(&input, 0, 0.9, 4, &mut rng).is_err());
    assert!(policy.sample(&input, 1, -1.0, 4, &mut rng).is_err());
    assert!(policy.sample(&input, 1, 1.0, 500, &mut rng).is_err());
}

#[test]
fn empirical_frequencies_match_softmax() {
    let policy = Policy::new(tiny_config(3), bare(8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = tiny_prompt(&policy, &mut rng, 3);
    let n = 10_000;
    let mut counts = [0usize; 8];
    let group = policy.sample(&input, n, 1.0, 1, &mut rng).unwrap();
    for c in group {
        counts[c.token_ids[0]] += 1;
    }
    let probs: Vec<f64> = policy.position_logprobs(&input, &[0], 1.0).unwrap()[0]
        .iter()
        .map(|v| v.exp())
        .collect();
    for (k, &p) in probs.iter().enumerate() {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (counts[k] as f64 - mean).abs() <= 3.0 * sd,
            "token {k}: {} vs {mean:.1} ± {sd:.1}",
            counts[k]
        );
    }
}

#[test]
fn sampled_logprobs_match_teacher_forcing() {
    let (policy, input) = standard_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let group = policy.sample(&input, 4, 0.9, 16, &mut rng).unwrap();
    let mut tape = Tape::new();
    let pv = policy.bind(&mut tape);
    let seqs: Vec<SeqRef> = group
        .iter()
        .map(|c| SeqRef {
            prompt: 0,
            completion: &c.token_ids,
        })
        .collect();
    let lp = policy
        .forward_logprobs(&mut tape, &pv, std::slice::from_ref(&input), &seqs, 0.9)
        .unwrap();
    let flat: Vec<f64> = group.iter().flat_map(|c| c.token_logprobs.clone()).collect();
    assert_eq!(tape.data(lp).len(), flat.len());
    for (a, b) in tape.data(lp).iter().zip(&flat) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    for c in &group {
        let again = policy.score_completion(&input, &c.token_ids, 0.9).unwrap();
        for (a, b) in again.iter().zip(&c.token_logprobs) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn packed_prompts_match_separate_forwards() {
    let policy = Policy::new(tiny_config(5), bare(12)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prompts: Vec<PromptInput> = (0..3).map(|i| tiny_prompt(&policy, &mut rng, 2 + i)).collect();
    let comps: Vec<Vec<usize>> = (0..5)
        .map(|i| (0..1 + i).map(|_| rng.gen_range(0..12)).collect())
        .collect();
    let seqs: Vec<SeqRef> = comps
        .iter()
        .enumerate()
        .map(|(i, c)| SeqRef {
            prompt: i % 3,
            completion: c,
        })
        .collect();
    let mut tape = Tape::new();
    let pv = policy.bind(&mut tape);
    let packed = policy
        .forward_logprobs(&mut tape, &pv, &prompts, &seqs, 0.7)
        .unwrap();
    let packed = tape.data(packed).to_vec();
    let mut off = 0;
    for s in &seqs {
        let single = policy
            .score_completion(&prompts[s.prompt], s.completion, 0.7)
            .unwrap();
        for (a, b) in single.iter().zip(&packed[off..]) {
            assert!((a - b).abs() < 1e-12);
        }
        off += single.len();
    }
    assert_eq!(off, packed.len());
}

#[test]
fn single_token_vocabulary_is_certain() {
    let policy = Policy::new(tiny_config(1), bare(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = tiny_prompt(&policy, &mut rng, 2);
    let mut tape = Tape::new();
    let pv = policy.bind(&mut tape);
    let lp = policy.log_probs(&mut tape, &pv, &input, &[0, 0, 0], 1.0).unwrap();
    assert!(tape.data(lp).iter().all(|&v| v == 0.0));
}

#[test]
fn position_distributions_are_normalised() {
    let (policy, input) = standard_policy();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let comp: Vec<usize> = (0..10).map(|_| rng.gen_range(0..policy.vocab_size())).collect();
    for t in [0.9, 1.0, 0.0] {
        for d in policy.position_logprobs(&input, &comp, t).unwrap() {
            let s: f64 = d.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn out_of_vocabulary_ids_are_rejected() {
    let (policy, input) = standard_policy();
    let mut tape = Tape::new();
    let pv = policy.bind(&mut tape);
    let bad = [policy.vocab_size()];
    assert!(policy.log_probs(&mut tape, &pv, &input, &bad, 1.0).is_err());
    assert!(policy.score_completion(&input, &bad, 1.0).is_err());
}

#[test]
fn argmax_is_temperature_invariant() {
    let (policy, input) = standard_policy();
    let comp = [5, 9, 40];
    let a = policy.position_logprobs(&input, &comp, 0.3).unwrap();
    let b = policy.position_logprobs(&input, &comp, 2.0).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(argmax(x), argmax(y));
    }
}

#[test]
fn zero_raster_encodes_to_patch_bias() {
    let policy = Policy::new(PolicyConfig::default(), Vocabulary::standard()).unwrap();
    let mut tape = Tape::new();
    let pv = policy.bind(&mut tape);
    let zero = Raster {
        height: 64,
        width: 64,
        data: vec![0.0; 64 * 64],
    };
    let e = policy.encode_image(&mut tape, &pv, &zero).unwrap();
    let bias = policy.params.get("patch.b").unwrap().data().to_vec();
    for row in tape.data(e).chunks_exact(32) {
        assert_eq!(row, &bias[..]);
    }
    let e2 = policy.encode_image(&mut tape, &pv, &zero).unwrap();
    assert_eq!(tape.data(e), tape.data(e2));
    let wrong = Raster {
        height: 60,
        width: 64,
        data: vec![0.0; 60 * 64],
    };
    assert!(matches!(
        policy.encode_image(&mut tape, &pv, &wrong),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn one_cell_change_touches_one_patch() {
    let policy = Policy::new(PolicyConfig::default(), Vocabulary::standard()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_raster(&mut rng, 64, 64);
    for (r, c) in [(0, 0), (17, 40), (63, 63), (31, 32)] {
        let mut b = a.clone();
        // one grid cell is a 2x2 pixel block
        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let (rr, cc) = ((r / 2) * 2 + dr, (c / 2) * 2 + dc);
            b.data[rr * 64 + cc] += 0.5;
        }
        let mut tape = Tape::new();
        let pv = policy.bind(&mut tape);
        let ea = policy.encode_image(&mut tape, &pv, &a).unwrap();
        let eb = policy.encode_image(&mut tape, &pv, &b).unwrap();
        let touched = (r / 16) * 4 + c / 16;
        for (p, (x, y)) in tape
            .data(ea)
            .chunks_exact(32)
            .zip(tape.data(eb).chunks_exact(32))
            .enumerate()
        {
            if p == touched {
                assert_ne!(x, y);
            } else {
                assert_eq!(x, y);
            }
        }
    }
}

/// Central-difference check of `-mean(log_probs)` against every parameter.
#[test]
fn full_policy_gradient_matches_finite_differences() {
    let mut policy = Policy::new(tiny_config(9), bare(10)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let prompts: Vec<PromptInput> = (0..2).map(|_| tiny_prompt(&policy, &mut rng, 3)).collect();
    let comps: Vec<Vec<usize>> = (0..3)
        .map(|i| (0..2 + i).map(|_| rng.gen_range(0..10)).collect())
        .collect();
    let loss_of = |p: &Policy, grads: bool| -> (f64, Vec<Vec<f64>>) {
        let seqs: Vec<SeqRef> = comps
            .iter()
            .enumerate()
            .map(|(i, c)| SeqRef {
                prompt: i % 2,
                completion: c,
            })
            .collect();
        let mut tape = Tape::new();
        let pv = p.bind(&mut tape);
        let lp = p.forward_logprobs(&mut tape, &pv, &prompts, &seqs, 0.8).unwrap();
        let m = tape.mean(lp);
        let loss = tape.scale(m, -1.0);
        let v = tape.scalar_value(loss);
        if !grads {
            return (v, Vec::new());
        }
        tape.backward(loss).unwrap();
        let g = pv
            .iter()
            .map(|&x| tape.take_grad(x).unwrap_or_else(|| vec![0.0; tape.data(x).len()]))
            .collect();
        (v, g)
    };
    let (_, grads) = loss_of(&policy, true);
    let h = 1e-5;
    let mut checked = 0;
    for ti in 0..policy.params.len() {
        for j in 0..policy.params.tensors[ti].numel() {
            let orig = policy.params.tensors[ti].data()[j];
            policy.params.tensors[ti].data_mut()[j] = orig + h;
            let (lp, _) = loss_of(&policy, false);
            policy.params.tensors[ti].data_mut()[j] = orig - h;
            let (lm, _) = loss_of(&policy, false);
            policy.params.tensors[ti].data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[ti][j];
            let err = (fd - an).abs();
            assert!(
                err <= 1e-7 || err <= 1e-4 * fd.abs().max(an.abs()),
                "{}[{j}]: analytic {an} vs numeric {fd}",
                policy.params.names[ti]
            );
            checked += 1;
        }
    }
    assert_eq!(checked, policy.params.numel());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let (policy, _) = standard_policy();
    let mut ck = Checkpoint::from_policy(12, &policy);
    ck.meta = serde_json::json!({"beta": 0.001, "note": "x"});
    ck.rng_state = Some(serde_json::to_string(&ChaCha8Rng::seed_from_u64(3)).unwrap());
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.policy().unwrap(), policy);
    let rng: ChaCha8Rng = serde_json::from_str(back.rng_state.as_ref().unwrap()).unwrap();
    assert_eq!(rng, ChaCha8Rng::seed_from_u64(3));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("step.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn corrupted_checkpoints_are_refused() {
    let (policy, _) = standard_policy();
    let bytes = Checkpoint::from_policy(0, &policy).to_bytes();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 1;
    for bad in [&flipped[..], &bytes[..bytes.len() - 1], &bytes[..10], &[][..]] {
        assert!(matches!(
            Checkpoint::from_bytes(bad, "mem"),
            Err(crate::Error::Integrity { .. })
        ));
    }
    assert!(matches!(
        Checkpoint::load(std::path::Path::new("/nonexistent/ckpt")),
        Err(crate::Error::Missing(_))
    ));
}
