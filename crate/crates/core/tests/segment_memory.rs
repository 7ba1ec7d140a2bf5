use ctxspeech_core::conformer::{ConformerStack, StackConfig};
use ctxspeech_core::{AttentionConfig, AttentionVariant, GradTape, MemoryConfig, SegmentMemory, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stack(variant: AttentionVariant, blocks: usize) -> ConformerStack {
    let attention = AttentionConfig::new(variant, 2, 4).unwrap();
    ConformerStack::random(StackConfig::new(blocks, attention), &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
}

fn segments(lens: &[usize]) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    lens.iter().map(|&l| Tensor::randn(&[l, 8], &mut rng)).collect()
}

#[test]
fn cache_keeps_tail_of_each_block_input() {
    for variant in AttentionVariant::ALL {
        let s = stack(variant, 3);
        let mut mem = SegmentMemory::new(MemoryConfig { num_layers: 3, capacity: 6, hidden: 8 });
        for (i, seg) in segments(&[4, 9, 2]).iter().enumerate() {
            let mut tape = GradTape::no_grad();
            let x = tape.constant(seg.clone());
            let out = s.forward_on_tape(&mut tape, &x, Some(&mem)).unwrap();
            let next = out.memory.unwrap();
            assert_eq!(next.segment_index(), i + 1);
            for (n, input) in out.layer_inputs.iter().enumerate() {
                let keep = input.rows().min(6);
                let tail = input.slice_rows(input.rows() - keep..input.rows()).unwrap();
                assert_eq!(next.layer(n).unwrap(), &tail);
            }
            assert_eq!(out.layer_inputs[0], *seg);
            mem = next;
        }
    }
}

#[test]
fn memory_changes_output_and_reset_restores_it() {
    let s = stack(AttentionVariant::LinearizedRpe, 2);
    let segs = segments(&[5, 5]);
    let fresh = SegmentMemory::new(MemoryConfig { num_layers: 2, capacity: 4, hidden: 8 });
    let (alone, _) = s.forward(&segs[1], None).unwrap();
    let (empty, _) = s.forward(&segs[1], Some(&fresh)).unwrap();
    assert_eq!(alone, empty);
    let (_, after_first) = s.forward(&segs[0], Some(&fresh)).unwrap();
    let (with_context, _) = s.forward(&segs[1], after_first.as_ref()).unwrap();
    assert!(with_context.max_abs_diff(&alone).unwrap() > 1e-9);
    let (reset, _) = s.forward(&segs[1], Some(&after_first.unwrap().reset())).unwrap();
    assert_eq!(reset, alone);
}

#[test]
fn no_gradient_reaches_cached_states() {
    let s = stack(AttentionVariant::Softmax, 2);
    let segs = segments(&[3, 4]);
    let mem = SegmentMemory::new(MemoryConfig { num_layers: 2, capacity: 8, hidden: 8 });
    let (_, mem) = s.forward(&segs[0], Some(&mem)).unwrap();
    let mut tape = GradTape::new();
    let x = tape.param(segs[1].clone());
    let out = s.forward_on_tape(&mut tape, &x, mem.as_ref()).unwrap();
    let loss = tape.sum(&out.output);
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(out.memory_vars.len(), 2);
    for m in &out.memory_vars {
        assert!(grads.get(m).map_or(true, |g| g.max_abs() == 0.0));
    }
    assert!(grads.get(&x).unwrap().max_abs() > 0.0);
}

#[test]
fn mismatched_memory_is_rejected() {
    let s = stack(AttentionVariant::Linearized, 2);
    let wrong = SegmentMemory::new(MemoryConfig { num_layers: 3, capacity: 4, hidden: 6 });
    let err = s.forward(&segments(&[2])[0], Some(&wrong)).unwrap_err().to_string();
    assert!(err.contains("3 layers") && err.contains("width 6"), "{err}");
}
