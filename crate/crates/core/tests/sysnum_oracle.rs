mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn random_supported_sequences_match_interpreter() {
    let mut rng = rng(0x5e5);
    let mut resolved = 0;
    for case in 0..1000 {
        let program = random_program(&mut rng, 8);
        let expected = interpret(&program);
        let got = resolve_program(&program, &mut rng);
        assert_eq!(got, expected, "case {case}: {program:?}");
        resolved += usize::from(expected.is_some());
    }
    assert!(resolved > 100, "too few resolvable cases: {resolved}");
}

#[test]
fn exhaustive_small_sequences() {
    let imms = [0u32, 1, 2, u32::MAX];
    let mut forms = Vec::new();
    for op in [ArithOp::Mov, ArithOp::Add, ArithOp::Sub] {
        for dst in 0..3 {
            for &v in &imms {
                forms.push(GenInsn::Op {
                    op,
                    src: Src::Imm(v),
                    dst,
                    wide: false,
                });
            }
            for r in 0..3 {
                forms.push(GenInsn::Op {
                    op,
                    src: Src::Reg(r),
                    dst,
                    wide: dst == 1,
                });
            }
        }
    }
    let mut rng = rng(7);
    let check = |p: &[GenInsn], rng: &mut rand_chacha::ChaCha8Rng| {
        assert_eq!(resolve_program(p, rng), interpret(p), "{p:?}");
    };
    check(&[], &mut rng);
    for a in &forms {
        check(&[*a], &mut rng);
        for b in &forms {
            check(&[*a, *b], &mut rng);
        }
    }
}

#[test]
fn unsupported_write_on_chain_is_unresolved() {
    let mut rng = rng(11);
    let mut poisoned = 0;
    for case in 0..2000 {
        let mut program = random_program(&mut rng, 7);
        let clean = interpret(&program);
        let at = rng.gen_range(0..=program.len());
        let mut bad = random_unsupported(&mut rng);
        if let GenInsn::Unsupported { reg, .. } = &mut bad {
            *reg = rng.gen_range(0..3);
        }
        program.insert(at, bad);
        let oracle = interpret(&program);
        let got = resolve_program(&program, &mut rng);
        if clean.is_some() && oracle.is_none() {
            poisoned += 1;
            assert_eq!(got, None, "case {case}: {program:?}");
        }
        // never a number the interpreter would not produce
        if let Some(v) = got {
            assert_eq!(Some(v), oracle, "case {case}: {program:?}");
        }
    }
    assert!(poisoned > 50, "too few poisoned cases: {poisoned}");
}

#[test]
fn unsupported_write_to_accumulator_before_syscall() {
    let mut rng = rng(12);
    for _ in 0..200 {
        let mut program = random_program(&mut rng, 7);
        let mut bad = random_unsupported(&mut rng);
        if let GenInsn::Unsupported { reg, .. } = &mut bad {
            *reg = 0;
        }
        program.push(bad);
        assert_eq!(resolve_program(&program, &mut rng), None, "{program:?}");
    }
}

proptest! {
    #[test]
    fn accumulator_names_share_a_cell(v in any::<u32>(), k in any::<u32>()) {
        let mut rng = rng(u64::from(v));
        let program = [
            GenInsn::Op { op: ArithOp::Mov, src: Src::Imm(v), dst: 0, wide: true },
            GenInsn::Op { op: ArithOp::Add, src: Src::Imm(k), dst: 0, wide: false },
        ];
        prop_assert_eq!(resolve_program(&program, &mut rng), Some(v.wrapping_add(k)));
    }
}
