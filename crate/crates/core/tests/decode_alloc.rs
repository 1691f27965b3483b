use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use kla_core::bench::{decoder_after_context, BenchConfig};
use kla_core::recurrence::{RuleKind, TokenInput, TokenView, UpdateRule};
use kla_core::sampling::random_tokens;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Counting;

static COUNTING: AtomicBool = AtomicBool::new(false);
static ALLOCS: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if COUNTING.load(Ordering::Relaxed) {
            ALLOCS.fetch_add(1, Ordering::Relaxed);
        }
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if COUNTING.load(Ordering::Relaxed) {
            ALLOCS.fetch_add(1, Ordering::Relaxed);
        }
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

#[test]
fn steady_state_decode_does_not_allocate() {
    let cfg = BenchConfig {
        d_k: 16,
        d_v: 8,
        ..BenchConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens: Vec<TokenInput> = random_tokens(&mut rng, 64, cfg.d_k, cfg.d_v);
    for kind in RuleKind::ALL {
        let rule = UpdateRule::new(kind);
        let mut dec = decoder_after_context::<f64>(&rule, 32, &cfg).unwrap();
        for x in &tokens[..8] {
            dec.step(TokenView::from(x)).unwrap();
        }
        let mut sink = 0.0;
        ALLOCS.store(0, Ordering::SeqCst);
        COUNTING.store(true, Ordering::SeqCst);
        for x in &tokens[8..] {
            sink += dec.step(TokenView::from(x)).unwrap()[0];
        }
        COUNTING.store(false, Ordering::SeqCst);
        assert!(sink.is_finite());
        assert_eq!(ALLOCS.load(Ordering::SeqCst), 0, "{kind} decode allocated");
    }
}
