use pairsplat::gradcheck::{compare_render_gradients, random_grad_scene, render_gradient_suite, summarize, GradTolerance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_backward_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let tol = GradTolerance::default();
    let reports = render_gradient_suite(&mut rng, 100, &tol).unwrap();
    for r in &reports {
        println!("{:?}", r);
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn degree_two_sh_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let tol = GradTolerance::default();
    for _ in 0..5 {
        let s = random_grad_scene(&mut rng, 12, 4, 2);
        let cmp = compare_render_gradients(&s.camera, &s.primitives, s.background, &s.upstream, tol.step).unwrap();
        assert!(summarize(&cmp, &tol).iter().all(|r| r.passed()));
    }
}
