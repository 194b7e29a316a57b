//! Reverse-mode gradients of a small network against central differences,
//! then the full built-in gradient suite.

use hipt::tensor::gradcheck::finite_diff_report;
use hipt::tensor::{Graph, Rng, Tensor, Var};

fn main() -> hipt::Result<()> {
    let mut rng = Rng::new(7);
    let mut randn = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.normal());
    let params = vec![randn(&[4, 6]), randn(&[6, 3]), randn(&[3])];

    // x -> gelu(x W1) W2 + b -> log_softmax, summed
    let f = |g: &mut Graph<f64>, p: &[Var]| {
        let h = g.matmul(p[0], p[1])?;
        let h = g.gelu(h)?;
        let b = g.broadcast_leading(p[2], 4)?;
        let y = g.add(h, b)?;
        let y = g.log_softmax(y)?;
        g.sum(y)
    };
    let r = finite_diff_report(f, &params, 1e-5)?;
    println!(
        "mlp: {} elements, max relative error {:.2e} (analytic {:.6}, numeric {:.6})",
        r.elements, r.max_rel_error, r.analytic, r.numeric
    );

    let suite = hipt::verify::gradient_suite();
    let failed = suite.iter().filter(|c| !c.passed).count();
    for c in &suite {
        println!("{}", c.line());
    }
    println!("{} cases, {failed} failed", suite.len());
    Ok(())
}
