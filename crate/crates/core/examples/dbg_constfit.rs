use ddsr_core::constfit::{fit_constants, fit_constants_from};
use ddsr_core::expr::{parse_expression, TokenLibrary};
use ddsr_core::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let lib = TokenLibrary::new(1);
    // Avoid the literal exponent: use c*sin(x1)+c*(x1*x1)
    let tree = parse_expression("c*sin(x1)+c*(x1*x1)", &lib).unwrap();
    println!("consts: {:?}", tree.constants());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 60;
    let x = Mat::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
    let y: Vec<f64> = (0..n).map(|i| 3.0 * x.get(i, 0).sin() + 0.5 * x.get(i, 0) * x.get(i, 0)).collect();
    let fit = fit_constants(&tree, &x, &y);
    println!("fit: {:?} nrmse {} iters {} conv {} trace {:?}", fit.constants, fit.nrmse, fit.iterations, fit.converged, fit.rss_trace);

    // The ^ version, starting from the true exponent:
    let tree2 = parse_expression("c*sin(x1)+c*x1^2", &lib).unwrap();
    let fit2 = fit_constants_from(&tree2, &x, &y, &[1.0, 1.0, 2.0]);
    println!("fit2: {:?} nrmse {} iters {} conv {} trace(len {})", fit2.constants, fit2.nrmse, fit2.iterations, fit2.converged, fit2.rss_trace.len());
}
