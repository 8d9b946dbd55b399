//! One linear state-space system, two equivalent execution modes: a stateful
//! recurrent scan and a convolution with the unrolled impulse-response
//! kernel. Both produce the same output sequence.
//!
//! Run with: cargo run --example ssm_modes

use s4cast::linalg::Mat;
use s4cast::ssm::{discretize_bilinear, hippo_legs, ssm_conv, ssm_kernel, ssm_scan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 16;
    let len = 128;
    let delta = 0.05;

    let mut cont = hippo_legs(n)?;
    // The constructor leaves the readout C at zero; give every state
    // coordinate an alternating weight so the output is non-trivial.
    cont.c = Mat::from_fn(1, n, |_, j| if j % 2 == 0 { 1.0 } else { -0.5 });
    let disc = discretize_bilinear(&cont, delta)?;
    println!(
        "N = {n}, delta = {delta}: spectral radius estimate {:.6} (stable, < 1)",
        disc.spectral_radius_estimate()
    );

    // A step input that turns off halfway.
    let input: Vec<f64> = (0..len).map(|k| if k < len / 2 { 1.0 } else { 0.0 }).collect();

    let by_scan = ssm_scan(&disc, &input, None);
    let kernel = ssm_kernel(&disc, len);
    let by_conv = ssm_conv(&kernel, &input)?;

    let max_diff = by_scan
        .iter()
        .zip(&by_conv)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    println!("max |scan - conv| over {len} steps = {max_diff:.3e}");

    println!("\n  k   input   output(scan)  output(conv)");
    for k in [0, 1, 8, 63, 64, 96, 127] {
        println!(
            "{k:>4}   {:>4.1}   {:>12.6}  {:>12.6}",
            input[k], by_scan[k], by_conv[k]
        );
    }

    // The kernel itself decays slowly: that slow decay is the long memory.
    println!("\nkernel head: {:?}", &kernel[..4.min(kernel.len())]);
    println!(
        "kernel |k[0]| / |k[{}]| = {:.1}",
        len - 1,
        kernel[0].abs() / kernel[len - 1].abs().max(1e-300)
    );
    Ok(())
}
