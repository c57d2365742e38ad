//! The pluggable distances used between denoised student and teacher.

use candle_core::{Device, Tensor};
use diffkd::distance::{inter_class_term, intra_class_term, Distance, DistanceKind};

fn main() -> diffkd::Result<()> {
    let dev = Device::Cpu;
    let teacher = Tensor::new(&[[2.0f64, 1.0, 0.1], [0.5, 1.5, -1.0]], &dev)?;
    let student = Tensor::new(&[[1.0f64, 1.0, 1.0], [0.0, 2.0, -0.5]], &dev)?;

    for (kind, tau) in [(DistanceKind::Mse, 1.0), (DistanceKind::Kl, 1.0), (DistanceKind::Kl, 4.0), (DistanceKind::Dist, 1.0)] {
        let d = Distance::new(kind, tau)?.compute(&student, &teacher)?;
        println!("{kind:?} (tau {tau}): {:.6}", d.to_scalar::<f64>()?);
    }

    // Correlation terms ignore positive rescaling and shifts.
    let rescaled = ((&student * 3.0)? + 7.0)?;
    println!(
        "inter {:.6} vs rescaled {:.6}",
        inter_class_term(&student, &teacher)?.to_scalar::<f64>()?,
        inter_class_term(&rescaled, &teacher)?.to_scalar::<f64>()?
    );
    println!("intra {:.6}", intra_class_term(&student, &teacher)?.to_scalar::<f64>()?);
    Ok(())
}
