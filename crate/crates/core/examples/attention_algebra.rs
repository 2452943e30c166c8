//! The memory primitives on small hand-checkable inputs.

use maes::memory::{read, sharpen, shift, write, ShiftOffsets};
use maes::{Eager, Tensor};

fn show(label: &str, t: &Tensor) {
    let cells: Vec<String> = t.data().iter().map(|v| format!("{v:.4}")).collect();
    println!("{label:<28} [{}]", cells.join(", "));
}

fn main() -> Result<(), maes::AdError> {
    let g = &mut Eager;
    let unit = ShiftOffsets::unit();

    let w = Tensor::one_hot(8, 4);
    show("one-hot at 4", &w);
    show("shift +1", &shift(g, &w, &Tensor::one_hot(3, 2), &unit)?);
    show(
        "shift +1 from 7 (wraps)",
        &shift(g, &Tensor::one_hot(8, 7), &Tensor::one_hot(3, 2), &unit)?,
    );

    let blurred = shift(g, &w, &Tensor::vector(vec![0.1, 0.2, 0.7]), &unit)?;
    show("soft shift", &blurred);
    for gamma in [1.0, 2.0, 10.0] {
        show(
            &format!("sharpen gamma={gamma}"),
            &sharpen(g, &blurred, &Tensor::scalar(gamma))?,
        );
    }
    show(
        "[0.8, 0.2] squared",
        &sharpen(g, &Tensor::vector(vec![0.8, 0.2]), &Tensor::scalar(2.0))?,
    );

    let wide = ShiftOffsets::symmetric(2);
    show(
        "radius 2, all mass on +2",
        &shift(g, &w, &Tensor::one_hot(5, 4), &wide)?,
    );

    let memory = Tensor::zeros(&[4, 3]);
    let a = Tensor::vector(vec![1.0, -1.0, 0.5]);
    let m = write(g, memory, &Tensor::one_hot(4, 2), &Tensor::vector(vec![1.0; 3]), &a)?;
    show("read row 2 after write", &read(g, &m, &Tensor::one_hot(4, 2))?);
    show(
        "read blend of rows 1 and 2",
        &read(g, &m, &Tensor::vector(vec![0.0, 0.5, 0.5, 0.0]))?,
    );
    Ok(())
}
