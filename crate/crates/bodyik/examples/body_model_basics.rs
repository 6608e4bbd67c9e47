//! Body model basics: generate a synthetic model, apply shape
//! coefficients, pose it with forward kinematics, skin the mesh and write
//! an OBJ you can open in any viewer.
//!
//! ```sh
//! cargo run --example body_model_basics
//! ```

use bodyik::bodymodel::{
    forward_kinematics, generate_synthetic_model, skin, NUM_JOINTS, NUM_SHAPE,
};
use bodyik::harness::files::write_obj;
use bodyik::rotmath::{rodrigues, RotMat};
use nalgebra::Vector3;

fn main() -> bodyik::Result<()> {
    let model = generate_synthetic_model(7, 600)?;
    println!(
        "model: {} vertices, {} faces, {} joints",
        model.vertex_count(),
        model.faces.len(),
        NUM_JOINTS
    );

    let rest = model.rest_joints();
    println!("pelvis rest position: {:.3?}", (rest[0].x, rest[0].y, rest[0].z));

    // A mild shape change lengthens limbs a little.
    let mut beta = [0.0; NUM_SHAPE];
    beta[0] = 2.0;
    beta[3] = -1.5;

    // Raise the left shoulder chain and bend the right elbow.
    let mut rotations = [RotMat::identity(); NUM_JOINTS];
    rotations[16] = rodrigues(&Vector3::new(0.0, 0.0, 1.0), 0.4f64.cos(), 0.4f64.sin())?;
    rotations[19] = rodrigues(&Vector3::new(0.0, 1.0, 0.0), 0.9f64.cos(), 0.9f64.sin())?;

    let (joints, transforms) = forward_kinematics(&model, &rotations, &beta);
    println!(
        "posed left wrist: {:.3?}",
        (joints[20].x, joints[20].y, joints[20].z)
    );

    let mesh = skin(&model, &transforms, &beta);
    let out = std::env::temp_dir().join("bodyik_posed.obj");
    write_obj(&mesh, &out)?;
    println!("wrote posed mesh to {}", out.display());
    Ok(())
}
