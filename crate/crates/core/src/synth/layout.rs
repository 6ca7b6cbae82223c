//! Every geometric constant used by the synthetic users. Coordinates are
//! metres on the table plane, `x` to the user's right, `y` away from them.
//! Real-scene offsets are written for a right-handed user; left-handed
//! layouts negate `x`. Abstract lines ignore handedness.

use crate::semantics::ShapeKind;

pub const RED: [f64; 3] = [1.0, 0.0, 0.0];
pub const BLUE: [f64; 3] = [0.0, 0.0, 1.0];

/// One block of an abstract scene.
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub name: &'static str,
    pub size: f64,
    pub rgb: [f64; 3],
    pub shape: ShapeKind,
}

const fn block(name: &'static str, size: f64, rgb: [f64; 3], shape: ShapeKind) -> Block {
    Block { name, size, rgb, shape }
}

/// Eight blocks with distinct sizes: three red and five blue, four boxes and
/// four cylinders, so colour and shape groupers fill the lines unevenly and
/// disagree on five blocks.
pub const ABSTRACT1: [Block; 8] = [
    block("red_box_a", 0.30, RED, ShapeKind::Box),
    block("blue_cylinder_a", 0.40, BLUE, ShapeKind::Cylinder),
    block("red_cylinder_a", 0.50, RED, ShapeKind::Cylinder),
    block("blue_box_a", 0.60, BLUE, ShapeKind::Box),
    block("blue_box_b", 0.70, BLUE, ShapeKind::Box),
    block("blue_cylinder_b", 0.80, BLUE, ShapeKind::Cylinder),
    block("red_cylinder_b", 0.90, RED, ShapeKind::Cylinder),
    block("blue_box_c", 1.00, BLUE, ShapeKind::Box),
];

/// Two red and four blue, three of each shape; groupers disagree on three.
pub const ABSTRACT2: [Block; 6] = [
    block("red_box_b", 0.35, RED, ShapeKind::Box),
    block("blue_cylinder_c", 0.45, BLUE, ShapeKind::Cylinder),
    block("red_cylinder_c", 0.55, RED, ShapeKind::Cylinder),
    block("blue_box_d", 0.65, BLUE, ShapeKind::Box),
    block("blue_box_e", 0.85, BLUE, ShapeKind::Box),
    block("blue_cylinder_d", 0.95, BLUE, ShapeKind::Cylinder),
];

/// `y` of the far line (red blocks for colour groupers, boxes for shape
/// groupers) and of the near line.
pub const LINE_Y: [f64; 2] = [0.15, -0.15];
/// Gap between neighbours in a line at compactness 1.
pub const LINE_SPACING: f64 = 0.12;

/// Place setting around a plate at the origin.
pub const DINING: [(&str, [f64; 2]); 7] = [
    ("plate", [0.0, 0.0]),
    ("fork", [-0.20, 0.0]),
    ("knife", [0.20, 0.0]),
    ("spoon", [0.28, 0.0]),
    ("cup", [0.24, 0.20]),
    ("glass", [0.10, 0.24]),
    ("napkin", [-0.32, 0.0]),
];

/// Desk layout. The computer stands under the desk on the dominant side.
pub const OFFICE: [(&str, [f64; 2]); 9] = [
    ("monitor", [0.0, 0.35]),
    ("keyboard", [0.0, 0.08]),
    ("mouse", [0.30, 0.08]),
    ("computer", [0.65, -0.35]),
    ("lamp", [-0.45, 0.35]),
    ("notepad", [0.42, 0.22]),
    ("pencil", [0.52, 0.22]),
    ("mug", [0.35, 0.35]),
    ("laptop", [0.0, -0.12]),
];

/// Office objects that never appear placed in generated scenes; their
/// ground truth is only known to the generator.
pub const OFFICE_UNPLACED: [&str; 1] = ["laptop"];

/// Per-template multiplier on a user's placement noise.
pub const NOISE_RATIO: [(&str, f64); 4] = [("abstract1", 1.0), ("abstract2", 1.0), ("dining", 1.0), ("office", 2.5)];

pub const DEFAULT_SIGMA: f64 = 0.02;
pub const COMPACTNESS_RANGE: (f64, f64) = (0.5, 1.5);
/// Compactness drawn for generated users.
pub const DEFAULT_COMPACTNESS_DRAW: (f64, f64) = (0.8, 1.2);
